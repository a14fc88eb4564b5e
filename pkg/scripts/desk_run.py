"""Desk-scale run: train one variant on 200 patches of the bundled crops and
compare with bicubic on 50 held-out patches."""

import argparse
import time
from pathlib import Path

from eeds.experiments import DeskConfig, branch_energies, pair_psnr, run_desk
from eeds.train import save_checkpoint


def main():
    d = DeskConfig()
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--kind", default=d.kind)
    p.add_argument("--scale", type=int, default=d.scale)
    p.add_argument("--patch", type=int, default=d.patch)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--out", help="directory for the log and final checkpoint")
    a = p.parse_args()
    cfg = DeskConfig(kind=a.kind, scale=a.scale, patch=a.patch, batch_size=a.batch_size,
                     micro_batch=a.batch_size, lr=a.lr, epochs=a.epochs, seed=a.seed)
    t0 = time.perf_counter()

    def on_epoch(rec, model):
        print(f"epoch {rec.epoch:3d} step {rec.step:6d} train {rec.train_loss:.4f} "
              f"val {rec.val_loss:.4f} lr {rec.lr:.2g} {time.perf_counter() - t0:.0f}s", flush=True)

    res = run_desk(cfg, on_epoch=on_epoch)
    print(f"train images: {', '.join(res.train_images)}")
    print(f"held-out images: {', '.join(res.val_images)}")
    print(f"{cfg.kind}: {res.model_psnr:.2f} dB, bicubic {res.bicubic_psnr:.2f} dB, gain {res.gain_db:+.2f} dB")
    print("branch Laplacian energy:", branch_energies(res.model, res.val))
    if a.out:
        out = Path(a.out)
        res.train.write_log(out / "train_log.csv")
        save_checkpoint(res.train.final, out / "final.eeds")
        print(f"wrote {out}")


if __name__ == "__main__":
    main()
