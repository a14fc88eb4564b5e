"""Overfit EEDS x3 on one 32->96 pair with batch 1 and report the outcome."""

import argparse
import time

from eeds.experiments import OverfitConfig, run_overfit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--kind", default="EEDS")
    p.add_argument("--image", default="astronaut")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    cfg = OverfitConfig(kind=a.kind, lr=a.lr, steps=a.steps, image=a.image, seed=a.seed)
    t0 = time.perf_counter()
    res = run_overfit(cfg)
    print(f"{cfg}")
    if res.diverged_at is not None:
        print(f"diverged at step {res.diverged_at}")
    print(f"loss {res.initial_loss:.4g} -> {res.final_loss:.4g} (ratio {res.loss_ratio:.4f})")
    print(f"PSNR on the pair: {res.psnr_db:.2f} dB")
    print("100-step window means after step 200:",
          " ".join(f"{m:.4g}" for m in res.window_means()))
    print(f"windows non-increasing: {res.windows_non_increasing}; {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
