"""Small, fully seeded training experiments used by the scripts and the
acceptance suite: a single-pair overfit run and a desk-scale run on the
bundled sample crops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .images import SamplePair, bicubic_resize, crop_pair, list_images, load_luminance, make_dataset, split_holdout
from .metrics import psnr
from .models import build_model
from .train import (PreparedData, TrainConfig, TrainingDiverged, TrainResult, from_model,
                    init_params, prepare_data, train)

DESK_DIR = Path(__file__).resolve().parents[2] / "data" / "desk"


def load_desk_images(directory=DESK_DIR) -> list[tuple[str, np.ndarray]]:
    return [(p.stem, load_luminance(p)) for p in list_images(directory)]


# --------------------------------------------------------------------------
# single-pair overfit


@dataclass
class OverfitConfig:
    kind: str = "EEDS"
    scale: int = 3
    patch: int = 96
    steps: int = 2000
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.005
    steps_per_epoch: int = 100
    image: str = "astronaut"
    seed: int = 0


@dataclass
class OverfitResult:
    cfg: OverfitConfig
    step_losses: list[float]
    psnr_db: float
    diverged_at: int | None = None
    train: TrainResult | None = None

    @property
    def initial_loss(self) -> float:
        return self.step_losses[0]

    @property
    def final_loss(self) -> float:
        return self.step_losses[-1] if self.step_losses else math.nan

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss

    def window_means(self, start: int = 200, width: int = 100) -> list[float]:
        tail = np.asarray(self.step_losses[start:], dtype=np.float64)
        n = len(tail) // width
        return [float(tail[i * width: (i + 1) * width].mean()) for i in range(n)]

    @property
    def windows_non_increasing(self) -> bool:
        m = self.window_means()
        return len(m) > 0 and all(b <= a for a, b in zip(m, m[1:]))


def overfit_pair(cfg: OverfitConfig) -> SamplePair:
    images = dict(load_desk_images())
    img = images[cfg.image]
    top = cfg.scale * ((img.shape[0] - cfg.patch) // (2 * cfg.scale))
    left = cfg.scale * ((img.shape[1] - cfg.patch) // (2 * cfg.scale))
    return crop_pair(img, cfg.scale, top, left, cfg.patch)


def pair_psnr(model, data: PreparedData) -> float:
    """Mean PSNR of rounded, clipped predictions against byte-range targets."""
    vals = []
    for i in range(len(data)):
        pred = model.forward(data.inputs[i: i + 1])[0, 0]
        pred = np.clip(np.floor(from_model(pred) + 0.5), 0, 255)
        vals.append(psnr(pred, from_model(data.targets[i, 0]), shave=0))
    return float(np.mean(vals))


def run_overfit(cfg: OverfitConfig = OverfitConfig()) -> OverfitResult:
    """Train on one pair with batch 1 at a fixed learning rate.

    The pair is repeated ``steps_per_epoch`` times so an epoch is that many
    steps; validation uses the pair itself and learning-rate decay is off.
    """
    model = build_model(cfg.kind, cfg.scale)
    init_params(model, seed=cfg.seed)
    one = prepare_data(model, [overfit_pair(cfg)])
    data = PreparedData(np.repeat(one.inputs, cfg.steps_per_epoch, axis=0),
                        np.repeat(one.targets, cfg.steps_per_epoch, axis=0))
    tcfg = TrainConfig(batch_size=1, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       lr_initial=cfg.lr, max_decays=0, micro_batch=1, seed=cfg.seed,
                       max_epochs=math.ceil(cfg.steps / cfg.steps_per_epoch), max_steps=cfg.steps)
    losses: list[float] = []
    try:
        res = train(model, data, one, tcfg, on_step=lambda s, l: losses.append(l))
    except TrainingDiverged:
        return OverfitResult(cfg, losses, math.nan, diverged_at=len(losses) + 1)
    return OverfitResult(cfg, losses, pair_psnr(model, one), train=res)


# --------------------------------------------------------------------------
# desk-scale run


@dataclass
class DeskConfig:
    kind: str = "EEDS"
    scale: int = 3
    patch: int = 48
    n_train: int = 200
    n_val: int = 50
    n_holdout_images: int = 4
    batch_size: int = 16
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 0.005
    epochs: int = 60
    micro_batch: int = 16
    seed: int = 0


@dataclass
class DeskResult:
    cfg: DeskConfig
    train: TrainResult
    model: object
    val: PreparedData
    val_pairs: list[SamplePair]
    train_images: list[str]
    val_images: list[str]
    bicubic_psnr: float = math.nan
    model_psnr: float = math.nan
    curve: list[tuple[int, float]] = field(default_factory=list)

    @property
    def gain_db(self) -> float:
        return self.model_psnr - self.bicubic_psnr


def desk_data(cfg: DeskConfig):
    images = load_desk_images()
    train_imgs, val_imgs = split_holdout(images, cfg.n_holdout_images, seed=cfg.seed)
    train_pairs = make_dataset([im for _, im in train_imgs], cfg.scale, cfg.patch,
                               cfg.n_train, seed=cfg.seed)
    val_pairs = make_dataset([im for _, im in val_imgs], cfg.scale, cfg.patch, cfg.n_val,
                             seed=cfg.seed + 1)
    return train_pairs, val_pairs, [n for n, _ in train_imgs], [n for n, _ in val_imgs]


def bicubic_psnr(pairs, scale: int) -> float:
    vals = []
    for p in pairs:
        up = np.clip(np.floor(bicubic_resize(p.lr, scale=scale) + 0.5), 0, 255)
        vals.append(psnr(up, p.hr, shave=0))
    return float(np.mean(vals))


def run_desk(cfg: DeskConfig = DeskConfig(), on_epoch=None) -> DeskResult:
    """Train on patches of 12 sample crops; validate on patches of 4 others."""
    train_pairs, val_pairs, tnames, vnames = desk_data(cfg)
    model = build_model(cfg.kind, cfg.scale)
    init_params(model, seed=cfg.seed)
    tr, va = prepare_data(model, train_pairs), prepare_data(model, val_pairs)
    tcfg = TrainConfig(batch_size=cfg.batch_size, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, lr_initial=cfg.lr, micro_batch=cfg.micro_batch,
                       max_epochs=cfg.epochs, seed=cfg.seed)
    res = train(model, tr, va, tcfg, on_epoch=on_epoch)
    out = DeskResult(cfg, res, model, va, val_pairs, tnames, vnames)
    out.bicubic_psnr = bicubic_psnr(val_pairs, cfg.scale)
    out.model_psnr = pair_psnr(model, va)
    out.curve = [(r.step, r.val_loss) for r in res.epochs]
    return out


def steps_to_reach(curve, threshold: float) -> int | None:
    """First step at which a validation curve is at or below ``threshold``."""
    for step, val in curve:
        if val <= threshold:
            return step
    return None


def converges_no_slower(fast, slow) -> bool:
    """True when ``fast`` reaches every threshold ``slow`` reaches, no later.

    Thresholds are the values on the ``slow`` curve, which is where the
    first-hit step of ``slow`` can change.
    """
    for _, thr in slow:
        a, b = steps_to_reach(fast, thr), steps_to_reach(slow, thr)
        if a is None or a > b:
            return False
    return True


LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def laplacian_energy(img: np.ndarray) -> float:
    """Mean squared response of the 4-neighbour Laplacian over interior pixels."""
    x = np.asarray(img, dtype=np.float64)
    lap = (x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:] - 4 * x[1:-1, 1:-1])
    return float(np.mean(lap**2))


def branch_energies(model, data: PreparedData) -> dict[str, float]:
    """Average Laplacian energy of each branch's lone output over ``data``."""
    sums: dict[str, float] = {}
    for i in range(len(data)):
        for name, y in model.branch_outputs(data.inputs[i: i + 1]).items():
            sums[name] = sums.get(name, 0.0) + laplacian_energy(y[0, 0])
    return {k: v / len(data) for k, v in sums.items()}


def with_kind(cfg, kind: str):
    return replace(cfg, kind=kind)
