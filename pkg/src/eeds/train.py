"""Joint SGD training of the deep and shallow networks, parameter
initialization and the checkpoint file format."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .images import SamplePair, stack_pairs
from .models import SRModel, VariantConfig, build_variant
from .ops import GradTape, LayerParams, euclidean_loss

log = logging.getLogger(__name__)

# Models see luminance in [0, 1]; the image pipeline works in [0, 255].
PIXEL_SCALE = 1.0 / 255.0


def to_model(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) * np.float32(PIXEL_SCALE)).astype(np.float32)


def from_model(y: np.ndarray) -> np.ndarray:
    return np.asarray(y, dtype=np.float32) * np.float32(255.0)


@dataclass
class TrainConfig:
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.005
    lr_initial: float = 1e-4
    lr_decay_factor: float = 0.1
    plateau_patience: int = 5
    max_decays: int = 3
    max_epochs: int = 95
    max_steps: int = 0  # 0 = no step limit
    micro_batch: int = 8
    seed: int = 0

    def __post_init__(self):
        for f in ("batch_size", "plateau_patience", "max_epochs", "micro_batch"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        if self.lr_initial < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr_initial, weight_decay must be >= 0 and momentum in [0, 1)")
        if self.max_steps < 0 or self.max_decays < 0:
            raise ValueError("max_steps and max_decays must be >= 0")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        cast = {"int": int, "float": float}
        return cls(**{k: cast[known[k]](v) for k, v in values.items()})


# --------------------------------------------------------------------------
# initialization


def bilinear_kernel(k: int) -> np.ndarray:
    """2-D bilinear interpolation kernel of size ``k``."""
    f = math.ceil(k / 2)
    c = f - 1 if k % 2 else f - 0.5
    row = 1 - np.abs(np.arange(k) - c) / f
    return np.outer(row, row)


def init_params(model, seed: int = 0, std: float = 0.01):
    """Gaussian conv weights, bilinear deconv weights, zero biases.

    ``model`` is an ``SRModel`` or a single ``ModelGraph``.  Draws come from
    one generator in layer order, so a seed fixes every weight.
    """
    rng = np.random.default_rng(seed)
    for p in model.layers():
        p.bias[...] = 0
        if p.kind == "conv":
            p.weight[...] = rng.normal(0.0, std, p.weight.shape)
        else:
            p.weight[...] = 0
            kern = bilinear_kernel(p.kernel)
            for i in range(min(p.weight.shape[0], p.weight.shape[1])):
                p.weight[i, i] = kern
        p.zero_grad()


# --------------------------------------------------------------------------
# optimizer


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    velocity: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, named_layers: dict[str, LayerParams]) -> "OptimizerState":
        return cls({k: (np.zeros_like(p.weight), np.zeros_like(p.bias))
                    for k, p in named_layers.items()})


def sgd_step(named_layers: dict[str, LayerParams], state: OptimizerState, lr: float,
             momentum: float, weight_decay: float):
    """Momentum SGD with L2 weight decay on weights only.

    ``v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v``
    """
    for name, p in named_layers.items():
        if not (np.all(np.isfinite(p.grad_w)) and np.all(np.isfinite(p.grad_b))):
            raise NonFiniteGradient(f"non-finite gradient in layer {name}")
    for name, p in named_layers.items():
        if name not in state.velocity:
            state.velocity[name] = (np.zeros_like(p.weight), np.zeros_like(p.bias))
        vw, vb = state.velocity[name]
        vw *= momentum
        vw -= lr * (p.grad_w + weight_decay * p.weight)
        vb *= momentum
        vb -= lr * p.grad_b
        p.weight += vw
        p.bias += vb


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"EEDS"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    scale: int
    kind: str
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    val_history: list[float] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, model: SRModel, state: OptimizerState | None = None, epoch=0, step=0,
                lr=0.0, val_history=()) -> "Checkpoint":
        params = {k: v.copy() for k, v in model.named_parameters().items()}
        velocity = {}
        if state is not None:
            for name, (vw, vb) in state.velocity.items():
                velocity[f"{name}.weight"] = vw.copy()
                velocity[f"{name}.bias"] = vb.copy()
        return cls(model.scale, model.kind, params, velocity, epoch, step, float(lr),
                   [float(v) for v in val_history])

    def restore(self, model: SRModel) -> OptimizerState:
        if (model.scale, model.kind) != (self.scale, self.kind):
            raise CheckpointError(
                f"checkpoint is {self.kind} x{self.scale}, model is {model.kind} x{model.scale}"
            )
        targets = model.named_parameters()
        if set(targets) != set(self.params):
            raise CheckpointError("checkpoint parameter names do not match the model")
        for k, v in self.params.items():
            if targets[k].shape != v.shape:
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {targets[k].shape}")
            targets[k][...] = v
        state = OptimizerState()
        for name, p in model.named_layers().items():
            if f"{name}.weight" in self.velocity:
                state.velocity[name] = (self.velocity[f"{name}.weight"].copy(),
                                        self.velocity[f"{name}.bias"].copy())
        return state

    def to_model(self) -> SRModel:
        model = build_variant(VariantConfig(self.kind, self.scale))
        self.restore(model)
        return model


def _record(buf: io.BytesIO, name: str, arr: np.ndarray):
    dims = tuple(arr.shape) + (1,) * (4 - arr.ndim)
    raw = name.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<4I", *dims))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize: magic, u32 version, u32 scale, variant tag, JSON metadata,
    tensor records (name, 4 x u32 dims, little-endian f32 blob), CRC32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ckpt.version, ckpt.scale))
    tag = ckpt.kind.encode()
    buf.write(struct.pack("<I", len(tag)))
    buf.write(tag)
    meta = json.dumps({"epoch": ckpt.epoch, "step": ckpt.step, "lr": ckpt.lr,
                       "val_history": ckpt.val_history,
                       "ndim": {k: v.ndim for k, v in {**ckpt.params, **ckpt.velocity}.items()}},
                      sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    records += [(f"velocity/{k}", v) for k, v in ckpt.velocity.items()]
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _record(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an EEDS checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: file is corrupt")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        out = body[pos: pos + n]
        pos += n
        return out

    version, scale = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    kind = take(n).decode()
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n))
    (count,) = struct.unpack("<I", take(4))
    params, velocity = {}, {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        dims = struct.unpack("<4I", take(16))
        arr = np.frombuffer(take(4 * math.prod(dims)), dtype="<f4").astype(np.float32)
        group, _, key = name.partition("/")
        arr = arr.reshape(dims[: meta["ndim"][key]])
        (params if group == "param" else velocity)[key] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(scale, kind, params, velocity, meta["epoch"], meta["step"], meta["lr"],
                      meta["val_history"], version)


def load_checkpoint(path, expect_kind: str | None = None, expect_scale: int | None = None) -> Checkpoint:
    ckpt = parse_checkpoint(Path(path).read_bytes())
    if expect_scale is not None and ckpt.scale != expect_scale:
        raise CheckpointError(f"checkpoint scale x{ckpt.scale} != requested x{expect_scale}")
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise CheckpointError(f"checkpoint variant {ckpt.kind} != requested {expect_kind}")
    return ckpt


# --------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    wall_seconds: float
    step: int


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    epochs: list[EpochRecord]
    step_losses: list[float]

    def write_log(self, path, include_wall: bool = True):
        write_log(self.epochs, path, include_wall)


def write_log(epochs: Sequence[EpochRecord], path, include_wall: bool = True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["epoch", "lr", "train_loss", "val_loss"] + (["wall_seconds"] if include_wall else [])
        w.writerow(cols)
        for r in epochs:
            row = [r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss)]
            w.writerow(row + ([f"{r.wall_seconds:.3f}"] if include_wall else []))


@dataclass
class PreparedData:
    """Network-ready inputs and targets (unit range, pre-upscaled where needed)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def prepare_data(model: SRModel, pairs: Sequence[SamplePair]) -> PreparedData:
    if not pairs:
        raise ValueError("dataset is empty")
    lr, hr = stack_pairs(pairs)
    if any(p.scale != model.scale for p in pairs):
        raise ValueError("sample scale differs from model scale")
    return PreparedData(model.prepare_input(to_model(lr)), to_model(hr))


def batch_loss_and_grad(model: SRModel, x: np.ndarray, y: np.ndarray, micro_batch: int) -> float:
    """Accumulate gradients of the batch loss into the layers; return the loss."""
    n = x.shape[0]
    total = 0.0
    for start in range(0, n, micro_batch):
        xs, ys = x[start: start + micro_batch], y[start: start + micro_batch]
        tape = GradTape()
        pred = model.forward(xs, tape)
        loss, grad = euclidean_loss(pred, ys)
        frac = xs.shape[0] / n
        total += loss * frac
        tape.backward("y", (grad * np.float32(frac)).astype(grad.dtype))
    return total


def evaluate_loss(model: SRModel, data: PreparedData, micro_batch: int = 8) -> float:
    total = 0.0
    for start in range(0, len(data), micro_batch):
        xs = data.inputs[start: start + micro_batch]
        ys = data.targets[start: start + micro_batch]
        loss, _ = euclidean_loss(model.forward(xs), ys)
        total += loss * xs.shape[0]
    return total / len(data)


def train(model: SRModel, train_set: PreparedData, val_set: PreparedData | None,
          cfg: TrainConfig, state: OptimizerState | None = None,
          on_step: Callable[[int, float], None] | None = None,
          on_epoch: Callable[[EpochRecord, SRModel], None] | None = None,
          start_epoch: int = 0, start_step: int = 0, lr: float | None = None,
          val_history: Sequence[float] = ()) -> TrainResult:
    """Minimize the ensemble Euclidean loss jointly over all parameters.

    Each epoch shuffles ``train_set`` with a generator seeded from
    ``cfg.seed`` and the epoch number, takes one SGD step per batch and then
    measures the validation loss (the training set is used when ``val_set``
    is None).  The learning rate is multiplied by ``lr_decay_factor`` after
    ``plateau_patience`` epochs without a new validation minimum, at most
    ``max_decays`` times.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    val_set = train_set if val_set is None else val_set
    layers = model.named_layers()
    state = OptimizerState.zeros_like(layers) if state is None else state
    lr = cfg.lr_initial if lr is None else lr
    history = list(val_history)
    best_val = min(history) if history else math.inf
    best = Checkpoint.capture(model, state, start_epoch, start_step, lr, history)
    last_good = best
    since_best, decays = 0, 0
    step = start_step
    epochs: list[EpochRecord] = []
    step_losses: list[float] = []
    t0 = time.perf_counter()

    for epoch in range(start_epoch, start_epoch + cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start: start + cfg.batch_size])
            model.zero_grad()
            loss = batch_loss_and_grad(model, train_set.inputs[idx], train_set.targets[idx],
                                       cfg.micro_batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}", last_good)
            try:
                sgd_step(layers, state, lr, cfg.momentum, cfg.weight_decay)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            step += 1
            losses.append(loss)
            step_losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            if cfg.max_steps and step >= cfg.max_steps:
                break

        val = evaluate_loss(model, val_set, cfg.micro_batch)
        if not math.isfinite(val):
            raise TrainingDiverged(f"validation loss became {val} in epoch {epoch}", last_good)
        history.append(val)
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), val, time.perf_counter() - t0, step)
        epochs.append(rec)
        log.info("epoch %d step %d lr %.3g train %.6g val %.6g", epoch, step, lr,
                 rec.train_loss, val)
        last_good = Checkpoint.capture(model, state, epoch + 1, step, lr, history)
        if val < best_val:
            best_val, since_best = val, 0
            best = last_good
        else:
            since_best += 1
            if since_best >= cfg.plateau_patience and decays < cfg.max_decays:
                lr *= cfg.lr_decay_factor
                decays += 1
                since_best = 0
                log.info("validation loss stalled; lr -> %.3g", lr)
        if on_epoch is not None:
            on_epoch(rec, model)
        if cfg.max_steps and step >= cfg.max_steps:
            break

    final = Checkpoint.capture(model, state, epochs[-1].epoch + 1, step, lr, history)
    return TrainResult(final, best, epochs, step_losses)
