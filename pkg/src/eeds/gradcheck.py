"""Finite-difference checks of every differentiable op and of a whole model.

Each op is reduced to a scalar by projecting its output onto a fixed random
tensor, so the analytic gradient of the scalar is the op's vector-Jacobian
product with that tensor.  Everything runs in float64.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import ops
from .models import DEFAULT_DECONV_KERNEL, DEFAULT_DECONV_PAD, build_model
from .ops import GradCheckReport, GradTape, grad_check
from .tensor import concat_channels

F64 = np.float64


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(F64)


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    # Keep ReLU inputs off the kink so central differences stay one-sided-free.
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def check_conv(k: int, rng, stride: int = 1) -> GradCheckReport:
    x, w, b = _rand(rng, 2, 3, 9, 9), _rand(rng, 4, 3, k, k), _rand(rng, 4)
    pad = k // 2
    r = _rand(rng, *ops.conv2d_forward(x, w, b, stride, pad).shape)
    fn = lambda x, w, b: float(np.sum(ops.conv2d_forward(x, w, b, stride, pad) * r))
    gx, gw, gb = ops.conv2d_backward(r, x, w, stride, pad)
    return grad_check(fn, [x, w, b], [gx, gw, gb], eps=1e-6, rng=rng, name=f"conv k={k}")


def check_deconv(scale: int, rng) -> GradCheckReport:
    k, pad = DEFAULT_DECONV_KERNEL[scale], DEFAULT_DECONV_PAD
    x, w, b = _rand(rng, 2, 3, 8, 8), _rand(rng, 3, 2, k, k), _rand(rng, 2)
    r = _rand(rng, *ops.deconv2d_forward(x, w, b, scale, pad).shape)
    fn = lambda x, w, b: float(np.sum(ops.deconv2d_forward(x, w, b, scale, pad) * r))
    gx, gw, gb = ops.deconv2d_backward(r, x, w, scale, pad)
    return grad_check(fn, [x, w, b], [gx, gw, gb], eps=1e-6, rng=rng,
                      name=f"deconv s={scale} k={k} pad={pad}")


def check_relu(rng) -> GradCheckReport:
    x = _away_from_zero(_rand(rng, 2, 3, 6, 6))
    r = _rand(rng, *x.shape)
    fn = lambda x: float(np.sum(ops.relu_forward(x) * r))
    return grad_check(fn, [x], [ops.relu_backward(r, x)], eps=1e-6, rng=rng, name="relu")


def check_add(rng) -> GradCheckReport:
    a, b = _rand(rng, 2, 3, 5, 5), _rand(rng, 2, 3, 5, 5)
    r = _rand(rng, *a.shape)
    fn = lambda a, b: float(np.sum((a + b) ** 2 * r))
    g = 2 * (a + b) * r
    return grad_check(fn, [a, b], [g, g], eps=1e-6, rng=rng, name="add")


def check_concat(rng) -> GradCheckReport:
    parts = [_rand(rng, 2, c, 5, 5) for c in (1, 3, 2)]
    r = _rand(rng, 2, 6, 5, 5)
    fn = lambda *p: float(np.sum(concat_channels(list(p)) * r))
    return grad_check(fn, parts, ops.concat_backward(r, [1, 3, 2]), eps=1e-6, rng=rng,
                      name="concat")


def check_loss(rng) -> GradCheckReport:
    pred, target = _rand(rng, 3, 1, 6, 6), _rand(rng, 3, 1, 6, 6)
    fn = lambda p: ops.euclidean_loss(p, target)[0]
    return grad_check(fn, [pred], [ops.euclidean_loss(pred, target)[1]], eps=1e-6, rng=rng,
                      name="euclidean loss")


def check_model(kind: str = "EEDS", scale: int = 2, rng=None, tolerance: float = 1e-2,
                samples: int = 3) -> GradCheckReport:
    """Whole-model check: loss gradient w.r.t. every parameter tensor.

    Weights are drawn with He scaling in float64 so no branch has vanishing
    gradients; ``samples`` coordinates are probed in each parameter tensor.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    model = build_model(kind, scale)
    for p in model.layers():
        fan_in = p.in_channels * p.kernel**2
        p.weight = rng.standard_normal(p.weight.shape) * np.sqrt(2.0 / fan_in)
        p.bias = 0.1 * rng.standard_normal(p.bias.shape)
        p.zero_grad()
    x = rng.uniform(0, 1, (2, 1, 8, 8))
    x = model.prepare_input(x)
    target = rng.uniform(0, 1, model.forward(x).shape)

    def loss():
        return ops.euclidean_loss(model.forward(x), target)[0]

    tape = GradTape()
    _, g = ops.euclidean_loss(model.forward(x, tape), target)
    tape.backward("y", g)
    layers = model.layers()
    params = [a for p in layers for a in (p.weight, p.bias)]
    grads = [a for p in layers for a in (p.grad_w, p.grad_b)]
    fn = lambda *_: loss()  # parameters are perturbed in place
    return grad_check(fn, params, grads, eps=1e-6, tolerance=tolerance, max_samples=samples,
                      rng=rng, name=f"whole model {kind} x{scale}")


OP_CHECKS: dict[str, Callable] = {
    **{f"conv{k}": (lambda rng, k=k: check_conv(k, rng)) for k in (1, 3, 5, 7)},
    **{f"deconv{s}": (lambda rng, s=s: check_deconv(s, rng)) for s in (2, 3, 4)},
    "relu": check_relu,
    "add": check_add,
    "concat": check_concat,
    "loss": check_loss,
}


def run_checks(names=None, full: bool = False, seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    names = list(OP_CHECKS) if names is None or full else list(names)
    reports = [OP_CHECKS[n](rng) for n in names]
    if full:
        reports += [check_model("EEDS", s, rng) for s in (2, 3, 4)]
    return reports


def format_reports(reports, seconds: float | None = None) -> str:
    width = max(len(r.name) for r in reports)
    lines = [f"{'check':<{width}}  {'max rel err':>11}  {'tol':>7}  {'n':>4}  result"]
    for r in reports:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:>11.3e}  {r.tolerance:>7.0e}  "
                     f"{r.checked:>4}  {'PASS' if r.passed else 'FAIL'}")
    if seconds is not None:
        lines.append(f"({seconds:.1f} s)")
    return "\n".join(lines)


def timed_checks(**kw):
    t0 = time.perf_counter()
    reports = run_checks(**kw)
    return reports, time.perf_counter() - t0
