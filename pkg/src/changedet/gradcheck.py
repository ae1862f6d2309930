"""Finite-difference verification of every backward implementation.

Each registered op has a builder that draws a small random instance (all
extents kept tiny so exhaustive per-element differencing stays cheap) with
inputs conditioned away from kinks: relu inputs off zero, max-pool groups
with a clear winner, probabilities clear of their clamps, and nonzero
student/teacher gaps for the absolute-error loss.

The check runs in 64-bit: the analytic gradient of a random scalar
projection of the output is compared against central differences, element
by element, using rel = |a - n| / max(|a|, |n|, 1).
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from .errors import ConfigError
from .tensor import REAL64, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_THRESHOLD = 1e-4
DEFAULT_INSTANCES = 20


@dataclass
class OpReport:
    op: str
    instances: int
    max_rel_err: float
    passed: bool
    seconds: float


def _project(fn, arrays: dict[str, np.ndarray], cot: np.ndarray) -> float:
    out = fn({k: Tensor(v) for k, v in arrays.items()})
    return float((out.data * cot).sum())


def check_instance(
    arrays: dict[str, np.ndarray],
    fn: Callable[[dict[str, Tensor]], Tensor],
    rng: np.random.Generator,
    step: float = DEFAULT_STEP,
    sample_elements: int | None = None,
) -> float:
    """Max relative error between analytic and numeric gradients.

    fn maps named tensors to a single output tensor.  When sample_elements
    is given, only that many randomly chosen input elements are differenced
    (for composites too large to sweep exhaustively).
    """
    tensors = {k: Tensor(v) for k, v in arrays.items()}
    with T.Tape() as tape:
        out = fn(tensors)
    cot = rng.standard_normal(out.shape)
    tape._seeded_backward(out, cot)

    slots = [(name, idx) for name, arr in arrays.items() for idx in np.ndindex(arr.shape)]
    if sample_elements is not None and sample_elements < len(slots):
        chosen = rng.choice(len(slots), size=sample_elements, replace=False)
        slots = [slots[i] for i in chosen]

    worst = 0.0
    for name, idx in slots:
        arr = arrays[name]
        orig = arr[idx]
        arr[idx] = orig + step
        up = _project(fn, arrays, cot)
        arr[idx] = orig - step
        down = _project(fn, arrays, cot)
        arr[idx] = orig
        numeric = (up - down) / (2.0 * step)
        grad = tensors[name].grad
        analytic = 0.0 if grad is None else float(grad[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# instance builders


def _dims(rng, lo=1, hi=6, k=4):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(k))


def _signed_away_from_zero(rng, shape, margin=0.1):
    mag = rng.uniform(margin, 1.0, shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _build_conv(rng):
    n = int(rng.integers(1, 3))
    groups = int(rng.choice([1, 1, 2]))
    c_in = groups * int(rng.integers(1, 4))
    c_out = groups * int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.choice([0, 1])) if k == 3 else 0
    h = int(rng.integers(max(3, k), 7))
    w = int(rng.integers(max(3, k), 7))
    use_bias = bool(rng.choice([True, False]))
    arrays = {
        "x": rng.normal(size=(n, c_in, h, w)),
        "w": rng.normal(size=(c_out, c_in // groups, k, k)),
    }
    if use_bias:
        arrays["b"] = rng.normal(size=(1, c_out, 1, 1))

    def fn(t):
        return T.conv2d(t["x"], t["w"], t.get("b"), stride=stride, padding=padding, groups=groups)

    return arrays, fn


def _build_channel_avg_pool(rng):
    c_out = int(rng.integers(1, 4))
    g = int(rng.integers(1, 4))
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    arrays = {"x": rng.normal(size=(n, c_out * g, h, w))}
    return arrays, lambda t: T.channel_avg_pool(t["x"], c_out)


def _build_channel_max_pool(rng):
    c_out = int(rng.integers(1, 4))
    g = int(rng.integers(1, 4))
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x = rng.normal(size=(n, c_out * g, h, w))
    # guarantee a clear per-group winner so the step cannot flip the argmax
    xs = x.reshape(n, c_out, g, h, w)
    idx = xs.argmax(axis=2)
    top = np.take_along_axis(xs, idx[:, :, None], axis=2)
    np.put_along_axis(xs, idx[:, :, None], top + 0.01, axis=2)
    return {"x": xs.reshape(x.shape)}, lambda t: T.channel_max_pool(t["x"], c_out)


def _build_channel_mean(rng):
    arrays = {"x": rng.normal(size=_dims(rng, 1, 6))}
    return arrays, lambda t: T.channel_mean(t["x"])


def _build_bilinear_resize(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    oh, ow = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    arrays = {"x": rng.normal(size=(n, c, h, w))}
    return arrays, lambda t: T.bilinear_resize(t["x"], oh, ow)


def _build_relu(rng):
    return {"x": _signed_away_from_zero(rng, _dims(rng))}, lambda t: T.relu(t["x"])


def _build_tanh(rng):
    return {"x": rng.normal(size=_dims(rng))}, lambda t: T.tanh(t["x"])


def _build_sigmoid(rng):
    return {"x": rng.normal(size=_dims(rng))}, lambda t: T.sigmoid(t["x"])


def _build_add(rng):
    shape = _dims(rng)
    arrays = {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}
    return arrays, lambda t: T.add(t["a"], t["b"])


def _build_mul_broadcast(rng):
    n, c, h, w = _dims(rng)
    arrays = {"g": rng.normal(size=(n, 1, h, w)), "x": rng.normal(size=(n, c, h, w))}
    return arrays, lambda t: T.mul_broadcast(t["g"], t["x"])


def _build_scale(rng):
    k = float(rng.uniform(-2.0, 2.0))
    return {"x": rng.normal(size=_dims(rng))}, lambda t: T.scale(t["x"], k)


def _build_concat_channel(rng):
    n, _, h, w = _dims(rng)
    parts = int(rng.integers(2, 4))
    arrays = {f"x{i}": rng.normal(size=(n, int(rng.integers(1, 4)), h, w)) for i in range(parts)}
    names = sorted(arrays)
    return arrays, lambda t: T.concat_channel([t[k] for k in names])


def _build_softmax_channel(rng):
    n, _, h, w = _dims(rng)
    c = int(rng.integers(2, 5))
    return {"x": rng.normal(size=(n, c, h, w))}, lambda t: T.softmax_channel(t["x"])


def _build_sum_all(rng):
    return {"x": rng.normal(size=_dims(rng))}, lambda t: T.sum_all(t["x"])


def _mask(rng, n, h, w):
    return (rng.uniform(size=(n, 1, h, w)) > 0.5).astype(np.float64)


def _probs2(rng, n, h, w, lo=0.05, hi=0.95):
    a = rng.uniform(lo, hi, size=(n, 1, h, w))
    return np.concatenate([a, 1.0 - a], axis=1)


def _build_ce_loss(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    gt = _mask(rng, n, h, w)
    arrays = {"logits": rng.normal(size=(n, 2, h, w))}
    return arrays, lambda t: L.ce_loss(t["logits"], gt)


def _build_bce_loss(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    gt = _mask(rng, n, h, w)
    arrays = {"p": rng.uniform(0.05, 0.95, size=(n, 1, h, w))}
    return arrays, lambda t: L.bce_loss(t["p"], gt)


def _build_mae_loss(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    p_s = _probs2(rng, n, h, w, 0.2, 0.8)
    # keep the student strictly off the teacher so |d| has no kink in reach
    gap = rng.uniform(0.01, 0.1, size=p_s.shape) * rng.choice([-1.0, 1.0], size=p_s.shape)
    p_t = np.clip(p_s + gap, 0.05, 0.95)
    bad = np.abs(p_s - p_t) < 5e-3
    p_t[bad] = p_s[bad] + 5e-3
    return {"p_s": p_s}, lambda t: L.mae_loss(t["p_s"], p_t)


def _build_mse_loss(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    p_t = _probs2(rng, n, h, w)
    return {"p_s": _probs2(rng, n, h, w)}, lambda t: L.mse_loss(t["p_s"], p_t)


def _build_kl_loss(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    p_t = _probs2(rng, n, h, w, 0.1, 0.9)
    return {"p_s": _probs2(rng, n, h, w, 0.1, 0.9)}, lambda t: L.kl_loss(t["p_s"], p_t)


def _build_soft_miou_loss(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    gt = _mask(rng, n, h, w)
    return {"p_s": _probs2(rng, n, h, w)}, lambda t: L.soft_miou_loss(t["p_s"], gt)


def _build_fuse_multiscale(rng):
    widths = (2, 4, 4, 8)
    n, hw = 1, 8
    sizes = (hw, hw // 2, hw // 4, hw // 8)
    arrays = {
        f"s{i + 1}": rng.normal(size=(n, c, s, s)) for i, (c, s) in enumerate(zip(widths, sizes))
    }

    def fn(t):
        pyr = M.PyramidFeatures(t["s1"], t["s2"], t["s3"], t["s4"])
        fused, fused_mean, _ = M.emff_fuse(pyr, widths)
        return T.concat_channel([fused, fused_mean])

    return arrays, fn


def _build_student(rng):
    config = M.preset("nano", input_size=(32, 32))
    params = M.init_params(config, seed=int(rng.integers(0, 2**31)), dtype=REAL64)
    arrays = {name: p.data.copy() for name, p in params.items()}
    arrays["pre"] = rng.uniform(0.0, 1.0, size=(1, 3, 32, 32))
    arrays["post"] = rng.uniform(0.0, 1.0, size=(1, 3, 32, 32))

    def fn(t):
        net = M.ChangeDetector(config, params={n: t[n] for n in M.parameter_names(config)})
        return net.forward(t["pre"], t["post"]).logits

    return arrays, fn


# name -> (builder, sample_elements or None for exhaustive)
REGISTRY: dict[str, tuple[Callable, int | None]] = {
    "conv2d": (_build_conv, None),
    "channel_avg_pool": (_build_channel_avg_pool, None),
    "channel_max_pool": (_build_channel_max_pool, None),
    "channel_mean": (_build_channel_mean, None),
    "bilinear_resize": (_build_bilinear_resize, None),
    "relu": (_build_relu, None),
    "tanh": (_build_tanh, None),
    "sigmoid": (_build_sigmoid, None),
    "add": (_build_add, None),
    "mul_broadcast": (_build_mul_broadcast, None),
    "scale": (_build_scale, None),
    "concat_channel": (_build_concat_channel, None),
    "softmax_channel": (_build_softmax_channel, None),
    "sum_all": (_build_sum_all, None),
    "ce_loss": (_build_ce_loss, None),
    "bce_loss": (_build_bce_loss, None),
    "mae_loss": (_build_mae_loss, None),
    "mse_loss": (_build_mse_loss, None),
    "kl_loss": (_build_kl_loss, None),
    "soft_miou_loss": (_build_soft_miou_loss, None),
    "fuse_multiscale": (_build_fuse_multiscale, 60),
    "student_forward": (_build_student, 24),
}


def check_op(
    name: str,
    instances: int = DEFAULT_INSTANCES,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    threshold: float = DEFAULT_THRESHOLD,
) -> OpReport:
    if name not in REGISTRY:
        raise ConfigError(f"unknown gradcheck op {name!r}, expected one of {sorted(REGISTRY)}")
    builder, sample = REGISTRY[name]
    start = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode()), i])
        arrays, fn = builder(rng)
        arrays = {k: np.asarray(v, dtype=REAL64) for k, v in arrays.items()}
        worst = max(worst, check_instance(arrays, fn, rng, step=step, sample_elements=sample))
    return OpReport(
        op=name,
        instances=instances,
        max_rel_err=worst,
        passed=worst < threshold,
        seconds=time.perf_counter() - start,
    )


def check_all(
    names: list[str] | None = None,
    instances: int = DEFAULT_INSTANCES,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[OpReport]:
    return [check_op(n, instances=instances, seed=seed, threshold=threshold) for n in (names or list(REGISTRY))]
