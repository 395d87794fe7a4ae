"""Finite-difference release gate: every differentiable primitive, checked over many seeds."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ops
from .autograd.tensor import Tensor
from .models import ModelOutput
from .training import boundary_mse, composite_loss, weighted_cross_entropy

# A builder takes an rng and returns (f, inputs) suitable for grad_check.
Builder = Callable[[np.random.Generator], tuple]


@dataclass(frozen=True)
class GradCase:
    name: str
    threshold: float
    build: Builder


@dataclass
class GradResult:
    name: str
    max_err: float
    threshold: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_err) and self.max_err < self.threshold)


def _proj(rng, shape):
    """Random fixed projection so the scalar loss exercises every output coordinate."""
    return Tensor(rng.standard_normal(shape))


def _project(y: Tensor, r: Tensor) -> Tensor:
    return ops.sum(ops.mul(y, r))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _affine(rng):
    r = _proj(rng, (3, 2))
    return (lambda x, w, b: _project(ag.affine(x, w, b), r)), [
        rng.standard_normal((3, 4)),
        rng.standard_normal((4, 2)),
        rng.standard_normal(2),
    ]


def _conv1d(rng):
    r = _proj(rng, (4, 8))
    return (lambda x, w, b: _project(ag.conv1d(x, w, b, padding=2), r)), [
        rng.standard_normal((3, 8)),
        rng.standard_normal((4, 3, 5)),
        rng.standard_normal(4),
    ]


def _conv1d_depthwise(rng):
    r = _proj(rng, (2, 3, 7))
    return (lambda x, w, b: _project(ag.conv1d(x, w, b, groups=3, padding=1), r)), [
        rng.standard_normal((2, 3, 7)),
        rng.standard_normal((3, 1, 3)),
        rng.standard_normal(3),
    ]


def _conv2d(rng):
    r = _proj(rng, (3, 5, 4))
    return (lambda x, w, b: _project(ag.conv2d(x, w, b, padding=1), r)), [
        rng.standard_normal((2, 5, 4)),
        rng.standard_normal((3, 2, 3, 3)),
        rng.standard_normal(3),
    ]


def _batch_norm(rng):
    r = _proj(rng, (4, 3, 6))

    def f(x, g, b):
        state = ag.BatchNormState.create(3, np.float64)
        return _project(ag.batch_norm(x, g, b, state, training=True), r)

    return f, [rng.standard_normal((4, 3, 6)), 1.0 + 0.3 * rng.standard_normal(3), rng.standard_normal(3)]


def _elementwise(fn):
    def build(rng):
        r = _proj(rng, (4, 5))
        return (lambda x: _project(fn(x), r)), [rng.standard_normal((4, 5))]

    return build


def _relu(rng):
    r = _proj(rng, (4, 5))
    return (lambda x: _project(ag.relu(x), r)), [_away_from_zero(rng, (4, 5))]


def _dropout(rng):
    r = _proj(rng, (4, 5))
    seed = int(rng.integers(2**31))
    # fresh generator per call so every evaluation sees the same mask
    return (lambda x: _project(ag.dropout(x, 0.3, np.random.default_rng(seed), True), r)), [
        rng.standard_normal((4, 5))
    ]


def _max_pool1d(rng):
    r = _proj(rng, (2, 3, 3))
    return (lambda x: _project(ag.max_pool1d(x, 2), r)), [rng.standard_normal((2, 3, 7))]


def _max_pool2d(rng):
    r = _proj(rng, (2, 2, 2))
    return (lambda x: _project(ag.max_pool2d(x, 2), r)), [rng.standard_normal((2, 5, 4))]


def _avg_pool(rng):
    r = _proj(rng, (2, 3))
    return (lambda x: _project(ag.adaptive_avg_pool_to_1(x, 2), r)), [rng.standard_normal((2, 3, 4, 5))]


def _softmax(rng):
    r = _proj(rng, (3, 6))
    return (lambda x: _project(ag.softmax(x, axis=-1), r)), [rng.standard_normal((3, 6))]


def _attention(rng):
    r = _proj(rng, (4, 8))
    return (lambda q, k, v: _project(ag.scaled_dot_attention(q, k, v), r)), [
        rng.standard_normal((4, 16)),
        rng.standard_normal((5, 16)),
        rng.standard_normal((5, 8)),
    ]


def _mha(rng):
    d, heads = 8, 2
    r = _proj(rng, (3, d))
    shapes = [(d, d) if k.startswith("w") else (d,) for k in ops.MHA_KEYS]

    def f(q, kv, *weights):
        return _project(ag.multi_head_attention(q, kv, kv, dict(zip(ops.MHA_KEYS, weights)), heads), r)

    inputs = [rng.standard_normal((3, d)), rng.standard_normal((4, d))]
    return f, inputs + [0.5 * rng.standard_normal(s) for s in shapes]


def _lstm(rng):
    T, I, H = 4, 3, 2
    r = _proj(rng, (T, 2 * H))
    names = [(layer, d, k) for layer in range(2) for d in ("fw", "bw") for k in ops.LSTM_KEYS]

    def shape(layer, key):
        width = I if layer == 0 else 2 * H
        return {"w_ih": (width, 4 * H), "w_hh": (H, 4 * H)}.get(key, (4 * H,))

    def f(x, *weights):
        params = [{"fw": {}, "bw": {}} for _ in range(2)]
        for (layer, d, k), w in zip(names, weights):
            params[layer][d][k] = w
        return _project(ag.lstm_bidirectional(x, params), r)

    return f, [rng.standard_normal((T, I))] + [0.5 * rng.standard_normal(shape(lay, k)) for lay, _, k in names]


def _tensor_ops(rng):
    """Broadcast add/mul, matmul, indexing, concat, reshape, transpose and reductions."""
    idx = rng.integers(0, 4, size=5)

    def f(a, b, c):
        h = ops.matmul(ops.add(a, c), b)  # [4,3]
        h = ops.concat([h, ops.mul(h, h)], axis=1)  # [4,6]
        h = ops.index(ops.transpose(ops.reshape(h, (2, 12))), idx)  # [5,2]
        return ops.add(ops.mean(h), ops.sum(ops.mul(h, ops.neg(h))))

    return f, [rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(5)]


def _weighted_ce(rng):
    labels = rng.integers(0, 3, size=6)
    return (lambda z: weighted_cross_entropy(z, labels, (1.622, 0.811, 0.568))), [rng.standard_normal((6, 3))]


def _boundary_mse(rng):
    truth = rng.uniform(size=(6, 2))
    mask = rng.uniform(size=6) < 0.5
    mask[0] = True
    return (lambda p: boundary_mse(ag.sigmoid(p), truth, mask)), [rng.standard_normal((6, 2))]


def _composite(rng):
    labels = rng.integers(0, 3, size=8)
    labels[:3] = (0, 1, 2)
    truth = np.where((labels == 2)[:, None], rng.uniform(size=(8, 2)), np.nan)

    def f(main, aux, raw):
        total, _ = composite_loss(ModelOutput(main, aux, ag.sigmoid(raw)), labels, truth)
        return total

    return f, [rng.standard_normal((8, 3)), rng.standard_normal((8, 3)), rng.standard_normal((8, 2))]


def default_cases() -> list[GradCase]:
    smooth = 1e-6
    return [
        GradCase("affine", smooth, _affine),
        GradCase("conv1d", smooth, _conv1d),
        GradCase("conv1d_depthwise", smooth, _conv1d_depthwise),
        GradCase("conv2d", smooth, _conv2d),
        GradCase("batch_norm", 1e-5, _batch_norm),
        GradCase("relu", 1e-7, _relu),
        GradCase("sigmoid", 1e-7, _elementwise(ag.sigmoid)),
        GradCase("tanh", 1e-7, _elementwise(ag.tanh)),
        GradCase("dropout", 1e-7, _dropout),
        GradCase("max_pool1d", smooth, _max_pool1d),
        GradCase("max_pool2d", smooth, _max_pool2d),
        GradCase("adaptive_avg_pool", smooth, _avg_pool),
        GradCase("softmax", smooth, _softmax),
        GradCase("scaled_dot_attention", 1e-5, _attention),
        GradCase("multi_head_attention", 1e-4, _mha),
        GradCase("lstm_bidirectional", 1e-4, _lstm),
        GradCase("tensor_ops", smooth, _tensor_ops),
        GradCase("weighted_cross_entropy", smooth, _weighted_ce),
        GradCase("boundary_mse", smooth, _boundary_mse),
        GradCase("composite_loss", smooth, _composite),
    ]


def run_case(case: GradCase, seeds=range(10)) -> GradResult:
    t0 = time.perf_counter()
    worst = 0.0
    seeds = list(seeds)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        f, inputs = case.build(rng)
        try:
            err = ag.grad_check(f, inputs)
        except FloatingPointError:
            err = float("inf")
        worst = max(worst, err) if np.isfinite(err) else float("inf")
    return GradResult(case.name, worst, case.threshold, len(seeds), time.perf_counter() - t0)


def run_suite(cases=None, seeds=range(10)) -> list[GradResult]:
    return [run_case(c, seeds) for c in (default_cases() if cases is None else cases)]


def format_table(results) -> str:
    lines = [f"{'op':<24} {'max rel err':>12} {'threshold':>10} {'seeds':>5}  result"]
    for r in results:
        lines.append(
            f"{r.name:<24} {r.max_err:>12.3e} {r.threshold:>10.0e} {r.seeds:>5}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
