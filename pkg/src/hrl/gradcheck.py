"""Central finite-difference checks for every differentiable operation.

Each registry entry builds a small float64 problem: a closure returning a
scalar loss plus the tensors to differentiate. The analytic gradient from
:meth:`Tensor.backward` is compared with ``(f(x+h) - f(x-h)) / 2h``.

The error for one tensor is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
taken over its checked entries, i.e. relative to the gradient's own scale
(floored at ``SCALE_FLOOR``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .backbone import BasicBlock
from .fusion import ClassificationHead, Encoder, PatchEmbedding, embed_handcrafted
from .tensor import Tensor, broadcast_to, concat, exp, log, reciprocal

STEP = 1e-3
TOLERANCE = 1e-4
MAX_ENTRIES = 24
# gradients that vanish identically (e.g. attention key bias) are compared absolutely
SCALE_FLOOR = 1e-6

Problem = tuple[Callable[[], Tensor], list[Tensor]]


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < TOLERANCE


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, tuple[int, ...]]:
    with F.record_branches() as branches:
        value = float(loss_fn().data)
    return value, tuple(branches)


def numeric_gradient(loss_fn: Callable[[], Tensor], t: Tensor, indices, h: float = STEP) -> np.ndarray:
    """Central differences at ``indices`` of ``t``.

    Entries whose stencil crosses a ReLU or max-pool branch change are NaN:
    the loss is not differentiable across the stencil there.
    """
    _, base = _evaluate(loss_fn)
    out = np.empty(len(indices))
    flat = t.data.reshape(-1)
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp, bp = _evaluate(loss_fn)
        flat[i] = orig - h
        fm, bm = _evaluate(loss_fn)
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h) if bp == base == bm else np.nan
    return out


def check_problem(problem: Problem, rng: np.random.Generator, max_entries: int = MAX_ENTRIES) -> float:
    loss_fn, tensors = problem
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        n = t.size
        idx = np.arange(n) if n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
        numeric = numeric_gradient(loss_fn, t, idx)
        smooth = ~np.isnan(numeric)
        if not smooth.any():
            continue
        a, numeric = analytic[idx][smooth], numeric[smooth]
        scale = max(np.abs(a).max(), np.abs(numeric).max(), SCALE_FLOOR)
        worst = max(worst, float(np.abs(a - numeric).max() / scale))
    return worst


# ----------------------------------------------------------------------
# problems


def _param(rng, *shape, scale=1.0, low=None):
    data = rng.normal(0.0, scale, size=shape)
    if low is not None:
        # keep entries away from kinks
        data = np.sign(data) * (np.abs(data) + low)
    return Tensor(data, requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a scalar via a fixed random projection."""
    cache: dict[str, np.ndarray] = {}

    def loss():
        out = out_fn()
        if "w" not in cache:
            cache["w"] = rng.normal(size=out.shape)
        return (out * Tensor(cache["w"])).sum()

    return loss


def _p_add(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4)
    return _projected(lambda: a + b, rng), [a, b]


def _p_mul(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 1)
    return _projected(lambda: a * b, rng), [a, b]


def _p_matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    return _projected(lambda: a @ b, rng), [a, b]


def _p_reductions(rng):
    a = _param(rng, 3, 4, 2)
    return _projected(lambda: concat([a.sum(axis=1).reshape(-1), a.mean(axis=(0, 2)), a.mean().reshape(1)]), rng), [a]


def _p_reshape_transpose(rng):
    a = _param(rng, 2, 3, 4)
    return _projected(lambda: a.reshape(6, 4).transpose(1, 0), rng), [a]


def _p_broadcast_concat(rng):
    a, b = _param(rng, 1, 3), _param(rng, 2, 3)
    return _projected(lambda: concat([broadcast_to(a, (2, 3)), b], axis=0), rng), [a, b]


def _p_getitem(rng):
    a = _param(rng, 4, 3)
    return _projected(lambda: a[1:3], rng), [a]


def _p_exp_log_reciprocal(rng):
    a = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    return _projected(lambda: exp(a) + log(a) + reciprocal(a), rng), [a]


def _p_conv3d(rng):
    x, w, b = _param(rng, 2, 2, 4, 4, 4), _param(rng, 3, 2, 3, 3, 3, scale=0.3), _param(rng, 3)
    return _projected(lambda: F.conv3d(x, w, b, stride=1, padding=1), rng), [x, w, b]


def _p_conv3d_strided(rng):
    x, w = _param(rng, 1, 1, 7, 6, 7), _param(rng, 2, 1, 3, 3, 3, scale=0.3)
    return _projected(lambda: F.conv3d(x, w, None, stride=2, padding=1), rng), [x, w]


def _p_maxpool(rng):
    # distinct, well-separated values so no window has a near-tie
    vals = rng.permutation(2 * 2 * 5 * 5 * 5).astype(float) * 0.05
    x = Tensor(vals.reshape(2, 2, 5, 5, 5), requires_grad=True)
    return _projected(lambda: F.pool3d(x, "max", 3, 2, 1), rng), [x]


def _p_avgpool(rng):
    x = _param(rng, 1, 2, 4, 4, 4)
    return _projected(lambda: F.pool3d(x, "average", 2, 2), rng), [x]


def _p_batchnorm_train(rng):
    x, g, b = _param(rng, 3, 2, 2, 2, 2), _param(rng, 2), _param(rng, 2)
    return _projected(lambda: F.batchnorm(x, g, b, None, training=True), rng), [x, g, b]


def _p_batchnorm_eval(rng):
    x, g, b = _param(rng, 2, 3, 2, 2, 2), _param(rng, 3), _param(rng, 3)
    stats = F.RunningStats(3, dtype=np.float64)
    stats.mean[:] = rng.normal(size=3)
    stats.var[:] = rng.uniform(0.5, 2.0, size=3)
    return _projected(lambda: F.batchnorm(x, g, b, stats, training=False), rng), [x, g, b]


def _p_layernorm(rng):
    x, g, b = _param(rng, 2, 3, 6), _param(rng, 6), _param(rng, 6)
    return _projected(lambda: F.layernorm(x, g, b), rng), [x, g, b]


def _p_linear(rng):
    x, w, b = _param(rng, 2, 3, 5), _param(rng, 4, 5), _param(rng, 4)
    return _projected(lambda: F.linear(x, w, b), rng), [x, w, b]


def _p_relu(rng):
    x = _param(rng, 4, 5, low=0.05)
    return _projected(lambda: F.relu(x), rng), [x]


def _p_gelu(rng):
    x = _param(rng, 4, 5, scale=2.0)
    return _projected(lambda: F.gelu(x), rng), [x]


def _p_tanh(rng):
    x = _param(rng, 4, 5)
    return _projected(lambda: F.tanh(x), rng), [x]


def _p_softmax(rng):
    x = _param(rng, 3, 5)
    return _projected(lambda: F.softmax(x), rng), [x]


def _p_cross_entropy(rng):
    x = _param(rng, 4, 3, scale=2.0)
    labels = rng.integers(0, 3, size=4)
    return (lambda: F.cross_entropy(x, labels)), [x]


def _p_attention(rng):
    q, k, v = _param(rng, 2, 2, 4, 3), _param(rng, 2, 2, 4, 3), _param(rng, 2, 2, 4, 3)
    return _projected(lambda: F.scaled_dot_attention(q, k, v)[0], rng), [q, k, v]


def _p_basic_block(rng):
    block = BasicBlock(2, 4, 2, rng, dtype=np.float64)
    x = _param(rng, 3, 2, 4, 4, 4)
    loss = _projected(lambda: block(x), rng)
    return loss, [x] + block.parameters()


def _p_fusion(rng):
    # N=4 channels of 1x1x1 maps, D=8, 2 heads, 12 handcrafted values -> T = 1 + 4 + 2 = 7
    embed = PatchEmbedding(4, 1, 8, rng, dtype=np.float64)
    encoder = Encoder(8, 2, 16, 1, rng, dtype=np.float64)
    head = ClassificationHead(8, 3, rng, dtype=np.float64)
    params = embed.parameters() + encoder.parameters() + head.parameters()
    # O(1) class/position vectors keep every token's layer-norm well conditioned
    embed.cls_token.data = rng.normal(size=embed.cls_token.shape)
    embed.pos_embed.data = rng.normal(size=embed.pos_embed.shape)
    for p in params:
        p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
    maps = _param(rng, 2, 4, 1, 1, 1)
    hand = Tensor(embed_handcrafted(rng.normal(size=(2, 12)), 8))
    labels = np.array([0, 2])

    def loss():
        z = concat([embed(maps), hand], axis=1)
        return F.cross_entropy(head(encoder(z)), labels)

    return loss, [maps] + params


REGISTRY: dict[str, Callable[[np.random.Generator], Problem]] = {
    "add": _p_add,
    "mul": _p_mul,
    "matmul": _p_matmul,
    "sum/mean": _p_reductions,
    "reshape/transpose": _p_reshape_transpose,
    "broadcast/concat": _p_broadcast_concat,
    "getitem": _p_getitem,
    "exp/log/reciprocal": _p_exp_log_reciprocal,
    "conv3d": _p_conv3d,
    "conv3d_strided": _p_conv3d_strided,
    "pool3d_max": _p_maxpool,
    "pool3d_average": _p_avgpool,
    "batchnorm_train": _p_batchnorm_train,
    "batchnorm_eval": _p_batchnorm_eval,
    "layernorm": _p_layernorm,
    "linear": _p_linear,
    "relu": _p_relu,
    "gelu": _p_gelu,
    "tanh": _p_tanh,
    "softmax": _p_softmax,
    "cross_entropy": _p_cross_entropy,
    "attention": _p_attention,
    "basic_block": _p_basic_block,
    "embed_encoder_classify": _p_fusion,
}


def run_gradcheck(registry: dict[str, Callable] | None = None, seed: int = 0) -> list[CheckResult]:
    registry = REGISTRY if registry is None else registry
    results = []
    for name, build in registry.items():
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        err = check_problem(build(rng), rng)
        results.append(CheckResult(name, err, time.perf_counter() - start))
    return results
