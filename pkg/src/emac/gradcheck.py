"""Finite-difference verification of every gradient rule.

Each check draws its own random instances, computes analytic gradients through
the tape and compares them with central differences. The error measure is
norm-wise: ``|a - n| / max(|a|, |n|, REL_FLOOR)`` over the compared entries.
Large parameter tensors are probed at a few random coordinates plus one random
direction over all of them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .demo import DemoModel, ModelConfig, SamConfig
from .flow import warp_bilinear
from .sam import make_rng
from .tcf import TcfHead, fuse

STEP = 1e-5
TOLERANCE = 1e-4
REL_FLOOR = 1e-7
N_INSTANCES = 20
COORDS_PER_PARAM = 3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < TOLERANCE)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<18} max_rel_err={self.max_rel_err:.3e}  n={self.instances}"


def rel_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), REL_FLOOR)
    return float(np.linalg.norm(a - n) / denom)


def _probe_sets(arrays: Sequence[np.ndarray], rng, k: int | None) -> list[np.ndarray]:
    out = []
    for a in arrays:
        if k is None or a.size <= k:
            out.append(np.arange(a.size))
        else:
            out.append(rng.choice(a.size, size=k, replace=False))
    return out


def compare(loss_fn: Callable[[], ad.Tensor], leaves: Sequence[ad.Tensor], rng, k: int | None = None) -> float:
    """Max of the coordinate-probe error and the random-direction error."""
    with ad.use_tape():
        loss = loss_fn()
        ad.backward(loss, leaves)
    grads = [np.array(t.grad) for t in leaves]

    def value() -> float:
        with ad.no_grad():
            return float(loss_fn().data)

    probes = _probe_sets([t.data for t in leaves], rng, k)
    analytic, numeric = [], []
    for t, g, idx in zip(leaves, grads, probes):
        flat = t.data.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + STEP
            fp = value()
            flat[i] = orig - STEP
            fm = value()
            flat[i] = orig
            analytic.append(g.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * STEP))
    err = rel_error(analytic, numeric)
    if k is not None:
        dirs = [rng.standard_normal(t.shape) for t in leaves]
        dirs_norm = np.sqrt(sum(float((d ** 2).sum()) for d in dirs))
        dirs = [d / dirs_norm for d in dirs]
        base = [t.data.copy() for t in leaves]
        for t, b, d in zip(leaves, base, dirs):
            t.data = b + STEP * d
        fp = value()
        for t, b, d in zip(leaves, base, dirs):
            t.data = b - STEP * d
        fm = value()
        for t, b in zip(leaves, base):
            t.data = b
        directional = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        err = max(err, rel_error([directional], [(fp - fm) / (2 * STEP)]))
    return err


def _leaf(rng, *shape, scale=1.0) -> ad.Tensor:
    return ad.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    """Scalar ``sum(out * w)``; a random cotangent exercises every output entry."""
    return ad.tsum(ad.mul(out, w))


# ---------------------------------------------------------------- operator cases

def _case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    w = rng.standard_normal((3, 4))
    return lambda: _weighted(ad.add(a, b), w), [a, b]


def _case_sub(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)
    w = rng.standard_normal((2, 3, 4))
    return lambda: _weighted(ad.sub(a, b), w), [a, b]


def _case_mul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4)
    w = rng.standard_normal((3, 4))
    return lambda: _weighted(ad.mul(a, b), w), [a, b]


def _case_scale(rng):
    a = _leaf(rng, 5)
    c = float(rng.normal())
    w = rng.standard_normal(5)
    return lambda: _weighted(ad.scale(a, c), w), [a]


def _case_add_scalar(rng):
    a = _leaf(rng, 2, 3)
    c = float(rng.normal())
    w = rng.standard_normal((2, 3))
    return lambda: _weighted(ad.AddScalar.apply(a, c=c), w), [a]


def _case_gelu(rng):
    a = _leaf(rng, 3, 5, scale=2.0)
    w = rng.standard_normal((3, 5))
    return lambda: _weighted(ad.gelu(a), w), [a]


def _case_matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    return lambda: _weighted(ad.matmul(a, b), w), [a, b]


def _case_transpose(rng):
    a = _leaf(rng, 2, 3, 4)
    w = rng.standard_normal((4, 2, 3))
    return lambda: _weighted(ad.transpose(a, (2, 0, 1)), w), [a]


def _case_reshape(rng):
    a = _leaf(rng, 2, 6)
    w = rng.standard_normal((3, 4))
    return lambda: _weighted(ad.reshape(a, (3, 4)), w), [a]


def _case_concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    w = rng.standard_normal((2, 5))
    return lambda: _weighted(ad.concat([a, b], axis=1), w), [a, b]


def _case_split(rng):
    a = _leaf(rng, 5, 2)
    w1, w2 = rng.standard_normal((2, 2)), rng.standard_normal((3, 2))

    def f():
        x, y = ad.split(a, [2, 3], axis=0)
        return ad.add(_weighted(x, w1), _weighted(ad.gelu(y), w2))

    return f, [a]


def _case_index(rng):
    a = _leaf(rng, 4, 5)
    w = rng.standard_normal((2, 3))
    return lambda: _weighted(a[1:3, ::2], w), [a]


def _case_gather(rng):
    a = _leaf(rng, 2, 6, 3)
    idx = np.stack([rng.choice(6, 4, replace=True) for _ in range(2)])
    w = rng.standard_normal((2, 4, 3))
    return lambda: _weighted(ad.gather(a, idx), w), [a]


def _case_scatter(rng):
    base, vals = _leaf(rng, 6, 3), _leaf(rng, 2, 3)
    idx = rng.choice(6, 2, replace=False)
    w = rng.standard_normal((6, 3))
    return lambda: _weighted(ad.scatter(base, idx, vals), w), [base, vals]


def _case_sum(rng):
    a = _leaf(rng, 3, 4)
    w = rng.standard_normal((3, 1))
    return lambda: _weighted(ad.tsum(a, axis=1, keepdims=True), w), [a]


def _case_mean(rng):
    a = _leaf(rng, 3, 4)
    w = rng.standard_normal(4)
    return lambda: _weighted(ad.mean(a, axis=0), w), [a]


def _case_softmax(rng):
    a = _leaf(rng, 3, 5, scale=2.0)
    w = rng.standard_normal((3, 5))
    return lambda: _weighted(ad.softmax_lastdim(a), w), [a]


def _case_layer_norm(rng):
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    w = rng.standard_normal((3, 6))
    return lambda: _weighted(ad.layer_norm(x, g, b), w), [x, g, b]


def _case_softmax_matmul_mse(rng):
    x, wt = _leaf(rng, 4, 3), _leaf(rng, 3, 5)
    target = rng.random((4, 5))

    def f():
        diff = ad.sub(ad.softmax_lastdim(ad.matmul(x, wt)), target)
        return ad.mean(ad.mul(diff, diff))

    return f, [x, wt]


def _case_warp(rng):
    field = _leaf(rng, 2, 6, 7)
    flow = _offgrid_flow(rng, (2, 6, 7, 2))
    w = rng.standard_normal((2, 6, 7))
    return lambda: _weighted(warp_bilinear(field, flow), w), [field]


def _case_mse(rng):
    e = _leaf(rng, 2, 4, 4)
    g = rng.standard_normal((2, 4, 4))
    return lambda: losses.mse(e, g), [e]


def _case_tv(rng):
    d = _leaf(rng, 2, 5, 6)
    return lambda: losses.tv(d), [d]


def _case_total(rng):
    parts = [_leaf(rng) for _ in range(4)]
    weights = losses.LossWeights(*rng.uniform(0.5, 20, 4))
    return lambda: losses.total(*parts, weights), parts


def _randomize_heads(module, rng) -> None:
    """Give zero-initialised output layers nonzero weights so gradients reach upstream."""
    for name, t in module.named_parameters().items():
        if not np.any(t.data):
            t.data = 0.1 * rng.standard_normal(t.shape)


def _case_tcf_residual(rng):
    head = TcfHead(patch=4, dim=8, rng=rng)
    _randomize_heads(head, rng)
    a, b = _leaf(rng, 8, 8), _leaf(rng, 8, 8)
    w = rng.standard_normal((8, 8))
    return lambda: _weighted(head.residual(a, b), w), [a, b] + head.parameters()


def _case_tcf_chain(rng):
    head = TcfHead(patch=4, dim=8, rng=rng)
    _randomize_heads(head, rng)
    cur, prev = _leaf(rng, 2, 8, 8), _leaf(rng, 2, 8, 8)
    flow = _offgrid_flow(rng, (2, 8, 8, 2))
    target = rng.standard_normal((2, 8, 8))
    return lambda: losses.mse(fuse(cur, prev, flow, head), target), [cur, prev] + head.parameters()


def _offgrid_flow(rng, shape) -> np.ndarray:
    """Flow whose fractional parts stay away from 0 so the warp is smooth at the probe."""
    whole = rng.integers(-2, 3, shape).astype(np.float64)
    return whole + rng.uniform(0.1, 0.9, shape)


def _desk_model(rng) -> DemoModel:
    cfg = ModelConfig(patch=8, dim=8, depth=1, heads=2, dec_depth=2, mlp_ratio=2.0)
    model = DemoModel(cfg, rng)
    _randomize_heads(model, rng)
    return model


def _desk_inputs(rng, b: int):
    images = rng.random((b, 16, 16))
    raw = np.zeros((b, 16, 16))
    for i in range(b):
        ys, xs = rng.integers(0, 16, (2, int(rng.integers(1, 6))))
        np.add.at(raw[i], (ys, xs), 1.0)
    return images, raw


def _case_demo(rng):
    model = _desk_model(rng)
    images, raw = _desk_inputs(rng, 2)
    std = (raw - raw.mean()) / (raw.std() + 1e-3)
    sam_cfg = SamConfig(mask_ratio=0.5)
    plans = model.plan(raw, sam_cfg, [make_rng(int(rng.integers(2**31)), i) for i in range(2)])
    target = rng.standard_normal((2, 16, 16))

    def f():
        pred, _ = model.forward_train(images, std, sam_cfg, None, plans=plans)
        return losses.mse(pred, target)

    return f, model.parameters()


def _case_emac(rng):
    """embed, SAM-selected encode, decode, warp, fusion and the weighted total."""
    model = _desk_model(rng)
    head = TcfHead(patch=8, dim=8, rng=rng)
    _randomize_heads(head, rng)
    images, raw = _desk_inputs(rng, 2)
    std = (raw - raw.mean()) / (raw.std() + 1e-3)
    sam_cfg = SamConfig()
    plans = model.plan(raw, sam_cfg, [make_rng(int(rng.integers(2**31)), i) for i in range(2)])
    flow = _offgrid_flow(rng, (1, 16, 16, 2))
    img_warp = warp_bilinear(images[1:], flow).data

    def f():
        pred, _ = model.forward_train(images, std, sam_cfg, None, plans=plans)
        d_cur, d_prev = pred[0:1], pred[1:2]
        d_fuse = fuse(d_cur, d_prev, flow, head)
        parts = losses.assemble_step_losses(d_fuse, d_cur, img_warp, images[:1], std[:1])
        return losses.total(*parts)

    return f, model.parameters() + head.parameters()


# name -> (builder, coordinate probes per leaf or None for exhaustive)
CHECKS: dict[str, tuple[Callable, int | None]] = {
    "add": (_case_add, None),
    "sub": (_case_sub, None),
    "mul": (_case_mul, None),
    "scale": (_case_scale, None),
    "add_scalar": (_case_add_scalar, None),
    "gelu": (_case_gelu, None),
    "matmul": (_case_matmul, None),
    "transpose": (_case_transpose, None),
    "reshape": (_case_reshape, None),
    "concat": (_case_concat, None),
    "split": (_case_split, None),
    "index": (_case_index, None),
    "gather": (_case_gather, None),
    "scatter": (_case_scatter, None),
    "sum": (_case_sum, None),
    "mean": (_case_mean, None),
    "softmax": (_case_softmax, None),
    "layer_norm": (_case_layer_norm, None),
    "softmax_mse": (_case_softmax_matmul_mse, None),
    "warp": (_case_warp, None),
    "loss_mse": (_case_mse, None),
    "loss_tv": (_case_tv, None),
    "loss_total": (_case_total, None),
    "tcf_residual": (_case_tcf_residual, COORDS_PER_PARAM),
    "tcf_chain": (_case_tcf_chain, COORDS_PER_PARAM),
    "demo": (_case_demo, COORDS_PER_PARAM),
    "emac": (_case_emac, COORDS_PER_PARAM),
}


def run_check(name: str, instances: int = N_INSTANCES, seed: int = 0) -> CheckResult:
    build, k = CHECKS[name]
    worst = 0.0
    for i in range(instances):
        rng = make_rng(seed, sorted(CHECKS).index(name), i)
        loss_fn, leaves = build(rng)
        err = compare(loss_fn, leaves, rng, k)
        worst = max(worst, err) if np.isfinite(err) else np.inf
    return CheckResult(name, worst, instances)


def run_suite(names: Sequence[str] | None = None, instances: int = N_INSTANCES, seed: int = 0) -> list[CheckResult]:
    return [run_check(n, instances, seed) for n in (names or list(CHECKS))]
