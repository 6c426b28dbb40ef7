"""Training objective: three squared-error terms and a total-variation penalty."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


@dataclass
class LossWeights:
    fuse: float = 10.0
    cur: float = 10.0
    opt: float = 1.0
    tv: float = 20.0

    def __post_init__(self):
        if min(self.fuse, self.cur, self.opt, self.tv) < 0:
            raise ContractError(f"loss weights must be non-negative: {self}")


@dataclass
class LossReport:
    l_fuse: float
    l_cur: float
    l_opt: float
    l_tv: float
    total: float

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)}, sort_keys=True)


def mse(est, target) -> Tensor:
    """Sum of squared differences over the last two axes divided by 2hw, averaged over any batch."""
    est, target = ad.as_tensor(est), ad.as_tensor(target)
    if est.shape != target.shape:
        raise ContractError(f"mse: shapes {est.shape} and {target.shape} differ")
    h, w = est.shape[-2:]
    diff = ad.sub(est, target)
    batch = int(np.prod(est.shape[:-2])) if est.ndim > 2 else 1
    return ad.scale(ad.tsum(ad.mul(diff, diff)), 1.0 / (2.0 * h * w * batch))


def tv(d) -> Tensor:
    """Squared differences with the upper and left neighbours, divided by hw.

    The first row has no upper neighbour and the first column no left one;
    those terms are skipped.
    """
    d = ad.as_tensor(d)
    h, w = d.shape[-2:]
    batch = int(np.prod(d.shape[:-2])) if d.ndim > 2 else 1
    terms = []
    if h >= 2:
        dv = ad.sub(d[..., 1:, :], d[..., :-1, :])
        terms.append(ad.tsum(ad.mul(dv, dv)))
    if w >= 2:
        dh = ad.sub(d[..., :, 1:], d[..., :, :-1])
        terms.append(ad.tsum(ad.mul(dh, dh)))
    if not terms:
        return ad.scale(ad.tsum(d), 0.0)
    acc = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.scale(acc, 1.0 / (h * w * batch))


def total(l_fuse, l_cur, l_opt, l_tv, weights: LossWeights = LossWeights()):
    """Weighted sum. Returns a Tensor when any term is a Tensor, else a float."""
    parts = [(weights.fuse, l_fuse), (weights.cur, l_cur), (weights.opt, l_opt), (weights.tv, l_tv)]
    if any(isinstance(x, Tensor) for _, x in parts):
        acc = None
        for lam, x in parts:
            term = ad.scale(ad.as_tensor(x), lam)
            acc = term if acc is None else ad.add(acc, term)
        return acc
    return sum(lam * float(x) for lam, x in parts)


def report(l_fuse, l_cur, l_opt, l_tv, weights: LossWeights = LossWeights()) -> LossReport:
    vals = [float(ad.as_tensor(x).data) for x in (l_fuse, l_cur, l_opt, l_tv)]
    return LossReport(*vals, total=total(*vals, weights))


def assemble_step_losses(d_fuse, d_cur, img_prev_warp, img_cur, d_target):
    """(l_fuse, l_cur, l_opt, l_tv). The image term carries no gradient."""
    l_fuse = mse(d_fuse, d_target)
    l_cur = mse(d_cur, d_target)
    warp_img = ad.as_tensor(img_prev_warp).detach()
    l_opt = mse(warp_img, ad.as_tensor(img_cur).detach())
    l_tv = tv(d_fuse)
    return l_fuse, l_cur, l_opt, l_tv
