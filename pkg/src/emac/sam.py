"""Spatial adaptive masking.

The retained-token budget is split between the image and density modalities
by a symmetric Dirichlet draw. Image patches are ranked by how much density
mass they hold: with probability ``1 - brp`` the most populated patches are
kept, otherwise the least populated ones. Density tokens are kept uniformly at
random. Kept tokens are always handed on in their original positional order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent deterministic substream for ``(seed, *stream)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def sample_token_budget(
    n_image: int,
    n_density: int,
    mask_ratio: float,
    alpha: float,
    rng: np.random.Generator,
    mode: str = "dirichlet",
) -> tuple[int, int]:
    """Number of retained (image, density) tokens.

    ``mode="dirichlet"`` applies the mask ratio to the joint sequence and splits
    the kept total with a Dirichlet(alpha, alpha) draw; ``mode="per_modality"``
    applies the ratio to each modality separately.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ContractError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    keep = 1.0 - mask_ratio
    if mode == "per_modality":
        return (
            min(n_image, round_half_up(keep * n_image)),
            min(n_density, round_half_up(keep * n_density)),
        )
    if mode != "dirichlet":
        raise ContractError(f"unknown budget mode {mode!r}")
    total = min(n_image + n_density, round_half_up(keep * (n_image + n_density)))
    lam = float(rng.dirichlet([alpha, alpha])[0])
    n_img = min(max(round_half_up(lam * total), 0), n_image)
    n_den = total - n_img
    if n_den > n_density:
        n_img += n_den - n_density
        n_den = n_density
    return n_img, n_den


@dataclass
class MaskPlan:
    """Keep/mask decision for one sample. Mask entries: 0 keeps, 1 masks."""

    n_image: int
    n_density: int
    keep_image: np.ndarray
    keep_density: np.ndarray
    brp: float = 0.0
    sort_descending: bool = True
    mask_adaptive: np.ndarray = field(init=False)
    mask_random: np.ndarray = field(init=False)

    def __post_init__(self):
        self.keep_image = np.sort(np.asarray(self.keep_image, dtype=np.int64))
        self.keep_density = np.sort(np.asarray(self.keep_density, dtype=np.int64))
        for name, keep, n in (("image", self.keep_image, self.n_image), ("density", self.keep_density, self.n_density)):
            if keep.size > n or np.unique(keep).size != keep.size or (keep.size and (keep[0] < 0 or keep[-1] >= n)):
                raise ContractError(f"{name} keep set {keep.tolist()} invalid for {n} tokens")
        self.mask_adaptive = np.ones(self.n_image, dtype=np.int8)
        self.mask_adaptive[self.keep_image] = 0
        self.mask_random = np.ones(self.n_density, dtype=np.int8)
        self.mask_random[self.keep_density] = 0

    @property
    def n_image_kept(self) -> int:
        return int(self.keep_image.size)

    @property
    def n_density_kept(self) -> int:
        return int(self.keep_density.size)

    @property
    def n_kept(self) -> int:
        return self.n_image_kept + self.n_density_kept

    @property
    def keep_set(self) -> set[int]:
        return set(self.keep_image.tolist())

    def token_index(self) -> np.ndarray:
        """Positions of kept tokens in the joint [image | density] sequence, ascending."""
        return np.concatenate([self.keep_image, self.n_image + self.keep_density])

    @classmethod
    def keep_all(cls, n_image: int, n_density: int) -> "MaskPlan":
        return cls(n_image, n_density, np.arange(n_image), np.arange(n_density))

    @classmethod
    def image_only(cls, n_image: int, n_density: int) -> "MaskPlan":
        """Inference budget: every image token kept, every density token masked."""
        return cls(n_image, n_density, np.arange(n_image), np.arange(0))


def ranked_patches(v_d: np.ndarray, descending: bool) -> np.ndarray:
    """Stable argsort; ties keep ascending original index in both directions."""
    v = np.asarray(v_d, dtype=np.float64)
    key = -v if descending else v
    return np.argsort(key, kind="stable")


def adaptive_mask(
    v_d: np.ndarray,
    n_keep: int,
    brp: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, bool]:
    """Kept image-patch indices in rank order, and whether the descending branch ran."""
    v = np.asarray(v_d, dtype=np.float64).reshape(-1)
    if not 0 <= n_keep <= v.size:
        raise ContractError(f"cannot keep {n_keep} of {v.size} image tokens")
    if not 0.0 <= brp <= 1.0:
        raise ContractError(f"brp must lie in [0, 1], got {brp}")
    draw = rng.random()
    descending = bool(draw <= 1.0 - brp)
    return ranked_patches(v, descending)[:n_keep], descending


def random_image_mask(n_image: int, n_keep: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform image keep set; the non-adaptive baseline for ablations."""
    return random_density_mask(n_image, n_keep, rng)


def random_density_mask(n_density: int, n_keep: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffle the density tokens and keep the first ``n_keep``."""
    if not 0 <= n_keep <= n_density:
        raise ContractError(f"cannot keep {n_keep} of {n_density} density tokens")
    return rng.permutation(n_density)[:n_keep]


def plan_mask(
    v_d: np.ndarray,
    n_density: int,
    mask_ratio: float,
    brp: float,
    alpha: float,
    rng: np.random.Generator,
    budget_mode: str = "dirichlet",
    image_masking: str = "adaptive",
) -> MaskPlan:
    """Full SAM draw for one sample, in the order budget, image, density."""
    n_image = int(np.size(v_d))
    n_img, n_den = sample_token_budget(n_image, n_density, mask_ratio, alpha, rng, mode=budget_mode)
    if image_masking == "adaptive":
        keep_img, descending = adaptive_mask(v_d, n_img, brp, rng)
    elif image_masking == "random":
        keep_img, descending = random_image_mask(n_image, n_img, rng), True
    else:
        raise ContractError(f"unknown image masking {image_masking!r}")
    keep_den = random_density_mask(n_density, n_den, rng)
    return MaskPlan(n_image, n_density, keep_img, keep_den, brp=brp, sort_descending=descending)


def select_and_restore(tokens: np.ndarray, plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Kept rows of an (L, C) token array in original order, and their positions."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] != plan.n_image + plan.n_density:
        raise ContractError(f"plan covers {plan.n_image + plan.n_density} tokens, got {tokens.shape[0]}")
    pos = plan.token_index()
    return tokens[pos], pos


def reinsert(kept: np.ndarray, positions: np.ndarray, full: np.ndarray) -> np.ndarray:
    out = np.array(full, copy=True)
    out[positions] = kept
    return out


def mask_visualization(image: np.ndarray, plan: MaskPlan, patch: int, dim: float = 0.25) -> np.ndarray:
    """Image with masked patches dimmed to ``dim`` of their intensity."""
    img = np.asarray(image, dtype=np.float64).copy()
    cols = img.shape[1] // patch
    for i in np.flatnonzero(plan.mask_adaptive):
        r, c = divmod(int(i), cols)
        img[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] *= dim
    return img
