"""Density-embedded masked autoencoder.

Images and standardised density maps are tokenised jointly. A subset of tokens
chosen by :mod:`emac.sam` is encoded; the decoder fills every density position
that was not kept with a learned mask token, cross-attends to the encoded
tokens, refines with two transformer blocks and regresses each density patch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import density, sam
from .autodiff import ContractError, Tensor
from .nn import Block, CrossBlock, LayerNorm, Linear, Module, param, patchify, sincos_pos_embed, unpatchify


@dataclass
class ModelConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    dec_depth: int = 2
    mlp_ratio: float = 4.0
    channels: int = 1
    tcf_patch: int = 8
    tcf_dim: int = 32
    tcf_query: str = "current"


@dataclass
class SamConfig:
    mask_ratio: float = 0.72
    brp: float = 0.2
    alpha: float = 1.0
    budget_mode: str = "dirichlet"
    image_masking: str = "adaptive"


class DemoModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        c, p = cfg.dim, cfg.patch
        self.image_embed = Linear(p * p * cfg.channels, c, rng)
        self.density_embed = Linear(p * p, c, rng)
        self.image_modality = param(rng.normal(0.0, 0.02, c))
        self.density_modality = param(rng.normal(0.0, 0.02, c))
        self.encoder = [Block(c, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.encoder_norm = LayerNorm(c)
        self.mask_token = param(rng.normal(0.0, 0.02, c))
        self.cross = CrossBlock(c, cfg.heads, cfg.mlp_ratio, rng)
        self.decoder = [Block(c, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.dec_depth)]
        self.decoder_norm = LayerNorm(c)
        self.head = Linear(c, p * p, rng, zero=True)
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    def pos_embed(self, h: int, w: int) -> np.ndarray:
        p = self.cfg.patch
        key = (h // p, w // p)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_pos_embed(self.cfg.dim, *key)
        return self._pos_cache[key]

    # -------------------------------------------------------------- stages

    def embed(self, images, densities) -> Tensor:
        """(B, L, C) tokens: image patches first, then density patches."""
        images = np.asarray(images, dtype=np.float64)
        densities = np.asarray(densities, dtype=np.float64)
        h, w = densities.shape[-2:]
        if images.shape[1:3] != (h, w):
            raise ContractError(f"image {images.shape} and density {densities.shape} differ in size")
        p = self.cfg.patch
        pos = self.pos_embed(h, w)
        img = ad.add(ad.add(self.image_embed(patchify(images, p)), pos), self.image_modality)
        den = ad.add(ad.add(self.density_embed(patchify(densities, p)), pos), self.density_modality)
        return ad.concat([img, den], axis=1)

    def encode(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-2] == 0:
            raise ContractError("cannot encode an empty token sequence")
        x = tokens
        for blk in self.encoder:
            x = blk(x)
        return self.encoder_norm(x)

    def decode(self, encoded: Tensor, plans: Sequence[sam.MaskPlan], h: int, w: int) -> Tensor:
        """Standardised (B, h, w) density reconstruction."""
        bsz, n_kept, c = encoded.shape
        n_den = plans[0].n_density
        if len(plans) != bsz or any(pl.n_kept != n_kept or pl.n_density != n_den for pl in plans):
            raise ContractError("mask plans do not match the encoded token batch")
        pos = self.pos_embed(h, w)
        if pos.shape[0] != n_den:
            raise ContractError(f"{n_den} density tokens do not tile a {h}x{w} map")
        base = ad.add(ad.add(pos, self.mask_token), np.zeros((bsz, 1, 1)))
        dest = np.concatenate([b * n_den + pl.keep_density for b, pl in enumerate(plans)])
        src = np.concatenate(
            [b * n_kept + pl.n_image_kept + np.arange(pl.n_density_kept) for b, pl in enumerate(plans)]
        )
        queries = ad.scatter_rows(base, encoded, dest, src) if dest.size else base
        x = self.cross(queries, encoded)
        for blk in self.decoder:
            x = blk(x)
        out = self.head(self.decoder_norm(x))
        return unpatchify(out, self.cfg.patch, h, w)

    def forward(self, images, densities, plans: Sequence[sam.MaskPlan]) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        densities = np.asarray(densities, dtype=np.float64)
        h, w = densities.shape[-2:]
        tokens = self.embed(images, densities)
        idx = np.stack([pl.token_index() for pl in plans])
        kept = ad.gather(tokens, idx)
        return self.decode(self.encode(kept), plans, h, w)

    # -------------------------------------------------------------- entry points

    def plan(self, densities_raw, sam_cfg: SamConfig, rngs: Sequence[np.random.Generator]) -> list[sam.MaskPlan]:
        p = self.cfg.patch
        plans = []
        for d, rng in zip(np.asarray(densities_raw), rngs):
            v_d = density.patch_counts(d, p)
            plans.append(
                sam.plan_mask(
                    v_d, v_d.size, sam_cfg.mask_ratio, sam_cfg.brp, sam_cfg.alpha, rng,
                    budget_mode=sam_cfg.budget_mode, image_masking=sam_cfg.image_masking,
                )
            )
        return plans

    def forward_train(self, images, densities_std, sam_cfg: SamConfig, rngs, densities_raw=None, plans=None):
        """Masked training pass; returns the standardised prediction and the plans.

        Patch ranking uses ``densities_raw`` when given, else the standardised
        maps (an increasing affine map, so the ranking is the same). Passing
        ``plans`` skips the draw.
        """
        images = _batch(images)
        densities_std = _batch(densities_std)
        if plans is None:
            ref = densities_std if densities_raw is None else _batch(densities_raw)
            plans = self.plan(ref, sam_cfg, rngs)
        return self.forward(images, densities_std, plans), plans

    def forward_infer(self, images) -> Tensor:
        """Image-only pass: every image token kept, every density token masked."""
        images = _batch(images)
        h, w = images.shape[1:3]
        p = self.cfg.patch
        n = (h // p) * (w // p)
        if h % p or w % p:
            raise density.TilingError(f"{h}x{w} input cannot be tiled by {p}x{p} patches")
        plans = [sam.MaskPlan.image_only(n, n) for _ in range(images.shape[0])]
        return self.forward(images, np.zeros(images.shape[:3]), plans)

    def hyperparameters(self) -> dict:
        return asdict(self.cfg)


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x
