"""Ground-truth density maps, per-patch counts, standardisation and count metrics."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .autodiff import ContractError

DEFAULT_SIGMA = 6.0
KERNEL_TRUNCATE = 4.0
STD_FLOOR = 1e-8

DMAP_MAGIC = b"DMAP"


class AnnotationError(ValueError):
    """A point annotation lies outside its frame."""


class TilingError(ValueError):
    """Map dimensions are not a multiple of the patch size."""


class FormatError(ValueError):
    """A file does not follow its binary or JSON layout."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def rasterize_density(
    points: Sequence[Sequence[float]],
    h: int,
    w: int,
    sigma: float = DEFAULT_SIGMA,
    frame: int | str | None = None,
) -> np.ndarray:
    """Render point annotations (x = column, y = row) into an h x w density map.

    Each point contributes a Gaussian truncated at 4 sigma and to the image,
    then rescaled to unit mass, so the map integrates to ``len(points)``.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    for k, (x, y) in enumerate(pts):
        if not (0.0 <= x < w and 0.0 <= y < h) or not (math.isfinite(x) and math.isfinite(y)):
            where = f"frame {frame}" if frame is not None else "frame"
            raise AnnotationError(f"{where}: point {k} at ({x}, {y}) outside {w}x{h} image")
    return kernels.rasterize(pts, h, w, sigma, KERNEL_TRUNCATE)


def _check_tiling(h: int, w: int, patch: int):
    if patch <= 0 or h % patch or w % patch:
        raise TilingError(f"{h}x{w} map cannot be tiled by {patch}x{patch} patches")


def patch_counts(d: np.ndarray, patch: int) -> np.ndarray:
    """Per-patch mass of a density map, patches in row-major order."""
    d = np.asarray(d, dtype=np.float64)
    h, w = d.shape
    _check_tiling(h, w, patch)
    tiles = d.reshape(h // patch, patch, w // patch, patch)
    return tiles.sum(axis=(1, 3)).reshape(-1)


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    @property
    def scale(self) -> float:
        return max(self.std, STD_FLOOR)

    def standardize(self, d) -> np.ndarray:
        return (np.asarray(d, dtype=np.float64) - self.mean) / self.scale

    def destandardize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(float(d["mean"]), float(d["std"]))


def fit_standardizer(training_maps: Iterable[np.ndarray]) -> Standardizer:
    """Pixel mean and std pooled over every training map."""
    total = 0.0
    count = 0
    maps = [np.asarray(m, dtype=np.float64) for m in training_maps]
    if not maps:
        raise ContractError("fit_standardizer needs at least one training map")
    for m in maps:
        total += float(m.sum())
        count += m.size
    mu = total / count
    sq = sum(float(((m - mu) ** 2).sum()) for m in maps)
    return Standardizer(mu, math.sqrt(sq / count))


def map_count(d: np.ndarray, clamp: bool = True) -> float:
    """Object count of a (destandardised) map; negative pixels dropped when ``clamp``."""
    d = np.asarray(d, dtype=np.float64)
    return float(np.maximum(d, 0.0).sum() if clamp else d.sum())


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    n: int

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "n": self.n}


def evaluate(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> Metrics:
    pred = np.asarray(pred_counts, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_counts, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"{pred.size} predicted counts vs {gt.size} ground-truth counts")
    if pred.size == 0:
        raise ContractError("evaluate needs at least one frame")
    err = gt - pred
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    return Metrics(mae, rmse, int(pred.size))


# ---------------------------------------------------------------- DMAP files

def write_dmap(path, d: np.ndarray) -> None:
    d = np.asarray(d)
    if d.ndim != 2:
        raise ValueError(f"DMAP stores 2-D maps, got shape {d.shape}")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DMAP_MAGIC:
        raise FormatError(path, 0, f"bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(path, len(raw), "truncated header")
    h, w = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * h * w
    if len(raw) != need:
        raise FormatError(path, min(len(raw), need), f"expected {need} bytes for {h}x{w}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)
