"""Synthetic moving-dot videos with point, track and flow annotations, plus dataset I/O.

On-disk layout of a dataset directory::

    manifest.json
    <sequence>/frame_00000.pgm ...     8-bit binary PGM frames
    <sequence>/flow_00001.flo ...      flow from frame t back to t-1 (t >= 1)
    <sequence>/ann.json                {"frames": [{"index", "points", "track_ids"}]}
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import FormatError
from .flow import read_flo, write_flo
from .sam import make_rng

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    h: int = 64
    w: int = 64
    n_frames: int = 30
    n_objects: int | tuple[int, int] = (5, 20)
    radius: float = 6.0
    blob_sigma: float = 1.5
    amplitude: float = 0.8
    speed: tuple[float, float] = (0.5, 2.0)
    background: float = 0.1
    texture: float = 0.03
    fixed_velocity: tuple[float, float] | None = None
    seed: int = 0

    def validate(self):
        if self.n_frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.n_frames}")
        if self.radius >= min(self.h, self.w) / 2:
            raise ConfigError(f"dot radius {self.radius} too large for a {self.w}x{self.h} frame")
        lo, hi = self.object_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad object count range {self.n_objects}")
        if self.blob_sigma <= 0 or self.radius <= 0:
            raise ConfigError("blob sigma and radius must be positive")

    @property
    def object_range(self) -> tuple[int, int]:
        if isinstance(self.n_objects, (list, tuple)):
            return int(self.n_objects[0]), int(self.n_objects[1])
        return int(self.n_objects), int(self.n_objects)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("n_objects", "speed", "fixed_velocity"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class FrameSample:
    index: int
    image: np.ndarray
    points: np.ndarray
    track_ids: list[int]
    gt_flow: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.track_ids)


@dataclass
class SequenceData:
    name: str
    split: str
    frames: list[FrameSample] = field(default_factory=list)


def _texture(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:cfg.h, 0:cfg.w].astype(np.float64)
    tex = np.zeros((cfg.h, cfg.w))
    for _ in range(4):
        fx, fy = rng.uniform(0.05, 0.25, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(fx * xs + fy * ys + phase)
    return cfg.texture * tex / 4.0


def _render(cfg: SceneConfig, pos: np.ndarray, base: np.ndarray) -> np.ndarray:
    img = base.copy()
    ys, xs = np.mgrid[0:cfg.h, 0:cfg.w].astype(np.float64)
    for x, y in pos:
        r2 = (xs - x) ** 2 + (ys - y) ** 2
        blob = cfg.amplitude * np.exp(-r2 / (2.0 * cfg.blob_sigma ** 2))
        img += np.where(r2 <= cfg.radius ** 2, blob, 0.0)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _flow_field(cfg: SceneConfig, cur: np.ndarray, prev: np.ndarray) -> np.ndarray:
    flow = np.zeros((cfg.h, cfg.w, 2))
    if len(cur) == 0:
        return flow
    ys, xs = np.mgrid[0:cfg.h, 0:cfg.w].astype(np.float64)
    d2 = (xs[..., None] - cur[:, 0]) ** 2 + (ys[..., None] - cur[:, 1]) ** 2
    nearest = np.argmin(d2, axis=-1)
    inside = np.take_along_axis(d2, nearest[..., None], axis=-1)[..., 0] <= cfg.radius ** 2
    delta = prev - cur
    flow[inside] = delta[nearest[inside]]
    # stored as float32 on disk; keep the in-memory copy identical
    return flow.astype(np.float32).astype(np.float64)


def _bounce(p: np.ndarray, v: np.ndarray, hi: float) -> None:
    low = p < 0
    p[low] = -p[low]
    v[low] = -v[low]
    high = p > hi
    p[high] = 2 * hi - p[high]
    v[high] = -v[high]


def generate_sequence(cfg: SceneConfig, stream: int = 0) -> list[FrameSample]:
    """Render one sequence; ``stream`` selects an independent substream of ``cfg.seed``."""
    cfg.validate()
    rng = make_rng(cfg.seed, stream)
    lo, hi = cfg.object_range
    n = int(rng.integers(lo, hi + 1))
    pos = np.column_stack([rng.uniform(0, cfg.w - 1, n), rng.uniform(0, cfg.h - 1, n)])
    if cfg.fixed_velocity is not None:
        vel = np.tile(np.asarray(cfg.fixed_velocity, dtype=np.float64), (n, 1))
    else:
        speed = rng.uniform(cfg.speed[0], cfg.speed[1], n)
        angle = rng.uniform(0, 2 * np.pi, n)
        vel = np.column_stack([speed * np.cos(angle), speed * np.sin(angle)])
    base = np.full((cfg.h, cfg.w), cfg.background) + (_texture(cfg, rng) if cfg.texture else 0.0)
    frames: list[FrameSample] = []
    prev = None
    for t in range(cfg.n_frames):
        if t > 0:
            pos = pos + vel
            _bounce(pos[:, 0], vel[:, 0], cfg.w - 1)
            _bounce(pos[:, 1], vel[:, 1], cfg.h - 1)
        flow = _flow_field(cfg, pos, prev) if prev is not None else None
        frames.append(FrameSample(t, _render(cfg, pos, base), pos.copy(), list(range(n)), flow))
        prev = pos.copy()
    return frames


@dataclass
class DatasetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    splits: dict = field(default_factory=lambda: {"train": 16, "val": 4, "test": 4})
    seed: int = 7

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        scene = SceneConfig.from_dict(d.get("scene", {}))
        return cls(scene=scene, splits=dict(d.get("splits", cls().splits)), seed=int(d.get("seed", 7)))

    def to_dict(self) -> dict:
        return {"scene": asdict(self.scene), "splits": dict(self.splits), "seed": self.seed}


def generate_dataset(cfg: DatasetConfig) -> list[SequenceData]:
    scene = SceneConfig.from_dict({**asdict(cfg.scene), "seed": cfg.seed})
    out, k = [], 0
    for split in SPLITS:
        for i in range(int(cfg.splits.get(split, 0))):
            out.append(SequenceData(f"{split}_{i:03d}", split, generate_sequence(scene, stream=k)))
            k += 1
    return out


# ---------------------------------------------------------------- PGM

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; ``image`` holds intensities in [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path, as_float: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(path, 0, f"not a binary PGM (magic {raw[:2]!r})")
    pos = 2
    vals = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise FormatError(path, pos, "malformed PGM header")
        vals.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(path, pos, f"only 8-bit PGM supported, maxval {maxval}")
    pos += 1
    if len(raw) - pos != w * h:
        raise FormatError(path, pos, f"expected {w * h} pixel bytes, found {len(raw) - pos}")
    img = np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w).copy()
    return img / 255.0 if as_float else img


# ---------------------------------------------------------------- annotations and datasets

def annotations_to_json(frames: Sequence[FrameSample]) -> dict:
    return {
        "frames": [
            {
                "index": int(f.index),
                "points": [[float(x), float(y)] for x, y in np.asarray(f.points).reshape(-1, 2)],
                "track_ids": [int(t) for t in f.track_ids],
            }
            for f in frames
        ]
    }


def parse_annotations(path) -> list[dict]:
    text = Path(path).read_bytes()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text.decode("utf-8", "replace")[: exc.pos].encode("utf-8"))
        raise FormatError(path, offset, exc.msg) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise FormatError(path, 0, "expected an object with a 'frames' list")
    out = []
    for k, fr in enumerate(doc["frames"]):
        try:
            pts = np.asarray(fr["points"], dtype=np.float64).reshape(-1, 2)
            ids = [int(t) for t in fr["track_ids"]]
            idx = int(fr["index"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, _offset_of_frame(text, k), f"frame entry {k}: {exc}") from None
        if len(ids) != len(pts):
            raise FormatError(path, _offset_of_frame(text, k), f"frame {idx}: {len(pts)} points but {len(ids)} track ids")
        out.append({"index": idx, "points": pts, "track_ids": ids})
    return out


def _offset_of_frame(text: bytes, k: int) -> int:
    hits = [m.start() for m in re.finditer(rb'"index"', text)]
    return hits[k] if k < len(hits) else 0


def write_sequence(directory, frames: Sequence[FrameSample]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_pgm(d / f"frame_{f.index:05d}.pgm", f.image)
        if f.gt_flow is not None:
            write_flo(d / f"flow_{f.index:05d}.flo", f.gt_flow)
    (d / "ann.json").write_text(json.dumps(annotations_to_json(frames)))


def read_sequence(directory) -> list[FrameSample]:
    d = Path(directory)
    ann = parse_annotations(d / "ann.json")
    frames = []
    for fr in ann:
        img = read_pgm(d / f"frame_{fr['index']:05d}.pgm")
        flo_path = d / f"flow_{fr['index']:05d}.flo"
        flow = read_flo(flo_path).astype(np.float64) if flo_path.exists() else None
        frames.append(FrameSample(fr["index"], img, fr["points"], fr["track_ids"], flow))
    return frames


def list_frames(directory) -> list[Path]:
    return sorted(Path(directory).glob("frame_*.pgm"))


def write_dataset(directory, sequences: Sequence[SequenceData], config: DatasetConfig | None = None) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        write_sequence(root / seq.name, seq.frames)
    manifest = {
        "version": 1,
        "sequences": [{"name": s.name, "split": s.split, "n_frames": len(s.frames)} for s in sequences],
    }
    if config is not None:
        manifest["config"] = config.to_dict()
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    text = path.read_bytes()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, exc.msg) from None
    if not isinstance(doc.get("sequences"), list):
        raise FormatError(path, 0, "manifest lacks a 'sequences' list")
    return doc


def read_dataset(directory, splits: Sequence[str] | None = None) -> list[SequenceData]:
    root = Path(directory)
    out = []
    for entry in read_manifest(root)["sequences"]:
        if splits is not None and entry["split"] not in splits:
            continue
        out.append(SequenceData(entry["name"], entry["split"], read_sequence(root / entry["name"])))
    return out
