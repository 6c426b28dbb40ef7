"""Training, evaluation, inference and ablation over synthetic video datasets."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import density, losses, synth
from .config import RunConfig
from .demo import DemoModel
from .flow import FlowProvider, read_flo, warp_bilinear
from .nn import Module
from .optim import AdamW, warmup_cosine
from .sam import make_rng
from .tcf import TcfHead, fuse

log = logging.getLogger(__name__)


class EmacModel(Module):
    """Masked autoencoder, fusion head and the density standardiser."""

    def __init__(self, cfg: RunConfig, standardizer: density.Standardizer | None = None):
        rng = make_rng(cfg.seed, 0)
        self.demo = DemoModel(cfg.model, rng)
        self.tcf = TcfHead(cfg.model.tcf_patch, cfg.model.tcf_dim, rng, cfg.model.tcf_query)
        self.config = cfg
        self.standardizer = standardizer or density.Standardizer(0.0, 1.0)

    def save(self, path) -> None:
        params = {k: v.data for k, v in self.named_parameters().items()}
        hyper = {"config": self.config.to_dict(), "standardizer": self.standardizer.to_dict()}
        ckpt.save_checkpoint(path, params, hyper)

    @classmethod
    def load(cls, path, config: RunConfig | None = None) -> "EmacModel":
        params, hyper = ckpt.load_checkpoint(path)
        cfg = config or RunConfig.from_dict(hyper["config"])
        model = cls(cfg, density.Standardizer.from_dict(hyper["standardizer"]))
        ckpt.assign(model.named_parameters(), params)
        return model

    def flow_provider(self) -> FlowProvider:
        f = self.config.flow
        return FlowProvider(f.provider, f.block, f.radius)


# ---------------------------------------------------------------- data preparation

@dataclass
class PreparedSequence:
    name: str
    split: str
    images: np.ndarray
    raw: np.ndarray
    std: np.ndarray
    counts: np.ndarray
    gt_flow: list = field(default_factory=list)


def density_maps(seq: synth.SequenceData, sigma: float) -> np.ndarray:
    return np.stack(
        [density.rasterize_density(f.points, *f.image.shape, sigma=sigma, frame=f"{seq.name}/{f.index}") for f in seq.frames]
    )


def prepare(sequences: Sequence[synth.SequenceData], sigma: float, standardizer: density.Standardizer) -> list[PreparedSequence]:
    out = []
    for seq in sequences:
        raw = density_maps(seq, sigma)
        out.append(
            PreparedSequence(
                seq.name, seq.split,
                np.stack([f.image for f in seq.frames]),
                raw, standardizer.standardize(raw),
                np.array([f.count for f in seq.frames], dtype=np.float64),
                [f.gt_flow for f in seq.frames],
            )
        )
    return out


def flip_flow(flow: np.ndarray) -> np.ndarray:
    out = flow[:, ::-1].copy()
    out[..., 0] = -out[..., 0]
    return out


class FlowCache:
    """Memoised flow per (sequence, frame, flipped)."""

    def __init__(self, provider: FlowProvider):
        self.provider = provider
        self._cache: dict = {}

    def get(self, seq: PreparedSequence, t: int, flipped: bool = False) -> np.ndarray:
        key = (seq.name, t, flipped)
        if key not in self._cache:
            cur, prev = seq.images[t], seq.images[t - 1]
            gt = seq.gt_flow[t]
            if flipped:
                cur, prev = cur[:, ::-1], prev[:, ::-1]
                gt = None if gt is None else flip_flow(gt)
            self._cache[key] = self.provider(cur, prev, gt)
        return self._cache[key]


# ---------------------------------------------------------------- evaluation

def predict_sequence(model: EmacModel, seq: PreparedSequence, flows: FlowCache, chunk: int = 32) -> np.ndarray:
    """Destandardised fused density maps for every frame; frame 0 is not fused."""
    with ad.no_grad():
        preds = np.concatenate(
            [model.demo.forward_infer(seq.images[i:i + chunk]).data for i in range(0, len(seq.images), chunk)]
        )
        if len(preds) > 1:
            flow = np.stack([flows.get(seq, t) for t in range(1, len(preds))])
            fused = fuse(preds[1:], preds[:-1], flow, model.tcf).data
            preds = np.concatenate([preds[:1], fused])
    return model.standardizer.destandardize(preds)


def evaluate_sequences(
    model: EmacModel,
    seqs: Sequence[PreparedSequence],
    flows: FlowCache,
    oracle: bool = False,
) -> dict:
    """Per-sequence and aggregate MAE/RMSE of per-frame counts.

    ``oracle`` substitutes the ground-truth density maps for the predictions.
    """
    clamp = model.config.clamp_counts
    per_seq, all_pred, all_gt = {}, [], []
    for seq in seqs:
        maps = seq.raw if oracle else predict_sequence(model, seq, flows)
        pred = [density.map_count(m, clamp=clamp) for m in maps]
        per_seq[seq.name] = density.evaluate(pred, seq.counts).to_dict()
        all_pred.extend(pred)
        all_gt.extend(seq.counts.tolist())
    return {"sequences": per_seq, "aggregate": density.evaluate(all_pred, all_gt).to_dict()}


def mean_baseline_mae(train_mean_count: float, seqs: Sequence[PreparedSequence]) -> float:
    gt = np.concatenate([s.counts for s in seqs])
    return float(np.mean(np.abs(gt - train_mean_count)))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: EmacModel
    history: list
    best_epoch: int
    final_loss: float


def _pairs(seqs: Sequence[PreparedSequence], overlap: bool) -> list[tuple[int, int]]:
    step = 1 if overlap else 2
    return [(i, t) for i, s in enumerate(seqs) for t in range(1, len(s.images), step)]


def train_model(
    cfg: RunConfig,
    train_seqs: Sequence[synth.SequenceData],
    val_seqs: Sequence[synth.SequenceData] = (),
    ckpt_path=None,
    log_path=None,
) -> TrainResult:
    """Optimise the full objective over adjacent-frame pairs.

    With validation data the best-by-MAE model is kept (and written to
    ``ckpt_path``); otherwise the last one.
    """
    if not train_seqs:
        raise ValueError("training needs at least one training sequence")
    sigma = cfg.data.sigma
    std = density.fit_standardizer(m for s in train_seqs for m in density_maps(s, sigma))
    train = prepare(train_seqs, sigma, std)
    val = prepare(val_seqs, sigma, std)
    model = EmacModel(cfg, std)
    flows = FlowCache(model.flow_provider())
    params = model.parameters()
    opt = AdamW(
        params, lr=cfg.optim.lr, betas=tuple(cfg.optim.betas), weight_decay=cfg.optim.weight_decay,
        no_decay=[p for p in params if p.ndim == 1],
    )
    pairs = _pairs(train, cfg.data.overlap_pairs)
    bsz = cfg.optim.batch_size
    steps_per_epoch = -(-len(pairs) // bsz)
    if cfg.optim.max_steps_per_epoch:
        steps_per_epoch = min(steps_per_epoch, cfg.optim.max_steps_per_epoch)
    total_steps = steps_per_epoch * cfg.optim.epochs
    warmup_steps = steps_per_epoch * cfg.optim.effective_warmup()
    log_fh = open(log_path, "w") if log_path else None
    history, best_mae, best_state, best_epoch = [], np.inf, None, -1
    global_step, last_loss = 0, float("nan")
    try:
        for epoch in range(cfg.optim.epochs):
            order = make_rng(cfg.seed, 1, epoch).permutation(len(pairs))
            epoch_loss = []
            for step in range(steps_per_epoch):
                batch = [pairs[k] for k in order[step * bsz:(step + 1) * bsz]]
                if not batch:
                    break
                lr = warmup_cosine(global_step, total_steps, warmup_steps, cfg.optim.lr, cfg.optim.min_lr)
                opt.lr = lr
                rep = _train_step(model, cfg, train, batch, flows, make_rng(cfg.seed, 2, epoch, step), opt)
                global_step += 1
                last_loss = rep.total
                epoch_loss.append(rep.total)
                if log_fh:
                    log_fh.write(rep.to_json(epoch=epoch, step=global_step, lr=lr) + "\n")
            entry = {"epoch": epoch, "train_loss": float(np.mean(epoch_loss))}
            if val:
                metrics = evaluate_sequences(model, val, flows)["aggregate"]
                entry.update(val_mae=metrics["mae"], val_rmse=metrics["rmse"])
                if metrics["mae"] < best_mae:
                    best_mae, best_epoch = metrics["mae"], epoch
                    best_state = [p.data.copy() for p in params]
                    if ckpt_path:
                        model.save(ckpt_path)
            history.append(entry)
            log.info("epoch %d %s", epoch, entry)
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        for p, d in zip(params, best_state):
            p.data = d
    else:
        best_epoch = cfg.optim.epochs - 1
        if ckpt_path:
            model.save(ckpt_path)
    return TrainResult(model, history, best_epoch, last_loss)


def _train_step(model, cfg, seqs, batch, flows, rng, opt) -> losses.LossReport:
    flips = rng.random(len(batch)) < 0.5 if cfg.data.flip else np.zeros(len(batch), bool)
    cur_img, prev_img, cur_raw, prev_raw, cur_std, prev_std, flow = [], [], [], [], [], [], []
    for (i, t), fl in zip(batch, flips):
        s = seqs[i]
        sl = (slice(None), slice(None, None, -1)) if fl else (slice(None), slice(None))
        cur_img.append(s.images[t][sl]); prev_img.append(s.images[t - 1][sl])
        cur_raw.append(s.raw[t][sl]); prev_raw.append(s.raw[t - 1][sl])
        cur_std.append(s.std[t][sl]); prev_std.append(s.std[t - 1][sl])
        flow.append(flows.get(s, t, bool(fl)))
    n = len(batch)
    images = np.stack(cur_img + prev_img)
    raw = np.stack(cur_raw + prev_raw)
    std = np.stack(cur_std + prev_std)
    flow = np.stack(flow)
    sam_rngs = [make_rng(int(rng.integers(2**31)), k) for k in range(2 * n)]
    pred, _ = model.demo.forward_train(images, std, cfg.sam, sam_rngs, densities_raw=raw)
    d_cur, d_prev = pred[:n], pred[n:]
    d_fuse = fuse(d_cur, d_prev, flow, model.tcf)
    with ad.no_grad():
        img_warp = warp_bilinear(np.stack(prev_img), flow)
    parts = losses.assemble_step_losses(d_fuse, d_cur, img_warp, np.stack(cur_img), np.stack(cur_std))
    loss = losses.total(*parts, cfg.loss)
    ad.backward(loss, opt.params)
    opt.step()
    return losses.report(*parts, cfg.loss)


# ---------------------------------------------------------------- dataset-level entry points

def load_split(data_dir, split: str) -> list[synth.SequenceData]:
    seqs = synth.read_dataset(data_dir, splits=[split])
    return seqs


def train(cfg: RunConfig, data_dir, ckpt_path, log_path=None) -> TrainResult:
    train_seqs = load_split(data_dir, "train")
    if not train_seqs:
        raise FileNotFoundError(f"{data_dir} has no training split")
    val_seqs = load_split(data_dir, "val")
    return train_model(cfg, train_seqs, val_seqs, ckpt_path=ckpt_path, log_path=log_path)


def evaluate_checkpoint(ckpt_path, data_dir, split: str, config: RunConfig | None = None, oracle: bool = False) -> dict:
    model = EmacModel.load(ckpt_path, config)
    seqs = prepare(load_split(data_dir, split), model.config.data.sigma, model.standardizer)
    report = evaluate_sequences(model, seqs, FlowCache(model.flow_provider()), oracle=oracle)
    report["split"] = split
    return report


def infer_frames(ckpt_path, frames_dir, out_dir) -> list[str]:
    """Write one DMAP per readable frame and ``counts.csv``; returns per-file errors."""
    model = EmacModel.load(ckpt_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    provider = model.flow_provider()
    errors, rows = [], []
    prev_img, prev_pred = None, None
    for path in synth.list_frames(frames_dir):
        idx = int(path.stem.split("_")[-1])
        try:
            img = synth.read_pgm(path)
        except (OSError, ValueError) as exc:
            errors.append(f"{path}: {exc}")
            prev_img, prev_pred = None, None
            continue
        with ad.no_grad():
            pred = model.demo.forward_infer(img).data[0]
            fused = pred
            if prev_img is not None and prev_img.shape == img.shape:
                flo = Path(frames_dir) / f"flow_{idx:05d}.flo"
                gt = read_flo(flo).astype(np.float64) if flo.exists() else None
                prov = provider
                if provider.kind == "gt" and gt is None:
                    prov = FlowProvider("blockmatch", provider.block, provider.radius)
                fused = fuse(pred, prev_pred, prov(img, prev_img, gt), model.tcf).data
        dmap = model.standardizer.destandardize(fused)
        if model.config.clamp_counts:
            dmap = np.maximum(dmap, 0.0)
        dmap = dmap.astype(np.float32)
        density.write_dmap(out / f"{path.stem}.dmap", dmap)
        rows.append((idx, float(dmap.astype(np.float64).sum())))
        prev_img, prev_pred = img, pred
    with open(out / "counts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "count"])
        for idx, count in rows:
            writer.writerow([idx, repr(count)])
    return errors


# ---------------------------------------------------------------- ablation

BRP_SWEEP = (0.0, 0.1, 0.2, 0.4, 1.0)


def ablation_conditions(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    conds = [
        ("sam", cfg),
        ("random", replace(cfg, sam=replace(cfg.sam, image_masking="random"))),
    ]
    for p in BRP_SWEEP:
        conds.append((f"brp={p:g}", replace(cfg, sam=replace(cfg.sam, brp=p, image_masking="adaptive"))))
    return conds


def ablate(cfg: RunConfig, data_dir, split: str = "test") -> dict:
    """Matched short runs differing only in the masking strategy or BRP."""
    train_seqs = load_split(data_dir, "train")
    eval_seqs = load_split(data_dir, split)
    rows, done = [], {}
    for name, run_cfg in ablation_conditions(cfg):
        key = json.dumps(run_cfg.to_dict(), sort_keys=True)
        if key not in done:
            res = train_model(run_cfg, train_seqs)
            prepared = prepare(eval_seqs, run_cfg.data.sigma, res.model.standardizer)
            metrics = evaluate_sequences(res.model, prepared, FlowCache(res.model.flow_provider()))["aggregate"]
            done[key] = (metrics, res.final_loss)
        metrics, final_loss = done[key]
        rows.append(
            {
                "condition": name,
                "image_masking": run_cfg.sam.image_masking,
                "brp": run_cfg.sam.brp,
                "mae": metrics["mae"],
                "rmse": metrics["rmse"],
                "final_train_loss": final_loss,
                "epochs": run_cfg.optim.epochs,
                "max_steps_per_epoch": run_cfg.optim.max_steps_per_epoch,
                "batch_size": run_cfg.optim.batch_size,
                "seed": run_cfg.seed,
            }
        )
    return {"split": split, "rows": rows}


def format_table(table: dict) -> str:
    cols = ["condition", "image_masking", "brp", "mae", "rmse", "epochs", "max_steps_per_epoch", "batch_size", "seed"]
    cells = [cols] + [[_fmt(r[c]) for c in cols] for r in table["rows"]]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
