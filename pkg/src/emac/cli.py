"""``emac`` command line: gen-data, train, eval, infer, mask-viz, gradcheck, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import density, gradcheck, pipeline, sam, synth
from .config import RunConfig
from .demo import SamConfig


class UsageError(Exception):
    pass


def _load_run_config(path, seed=None) -> RunConfig:
    try:
        cfg = RunConfig.load(path) if path else RunConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None
    return replace(cfg, seed=seed) if seed is not None else cfg


def _require_split(data_dir, split: str) -> None:
    try:
        manifest = synth.read_manifest(data_dir)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {data_dir}: {exc}") from None
    if not any(s["split"] == split for s in manifest["sequences"]):
        raise UsageError(f"dataset {data_dir} has no {split!r} sequences")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
        cfg = synth.DatasetConfig.from_dict(raw)
        cfg.scene.validate()
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid dataset config: {exc}") from None
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    seqs = synth.generate_dataset(cfg)
    synth.write_dataset(args.out, seqs, cfg)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, epochs=args.epochs))
    _require_split(args.data, "train")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.save(out.with_suffix(out.suffix + ".config.json"))
    log_path = args.log or out.with_suffix(out.suffix + ".log.jsonl")
    res = pipeline.train(cfg, args.data, out, log_path)
    print(json.dumps({"best_epoch": res.best_epoch, "final_loss": res.final_loss, "history": res.history}))
    return 0


def cmd_eval(args) -> int:
    _require_split(args.data, args.split)
    cfg = _load_run_config(args.config) if args.config else None
    report = pipeline.evaluate_checkpoint(args.ckpt, args.data, args.split, config=cfg, oracle=args.oracle)
    text = _dump(report)
    if args.json:
        Path(args.json).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_infer(args) -> int:
    errors = pipeline.infer_frames(args.ckpt, args.frames, args.out)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return 1 if errors else 0


def cmd_mask_viz(args) -> int:
    seqs = synth.read_dataset(args.data)
    if args.sequence:
        seqs = [s for s in seqs if s.name == args.sequence]
    if not seqs:
        raise UsageError(f"no sequence {args.sequence!r} in {args.data}")
    frames = {f.index: f for f in seqs[0].frames}
    if args.frame not in frames:
        raise UsageError(f"sequence {seqs[0].name} has no frame {args.frame}")
    frame = frames[args.frame]
    h, w = frame.image.shape
    d = density.rasterize_density(frame.points, h, w, sigma=args.sigma)
    v_d = density.patch_counts(d, args.patch)
    cfg = SamConfig(brp=args.brp)
    plan = sam.plan_mask(v_d, v_d.size, cfg.mask_ratio, cfg.brp, cfg.alpha, sam.make_rng(args.seed, args.frame))
    synth.write_pgm(args.out, sam.mask_visualization(frame.image, plan, args.patch))
    print(json.dumps({"kept_image": plan.keep_image.tolist(), "descending": plan.sort_descending}))
    return 0


def cmd_gradcheck(args) -> int:
    names = args.only or list(gradcheck.CHECKS)
    unknown = [n for n in names if n not in gradcheck.CHECKS]
    if unknown:
        raise UsageError(f"unknown checks {unknown}; choose from {sorted(gradcheck.CHECKS)}")
    results = []
    for name in names:
        r = gradcheck.run_check(name, instances=args.instances, seed=args.seed)
        print(r.line(), flush=True)
        results.append(r)
    if args.json:
        Path(args.json).write_text(_dump([{"name": r.name, "max_rel_err": r.max_rel_err, "passed": r.passed} for r in results]))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config, args.seed)
    _require_split(args.data, "train")
    _require_split(args.data, args.split)
    table = pipeline.ablate(cfg, args.data, split=args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_dump(table))
    text = pipeline.format_table(table)
    out.with_suffix(".txt").write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emac")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic video dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and keep the best-by-validation checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="count metrics per sequence and overall")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--config")
    p.add_argument("--json")
    p.add_argument("--oracle", action="store_true", help="debug: score ground-truth maps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="density maps and counts for a frame directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("mask-viz", help="render kept and masked patches of one frame")
    p.add_argument("--data", required=True)
    p.add_argument("--sequence")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--brp", type=float, default=0.2)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--sigma", type=float, default=density.DEFAULT_SIGMA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_viz)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--only", nargs="*")
    p.add_argument("--instances", type=int, default=gradcheck.N_INSTANCES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="masking-strategy and BRP comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"emac: {exc}", file=sys.stderr)
        return 2
    except (density.FormatError, pipeline.ckpt.CheckpointError) as exc:
        print(f"emac: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
