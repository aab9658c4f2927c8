"""Command-line entry point: generate, preprocess, train, eval, predict, sweep.

Every command prints its fully resolved configuration before running so a run
can be reproduced from its log alone. All randomness flows from --seed.
Exit codes: 0 success, 2 missing/invalid inputs, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .losses import PARAM_NAMES, format_iou_table
from .patches import build_patch_features, write_sample_cache
from .remesh import RemeshConfig, remesh_pipeline
from .synthetic import DatasetManifest, build_dataset
from .training import (
    TrainConfig,
    TrainingError,
    evaluate_checkpoint,
    load_samples,
    predict,
    run_fraction_sweep,
    run_mask_sweep,
    train,
)
from .meshio import load_mesh


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _emit_config(name: str, cfg: dict):
    shown = {k: v for k, v in cfg.items() if k not in ("func", "command")}
    print(f"[{name}] resolved config:")
    print(json.dumps(shown, indent=2, sort_keys=True, default=str))


def _write_csv(path, rows: list[dict], columns: list[str]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def cmd_generate(args) -> int:
    _emit_config("generate", vars(args))
    manifest = build_dataset(
        n=args.n,
        split=args.split,
        seed=args.seed,
        out_dir=args.out,
        resolution=args.resolution,
        noise_level=args.noise,
    )
    n_train = len(manifest.split_records("train"))
    n_test = len(manifest.split_records("test"))
    print(f"wrote {args.n} cases to {args.out} ({n_train} train / {n_test} test)")
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_preprocess(args) -> int:
    _emit_config("preprocess", vars(args))
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise CliError(f"manifest not found: {manifest_path}")
    manifest = DatasetManifest.load(manifest_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RemeshConfig(base_faces=args.base_faces, subdivision_levels=args.levels)
    for rec in manifest.records:
        rel = rec.get("mesh")
        if not rel:
            raise CliError(f"record without mesh path in {manifest_path}")
        try:
            mesh = load_mesh(manifest_path.parent / rel)
            rm = remesh_pipeline(mesh, cfg)
            pfs = build_patch_features(rm)
        except Exception as exc:
            raise CliError(f"sample '{rel}' failed preprocessing: {exc}", code=1)
        cache_name = f"{Path(rel).stem}__f{args.base_faces}k{args.levels}.bin"
        write_sample_cache(pfs, out / cache_name)
        print(
            f"{rel}: {rm.mesh.face_count} faces, {pfs.patch_count} patches -> {cache_name}"
        )
    print(f"cached {len(manifest.records)} samples in {out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    if args.config:
        if not Path(args.config).exists():
            raise CliError(f"config file not found: {args.config}")
        cfg = TrainConfig.from_ini(args.config)
    else:
        cfg = TrainConfig()
    if args.paradigm:
        cfg.paradigm = args.paradigm.replace("-", "_")
    if args.manifest:
        cfg.manifest = args.manifest
    if args.cache_dir:
        cfg.cache_dir = args.cache_dir
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.steps is not None:
        cfg.steps = args.steps
    if not cfg.manifest:
        raise CliError("either --manifest or a config with a manifest is required")
    if not Path(cfg.manifest).exists():
        raise CliError(f"manifest not found: {cfg.manifest}")
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    print(f"[train] resolved config:\n{cfg.to_ini_string()}")
    model, log = train(cfg)
    for i, b in enumerate(log.steps):
        if i % max(1, len(log.steps) // 20) == 0 or i == len(log.steps) - 1:
            print(
                f"step {i:5d}  total={b.l_total:.4f}  re={b.l_re:.4f}  rg={b.l_rg:.4f}"
            )
    if log.wallclock:
        phases = ", ".join(f"{k}={v:.1f}s" for k, v in log.wallclock.items())
        print(f"wall-clock: {phases}")
    if log.final_eval:
        print(format_iou_table([log.final_eval]))
    if log.checkpoint_path:
        print(f"checkpoint: {log.checkpoint_path}")
    if args.runlog:
        with open(args.runlog, "w") as fh:
            for b in log.steps:
                fh.write(json.dumps(asdict(b)) + "\n")
            if log.final_eval:
                fh.write(json.dumps({"final_eval": log.final_eval}) + "\n")
        print(f"run log: {args.runlog}")
    return 0


def cmd_eval(args) -> int:
    _emit_config("eval", vars(args))
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.manifest).exists():
        raise CliError(f"manifest not found: {args.manifest}")
    report = evaluate_checkpoint(
        args.checkpoint, args.manifest, split=args.split, cache_dir=args.cache_dir or None
    )
    print(format_iou_table([report]))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
        print(f"report: {args.out}")
    return 0


def cmd_predict(args) -> int:
    _emit_config("predict", vars(args))
    for path, label in ((args.checkpoint, "checkpoint"), (args.mesh, "mesh")):
        if not Path(path).exists():
            raise CliError(f"{label} not found: {path}")
    params = predict(args.checkpoint, args.mesh, args.location, args.system, args.series)
    print(
        f"transgingival={params.transgingival:.3f} mm  "
        f"diameter={params.diameter:.3f} mm  height={params.height:.3f} mm"
    )
    return 0


def cmd_sweep(args) -> int:
    if bool(args.fractions) == bool(args.mask_ratios):
        raise CliError("pass exactly one of --fractions or --mask-ratios")
    cfg = _train_config_from_args(args)
    print(f"[sweep] resolved config:\n{cfg.to_ini_string()}")
    data = load_samples(cfg.manifest, cfg, cache_dir=cfg.cache_dir or None)
    train_samples, eval_samples = data["train"], data["test"]
    if not eval_samples:
        raise CliError("sweep needs a non-empty test split")
    if args.fractions:
        values = [float(x) for x in args.fractions.split(",")]
        rows = run_fraction_sweep(cfg, values, train_samples, eval_samples)
        key = "fraction"
    else:
        values = [float(x) for x in args.mask_ratios.split(",")]
        rows = run_mask_sweep(cfg, values, train_samples, eval_samples)
        key = "mask_ratio"
    print(format_iou_table(rows, key=key))
    columns = [key, *PARAM_NAMES, "count"]
    if args.out:
        _write_csv(args.out, rows, columns)
        print(f"csv: {args.out}")
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        print(buf.getvalue().rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abutmesh",
        description="Abutment parameter prediction from intraoral scan meshes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a labelled synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=float, default=0.85)
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="remesh + patch features into a cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--base-faces", type=int, default=500, dest="base_faces")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    def add_train_flags(q):
        q.add_argument("--config", default="")
        q.add_argument("--manifest", default="")
        q.add_argument("--cache-dir", default="", dest="cache_dir")
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--epochs", type=int, default=None)
        q.add_argument("--steps", type=int, default=None)
        q.add_argument("--checkpoint", default="")

    p = sub.add_parser("train", help="train a model (ssat or ssl-ft)")
    add_train_flags(p)
    p.add_argument("--paradigm", choices=["ssat", "ssl-ft", "ssl_ft"], default="")
    p.add_argument("--runlog", default="")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--cache-dir", default="", dest="cache_dir")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict parameters for one scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--location", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--series", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="training-fraction or mask-ratio ablations")
    add_train_flags(p)
    p.add_argument("--paradigm", choices=["ssat"], default="")
    p.add_argument("--fractions", default="")
    p.add_argument("--mask-ratios", default="", dest="mask_ratios")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
