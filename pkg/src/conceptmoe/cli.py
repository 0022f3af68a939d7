"""Command-line entry point: ``conceptmoe <subcommand> ...``.

Exit codes: 0 success, 1 any other failure, 2 bad usage, 3 missing input
file, 4 unparsable config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from dataclasses import fields, replace
from importlib import metadata
from pathlib import Path


from conceptmoe import explain, pipeline
from conceptmoe.checkpoint import load_checkpoint, save_checkpoint
from conceptmoe.errors import ConceptMoEError, ConfigError
from conceptmoe.synthdata import PRESETS, read_dataset, write_dataset, make_dataset

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4

MANIFEST_NAME = "manifest.json"


def version_string() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}-g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def write_manifest(path: Path, argv: list[str], config_text: str, seed: int, artifacts: dict[str, str]) -> None:
    manifest = {
        "command_line": argv,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "artifacts": artifacts,
        "version": version_string(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require_file(path: str | None) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(path)
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# config plumbing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; explicit flags override it")
    for f in fields(pipeline.TrainConfig):
        kind = int if f.type in ("int", int) else float
        dashed = "--" + f.name.replace("_", "-")
        names = ["--" + f.name] + ([dashed] if dashed != "--" + f.name else [])
        p.add_argument(*names, dest=f.name, type=kind, default=None, help=f"default {f.default!r}")


def _train_config(args) -> pipeline.TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(pipeline.TrainConfig) if getattr(args, f.name) is not None}
    if args.config:
        return pipeline.load_config(_require_file(args.config), overrides)
    return pipeline.TrainConfig.from_dict(overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, argv) -> int:
    spec = PRESETS[args.spec]
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = out.with_name(out.name + ".manifest.json")
    write_manifest(manifest, argv, spec.to_json(), spec.seed, {"dataset": out.name})
    write_dataset(make_dataset(spec, args.n), out)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train_partition(args, argv) -> int:
    cfg = _train_config(args)
    data = read_dataset(_require_file(args.data))
    resume = load_checkpoint(_require_file(args.resume)) if args.resume else None
    out = _out_dir(args.out)
    artifacts = {"checkpoint": "partition.ckpt", "metrics": "partition_metrics.csv"}
    write_manifest(out / MANIFEST_NAME, argv, cfg.to_text(), cfg.seed, artifacts)
    num_classes = data.spec.num_classes if data.spec is not None else None
    result = pipeline.train_partition(data, cfg, num_classes, resume=resume, stop_at_epoch=args.stop_at_epoch)
    save_checkpoint(out / artifacts["checkpoint"], pipeline.checkpoint_from_result(result))
    pipeline.write_metrics_csv(result.metrics, out / artifacts["metrics"])
    last = result.metrics[-1] if result.metrics else {}
    print(f"partition: epoch {result.epoch}, train accuracy {last.get('accuracy', float('nan')):.4f}")
    return 0


def cmd_train_moe(args, argv) -> int:
    cfg = _train_config(args)
    data = read_dataset(_require_file(args.data))
    part_ckpt = load_checkpoint(_require_file(args.partition))
    resume = load_checkpoint(_require_file(args.resume)) if args.resume else None
    partition = pipeline.partition_from_checkpoint(part_ckpt)
    if cfg.num_concepts != partition.num_concepts:
        raise ConfigError(
            f"num_concepts = {cfg.num_concepts} but the partition model has {partition.num_concepts} concepts"
        )
    out = _out_dir(args.out)
    artifacts = {"checkpoint": "moe.ckpt", "metrics": "moe_metrics.csv"}
    write_manifest(out / MANIFEST_NAME, argv, cfg.to_text(), cfg.seed, artifacts)
    result = pipeline.train_moe(data, partition, cfg, resume=resume, stop_at_epoch=args.stop_at_epoch)
    save_checkpoint(out / artifacts["checkpoint"], pipeline.checkpoint_from_result(result, partition))
    pipeline.write_metrics_csv(result.metrics, out / artifacts["metrics"])
    last = result.metrics[-1] if result.metrics else {}
    print(f"moe: epoch {result.epoch}, train accuracy {last.get('accuracy', float('nan')):.4f}")
    return 0


def _load_models(path):
    ckpt = load_checkpoint(_require_file(path))
    return ckpt, pipeline.partition_from_checkpoint(ckpt), pipeline.moe_from_checkpoint(ckpt)


def cmd_explain(args, argv) -> int:
    ckpt, partition, moe = _load_models(args.checkpoint)
    data = read_dataset(_require_file(args.data))
    out = _out_dir(args.out)
    n_overlays = min(args.overlays, len(data))
    artifacts = {"importance": "importance.csv", "purity": "purity.csv"}
    artifacts.update({f"overlay_{i}": f"overlay_{i}.ppm" for i in range(n_overlays)})
    cfg = pipeline.config_from_checkpoint(ckpt)
    write_manifest(out / MANIFEST_NAME, argv, cfg.to_text(), cfg.seed, artifacts)

    report = explain.importance_table(partition, moe, data, gamma=cfg.gamma)
    (out / artifacts["importance"]).write_text(report.to_csv())
    purity, slot_of = explain.partition_purity(partition, data)
    lines = ["concept,majority_slot"] + [f"{j},{int(s)}" for j, s in enumerate(slot_of)]
    (out / artifacts["purity"]).write_text(f"# purity,{purity:.17g}\n" + "\n".join(lines) + "\n")
    for i in range(n_overlays):
        explain.partition_overlay(partition, data[i]).save(out / f"overlay_{i}.ppm")
    ranks = " ".join(f"{int(j)}:{report.mean_weights[j]:.4f}" for j in report.ranking)
    print(f"purity {purity:.4f}; importance {ranks}")
    return 0


def cmd_ablate(args, argv) -> int:
    ckpt, partition, moe = _load_models(args.checkpoint)
    data = read_dataset(_require_file(args.data))
    out = _out_dir(args.out)
    name = f"ablation_{args.mode}.csv"
    cfg = pipeline.config_from_checkpoint(ckpt)
    write_manifest(out / MANIFEST_NAME, argv, cfg.to_text(), cfg.seed, {"curve": name})
    report = explain.importance_table(partition, moe, data, gamma=cfg.gamma)
    curve = explain.ablation_curve(partition, moe, data, report, args.mode, args.mechanism)
    (out / name).write_text(curve.to_csv())
    print(" ".join(f"{n}:{acc:.4f}" for n, acc in curve.points))
    return 0


def cmd_eval(args, argv) -> int:
    ckpt, partition, moe = _load_models(args.checkpoint)
    data = read_dataset(_require_file(args.data))
    acc = pipeline.accuracy(partition, moe, data)
    if args.out:
        out = _out_dir(args.out)
        cfg = pipeline.config_from_checkpoint(ckpt)
        write_manifest(out / MANIFEST_NAME, argv, cfg.to_text(), cfg.seed, {"eval": "eval.csv"})
        (out / "eval.csv").write_text(f"samples,accuracy\n{len(data)},{acc:.17g}\n")
    print(f"accuracy {acc:.4f} on {len(data)} samples")
    return 0


def cmd_gradcheck(args, argv) -> int:
    from conceptmoe.gradcheck import TOLERANCE, run_suite

    if args.out:
        out = _out_dir(args.out)
        write_manifest(out / MANIFEST_NAME, argv, "", args.seed, {"gradcheck": "gradcheck.csv"})
    results = run_suite(seed=args.seed, instances=args.instances)
    for r in results:
        print(f"{r.name:24s} max_rel_err {r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    if args.out:
        rows = "".join(f"{r.name},{r.max_rel_error:.17g}\n" for r in results)
        (out / "gradcheck.csv").write_text("op,max_rel_error\n" + rows)
    worst = max(r.max_rel_error for r in results)
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if all(r.passed for r in results) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptmoe", description="Concept partition + mixture-of-experts toolkit")
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--spec", choices=sorted(PRESETS), default="default")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=None, help="overrides the preset's seed")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-partition", help="stage 1: backbone, concepts and partition head")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at-epoch", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_partition)

    p = sub.add_parser("train-moe", help="stage 2: experts and gate on a frozen partition")
    p.add_argument("--data", required=True)
    p.add_argument("--partition", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at-epoch", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_moe)

    p = sub.add_parser("explain", help="importance table, purity and partition overlays")
    p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlays", type=int, default=4, help="number of overlay images")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="accuracy while adding or removing important concepts")
    p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=explain.MODES, default="remove")
    p.add_argument("--mechanism", choices=explain.MECHANISMS, default=explain.ZERO_FEATURES)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out", default=None, help="optional directory for a CSV report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="test accuracy of a stage-2 checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, ["conceptmoe", *argv])
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConceptMoEError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
