"""Command-line entry point: ``contrastcam <command> --config cfg.yaml``.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .cam import ValidationError
from .datasets import SHIFT_MODES, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .evaluation import RunResult, evaluate_checkpoint, report_csv, report_text, subset_report
from .render import render_grid
from .training import MANIFEST_FILE, load_checkpoint, load_config, train_sweep

log = logging.getLogger("contrastcam")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args):
    try:
        return load_config(args.config, args.set or ())
    except (ValidationError, yaml.YAMLError, OSError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _require(value, what):
    if not value:
        raise UsageError(f"config key {what} is required for this command")
    return value


def cmd_synth_data(args):
    cfg = _config(args)
    opts = dict(cfg.synthetic)
    counts = opts.pop("count_per_class", 200)
    test_counts = opts.pop("test_count_per_class", counts)
    seed = opts.pop("seed", 0)
    shifts = opts.pop("test_shift_modes", list(SHIFT_MODES))
    try:
        base = SyntheticSpec(**{**opts, "shift_mode": "none"})
        if any(s not in SHIFT_MODES for s in shifts):
            raise ValidationError(f"test_shift_modes must be drawn from {SHIFT_MODES}")
    except (TypeError, ValidationError) as exc:
        raise UsageError(f"synthetic: {exc}") from exc
    if args.out:
        train_root, test_root = Path(args.out) / "train", Path(args.out) / "test"
    else:
        train_root = Path(_require(cfg.dataset_root, "dataset_root"))
        test_root = Path(_require(cfg.test_root, "test_root"))
    train = generate_synthetic(base, counts, seed, root=train_root, id_prefix="train-")
    test = []
    for i, mode in enumerate(shifts):
        spec = dataclasses.replace(base, shift_mode=mode)
        test += generate_synthetic(spec, test_counts, seed + 1000 + i, id_prefix=f"test-{mode}-")
    save_dataset(test, test_root, {"spec": dataclasses.asdict(base), "shift_modes": list(shifts)})
    print(f"wrote {len(train)} training samples to {train_root} and {len(test)} test samples to {test_root}")


def _run_training(args, fooling):
    cfg = _config(args)
    if fooling:
        try:
            cfg = dataclasses.replace(cfg, fooling=True)
        except ValidationError as exc:
            raise UsageError(str(exc)) from exc
    if args.out:
        cfg.output_dir = args.out
    _require(cfg.output_dir, "output_dir")
    dataset = load_dataset(_require(cfg.dataset_root, "dataset_root"))
    arts = train_sweep(cfg, dataset)
    summary = {
        "method": cfg.method,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.to_mapping(),
        "runs": [
            {"seed": a.seed, "checkpoint": str(a.final_checkpoint), "final_loss": a.per_epoch_train_loss[-1],
             "train_accuracy": a.train_accuracy}
            for a in arts
        ],
    }
    out = Path(cfg.output_dir)
    (out / "sweep.json").write_text(json.dumps(summary, indent=1, default=str))
    for a in arts:
        print(f"seed {a.seed}: final loss {a.per_epoch_train_loss[-1]:.6f}, train acc {a.train_accuracy:.3f}")


def cmd_train(args):
    _run_training(args, fooling=False)


def cmd_fool(args):
    _run_training(args, fooling=True)


def _seed_dirs(run_dir: Path):
    dirs = sorted(
        (p for p in run_dir.glob("seed_*") if (p / MANIFEST_FILE).is_file()),
        key=lambda p: int(p.name.split("_", 1)[1]),
    )
    if not dirs:
        raise ValidationError(f"no trained seeds under {run_dir}")
    return dirs


def cmd_eval(args):
    cfg = _config(args)
    run_dir = Path(args.out or _require(cfg.output_dir, "output_dir"))
    dataset = load_dataset(_require(cfg.test_root, "test_root"))
    subsets = sorted({s.subset for s in dataset})
    summary = {"method": cfg.method, "test_root": str(cfg.test_root), "seeds": {}}
    for seed in cfg.seeds:
        ckpt = run_dir / f"seed_{seed}"
        result = evaluate_checkpoint(ckpt, dataset, arch=cfg.model_arch)
        result.to_csv(run_dir / "eval" / f"scores_seed_{seed}.csv")
        per_subset = {s: result.auroc(s) for s in subsets} if len(subsets) > 1 else {}
        summary["seeds"][str(seed)] = {"overall": result.auroc(), **per_subset}
        print(f"seed {seed}: AUROC {result.auroc():.4f}")
    (run_dir / "eval" / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))


def _load_results(run_dir: Path):
    method = None
    results = []
    for seed_dir in _seed_dirs(run_dir):
        manifest = json.loads((seed_dir / MANIFEST_FILE).read_text())
        method = method or manifest.get("method") or manifest["variant"]
        scores = run_dir / "eval" / f"scores_seed_{manifest['seed']}.csv"
        if not scores.is_file():
            raise ValidationError(f"{scores} missing; run `contrastcam eval` first")
        results.append(RunResult.from_csv(scores, seed=manifest["seed"], method=method))
    return method, results


def cmd_report(args):
    if not args.runs:
        raise UsageError("report needs at least one --runs directory")
    out = Path(args.out or "report")
    results = {}
    for run_dir in args.runs:
        method, runs = _load_results(Path(run_dir))
        if method in results:
            raise ValidationError(f"two run directories share method name {method!r}")
        results[method] = runs
    rows = subset_report(results, subsets=args.subsets)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(rows))
    text = report_text(rows)
    (out / "report.txt").write_text(text)
    print(text, end="")


def cmd_render(args):
    if not args.samples:
        raise UsageError("render needs at least one --samples id")
    if not args.out:
        raise UsageError("render needs --out <file.png>")
    model, manifest = load_checkpoint(args.checkpoint)
    dataset = {s.sample_id: s for s in load_dataset(args.dataset)}
    unknown = [sid for sid in args.samples if sid not in dataset]
    if unknown:
        raise ValidationError(f"unknown sample_id(s): {', '.join(unknown)}")
    path = render_grid(model, [dataset[s] for s in args.samples], args.out, arch=manifest["arch"], scale=args.scale)
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with status 2 on bad arguments, matching EXIT_USAGE
    parser = argparse.ArgumentParser(prog="contrastcam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path, help="YAML/JSON experiment config")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory (or file for render)")

    for name, func, helptext in [
        ("synth-data", cmd_synth_data, "generate the synthetic train/test datasets"),
        ("train", cmd_train, "train one model per seed"),
        ("fool", cmd_fool, "train with passive fooling (edge-band heatmaps)"),
        ("eval", cmd_eval, "score every seed's checkpoint on test_root"),
    ]:
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate eval scores into a subset x method AUROC table")
    common(p, config=False)
    p.add_argument("--runs", nargs="+", help="run directories (one per method)")
    p.add_argument("--subsets", nargs="+", help="restrict to these subset tags")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("render", help="draw input / true CAM / false CAM / Difference Salience rows")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True, help="seed directory or model.pt")
    p.add_argument("--dataset", required=True, help="dataset root holding the samples")
    p.add_argument("--samples", nargs="+", help="sample ids, one grid row each")
    p.add_argument("--scale", type=int, default=4, help="pixel replication factor for the output")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"contrastcam: usage error: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any failure
        log.debug("failure", exc_info=True)
        print(f"contrastcam: error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
