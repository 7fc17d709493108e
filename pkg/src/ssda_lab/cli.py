"""Command-line orchestration for data generation, training stages, and ablations.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
Config precedence: built-in defaults < JSON config file (--config) < flags.
``SSDA_LAB_THREADS`` caps worker processes for ablation grids (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .datasets import (
    DataError,
    DomainPairSpec,
    ShiftSpec,
    SSDASplit,
    default_benchmark_spec,
    gen_split,
    load_split,
    save_split,
    split_checksum,
)
from .network import forward_features, load_checkpoint, save_checkpoint
from .pseudolabel import (
    infer_pseudo,
    load_selection,
    reliability,
    save_selection,
    select,
    selected_set_from_dump,
    selection_to_jsonable,
)
from .trainer import (
    TrainConfig,
    evaluate,
    progressive_self_train,
    save_report,
    train_baseline,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ConfigError(Exception):
    pass


# -- config assembly --

_CONFIG_FIELDS = {f.name for f in fields(TrainConfig)}


def _config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with TrainConfig overrides")
    parser.add_argument("--lambda", dest="lambda_", type=float, help="entropy weight")
    parser.add_argument("--r-u", dest="r_u", type=float, help="pseudo-label selection ratio")
    parser.add_argument("--label-momentum", dest="label_momentum", type=float)
    parser.add_argument("--hard-labels", dest="use_hard_labels", action="store_true", default=None)
    parser.add_argument("--base-lr", dest="base_lr", type=float)
    parser.add_argument("--t-max", dest="t_max", type=int)
    parser.add_argument("--t-val", dest="t_val", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--seed", type=int)


def build_config(args: argparse.Namespace) -> TrainConfig:
    """defaults < --config file < explicit flags; validated before use."""
    values = asdict(TrainConfig())
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        unknown = set(overrides) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        values.update(overrides)
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    values["hidden_dims"] = tuple(values["hidden_dims"])
    config = TrainConfig(**values)
    try:
        config.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return config


def _print_effective_config(config: TrainConfig) -> None:
    print("effective config: " + json.dumps(asdict(config), sort_keys=True))


def _load_split_or_fail(path: str) -> SSDASplit:
    return load_split(path)


def _anchor_features(split: SSDASplit, params) -> dict[int, np.ndarray]:
    return {c: forward_features(x, params) for c, x in split.labeled_target_by_class().items()}


# -- manifest --


def _write_manifest(out_dir: Path, command: str, config: TrainConfig | None,
                    split_dir: str | None, artifacts: dict, timings: dict) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": asdict(config) if config is not None else None,
        "split_checksum": split_checksum(split_dir) if split_dir else None,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "timings_s": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# -- pipeline pieces shared by commands --


def _run_baseline(split: SSDASplit, config: TrainConfig, out: Path, tag: str = "baseline"):
    params, report = train_baseline(split, config, unlabeled_truth=None)
    report.final_test_acc = evaluate(params, split.unlabeled_x(), split.unlabeled_truth)
    ckpt = out / f"{tag}_checkpoint.json"
    save_checkpoint(ckpt, params, extra={"stage": tag, "config": asdict(config)})
    save_report(report, out / f"{tag}_report.json", out / f"{tag}_report.csv")
    return params, report, ckpt


def _run_selection(split: SSDASplit, params, config: TrainConfig, out: Path):
    annotations = infer_pseudo(params, split.unlabeled_x())
    anchors = _anchor_features(split, params)
    selected = select(annotations, anchors, config.r_u, len(split.unlabeled_target), split.n_classes)
    rel_before = reliability(annotations, split.unlabeled_truth)
    rel_after = reliability(selected.annotations, split.unlabeled_truth)
    dump = selection_to_jsonable(selected, annotations, rel_before, rel_after)
    save_selection(out / "selection.json", dump)
    return selected, rel_before, rel_after


def _run_selftrain(split: SSDASplit, selected, params, config: TrainConfig, out: Path):
    final_params, report = progressive_self_train(
        split, selected, params, config, unlabeled_truth=split.unlabeled_truth
    )
    report.final_test_acc = evaluate(final_params, split.unlabeled_x(), split.unlabeled_truth)
    ckpt = out / "final_checkpoint.json"
    save_checkpoint(ckpt, final_params, extra={"stage": "selftrain", "config": asdict(config)})
    save_report(report, out / "final_report.json", out / "final_report.csv")
    return final_params, report, ckpt


# -- commands --


def cmd_gen_data(args) -> int:
    translation = tuple(float(v) for v in args.translation.split(",")) if args.translation else ()
    spec = DomainPairSpec(
        n_classes=args.classes,
        input_dim=args.dim,
        n_source=args.n_source,
        n_target=args.n_target,
        class_separation=args.separation,
        shift=ShiftSpec(
            rotation_degrees=args.rotation,
            translation=translation,
            scale=args.scale,
            label_skew=args.skew,
        ),
        seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    split = gen_split(spec, n_t_per_class=args.shots, n_val_per_class=args.val_per_class)
    manifest_path = save_split(split, args.out)
    print(f"wrote split to {args.out} ({len(split.labeled_target)} labeled target, "
          f"{len(split.unlabeled_target)} unlabeled, checksum {split_checksum(args.out)[:12]})")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    config = build_config(args)
    _print_effective_config(config)
    split = _load_split_or_fail(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    params, report, ckpt = _run_baseline(split, config, out)
    _write_manifest(out, "train-baseline", config, args.split,
                    {"checkpoint": ckpt, "report_csv": out / "baseline_report.csv"},
                    {"train": time.perf_counter() - t0})
    print(f"baseline: stop={report.stop_reason} best_val={report.best_val_acc:.4f} "
          f"test_acc={report.final_test_acc:.4f}")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    config = build_config(args)
    _print_effective_config(config)
    split = _load_split_or_fail(args.split)
    record = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    selected, rel_before, rel_after = _run_selection(split, record["params"], config, out)
    print(f"selected {len(selected)} of {len(split.unlabeled_target)} "
          f"(quota {selected.per_class_quota}/class, r_u={config.r_u})")
    print(f"reliability: {100 * rel_before:.1f} -> {100 * rel_after:.1f}")
    return EXIT_OK


def cmd_self_train(args) -> int:
    config = build_config(args)
    _print_effective_config(config)
    split = _load_split_or_fail(args.split)
    record = load_checkpoint(args.checkpoint)
    selected = selected_set_from_dump(load_selection(args.selection))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    _, report, ckpt = _run_selftrain(split, selected, record["params"], config, out)
    _write_manifest(out, "self-train", config, args.split,
                    {"checkpoint": ckpt, "report_csv": out / "final_report.csv"},
                    {"train": time.perf_counter() - t0})
    print(f"self-train: stop={report.stop_reason} best_val={report.best_val_acc:.4f} "
          f"test_acc={report.final_test_acc:.4f}")
    return EXIT_OK


def cmd_run_pipeline(args) -> int:
    config = build_config(args)
    _print_effective_config(config)
    split = _load_split_or_fail(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    artifacts: dict = {}

    t0 = time.perf_counter()
    params, base_report, base_ckpt = _run_baseline(split, config, out)
    timings["stage1"] = time.perf_counter() - t0
    artifacts["baseline_checkpoint"] = base_ckpt
    artifacts["baseline_report_csv"] = out / "baseline_report.csv"

    if args.no_pseudo:
        _write_manifest(out, "run-pipeline", config, args.split, artifacts, timings)
        print(f"final accuracy (baseline only, no pseudo stages): {base_report.final_test_acc:.4f}")
        return EXIT_OK

    t0 = time.perf_counter()
    selected, rel_before, rel_after = _run_selection(split, params, config, out)
    timings["stage2"] = time.perf_counter() - t0
    artifacts["selection"] = out / "selection.json"

    t0 = time.perf_counter()
    _, final_report, final_ckpt = _run_selftrain(split, selected, params, config, out)
    timings["stage3"] = time.perf_counter() - t0
    artifacts["final_checkpoint"] = final_ckpt
    artifacts["final_report_csv"] = out / "final_report.csv"

    _write_manifest(out, "run-pipeline", config, args.split, artifacts, timings)
    print(f"reliability before/after selection: {100 * rel_before:.1f} -> {100 * rel_after:.1f}")
    print(f"baseline accuracy: {base_report.final_test_acc:.4f}")
    print(f"final accuracy: {final_report.final_test_acc:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    split = _load_split_or_fail(args.split)
    record = load_checkpoint(args.checkpoint)
    acc = evaluate(record["params"], split.unlabeled_x(), split.unlabeled_truth)
    print(f"accuracy on unlabeled target: {acc:.4f}")
    return EXIT_OK


# -- ablation grids --


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("SSDA_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _pipeline_cell(task: tuple) -> tuple:
    """One (arm, seed) cell; top-level so process pools can pickle it."""
    split_dir, seed, overrides, regen = task
    if regen:
        base = load_split(split_dir)
        spec = replace(base.spec, seed=seed)
        split = gen_split(spec, base.n_t_per_class, base.n_val_per_class)
    else:
        split = load_split(split_dir)
    config_fields = {k: v for k, v in overrides.items() if not k.startswith("_")}
    config = TrainConfig(**{**asdict(TrainConfig()), **config_fields, "seed": seed})
    config.hidden_dims = tuple(config.hidden_dims)
    params, _ = train_baseline(split, config)
    if overrides.get("_no_pseudo"):
        acc = evaluate(params, split.unlabeled_x(), split.unlabeled_truth)
        return seed, overrides.get("_tag", ""), acc
    annotations = infer_pseudo(params, split.unlabeled_x())
    anchors = {c: forward_features(x, params) for c, x in split.labeled_target_by_class().items()}
    selected = select(annotations, anchors, config.r_u, len(split.unlabeled_target), split.n_classes)
    final, _ = progressive_self_train(split, selected, params, config)
    acc = evaluate(final, split.unlabeled_x(), split.unlabeled_truth)
    return seed, overrides.get("_tag", ""), acc


def _run_cells(tasks: list[tuple]) -> list[tuple]:
    workers = _max_workers()
    if workers == 1:
        results = [_pipeline_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_pipeline_cell, tasks))
    return sorted(results)


def _parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError as err:
        raise ConfigError(f"bad --seeds list: {raw!r}") from err
    if not seeds:
        raise ConfigError("empty --seeds list")
    return seeds


def cmd_ablate_ru(args) -> int:
    config = build_config(args)
    _print_effective_config(config)
    seeds = _parse_seeds(args.seeds)
    try:
        grid = [float(v) for v in args.grid.split(",")]
    except ValueError as err:
        raise ConfigError(f"bad --grid list: {args.grid!r}") from err
    if any(not 0.0 < r <= 1.0 for r in grid):
        raise ConfigError("grid values must lie in (0, 1]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base_overrides = {k: v for k, v in asdict(config).items()}
    tasks = []
    for r_u in grid:
        for seed in seeds:
            overrides = dict(base_overrides)
            overrides["r_u"] = r_u
            overrides["_tag"] = repr(r_u)
            tasks.append((args.split, seed, overrides, args.regen))
    results = _run_cells(tasks)

    rows = sorted((float(tag), seed, acc) for seed, tag, acc in results)
    lines = ["r_u,seed,accuracy"] + [f"{r!r},{s},{a!r}" for r, s, a in rows]
    (out / "ru_sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary = []
    for r_u in sorted(set(grid)):
        accs = [a for r, _, a in rows if r == r_u]
        summary.append((r_u, float(np.mean(accs)), float(np.std(accs))))
    best = max(summary, key=lambda t: t[1])[0]
    slines = ["r_u,mean_accuracy,std_accuracy,best"]
    for r_u, mean, std in summary:
        slines.append(f"{r_u!r},{mean!r},{std!r},{'*' if r_u == best else ''}")
    (out / "ru_summary.csv").write_text("\n".join(slines) + "\n", encoding="utf-8")

    for r_u, mean, std in summary:
        marker = "  <- best" if r_u == best else ""
        print(f"r_u={r_u}: mean={mean:.4f} std={std:.4f}{marker}")
    _write_manifest(out, "ablate-ru", config, args.split,
                    {"sweep": out / "ru_sweep.csv", "summary": out / "ru_summary.csv"}, {})
    return EXIT_OK


def cmd_ablate_noise(args) -> int:
    config = build_config(args)
    _print_effective_config(config)
    seeds = _parse_seeds(args.seeds)
    if len(seeds) < 2:
        raise ConfigError("ablate-noise needs at least 2 seeds")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base_overrides = asdict(config)
    arms = {
        "progressive": {"use_hard_labels": False, "label_momentum": config.label_momentum},
        "vanilla": {"use_hard_labels": True, "label_momentum": 1.0},
    }
    tasks = []
    for tag, arm in arms.items():
        for seed in seeds:
            overrides = {**base_overrides, **arm, "_tag": tag}
            tasks.append((args.split, seed, overrides, args.regen))
    results = _run_cells(tasks)

    by_arm: dict[str, dict[int, float]] = {"progressive": {}, "vanilla": {}}
    for seed, tag, acc in results:
        by_arm[tag][seed] = acc
    lines = ["seed,progressive_accuracy,vanilla_accuracy,paired_difference"]
    diffs = []
    for seed in sorted(seeds):
        p, v = by_arm["progressive"][seed], by_arm["vanilla"][seed]
        diffs.append(p - v)
        lines.append(f"{seed},{p!r},{v!r},{p - v!r}")
    (out / "noise_ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    mean_diff = float(np.mean(diffs))
    print(f"paired mean difference (progressive - vanilla): {mean_diff:+.4f} over {len(seeds)} seeds")
    _write_manifest(out, "ablate-noise", config, args.split,
                    {"table": out / "noise_ablation.csv"}, {})
    return EXIT_OK


def cmd_report_reliability(args) -> int:
    dump = load_selection(args.selection)
    if args.split:
        split = _load_split_or_fail(args.split)
        truth = split.unlabeled_truth
        selected_ids = {a["index"] for a in dump["annotations"] if a["selected"]}
        hits_all = [a["hard_label"] == int(truth[a["index"]]) for a in dump["annotations"]]
        hits_sel = [
            a["hard_label"] == int(truth[a["index"]])
            for a in dump["annotations"]
            if a["index"] in selected_ids
        ]
        before = float(np.mean(hits_all))
        after = float(np.mean(hits_sel))
    else:
        before, after = dump.get("reliability_before"), dump.get("reliability_after")
        if before is None or after is None:
            raise DataError("selection dump has no stored reliability; pass --split for ground truth")
    print(f"{100 * before:.1f} -> {100 * after:.1f}")
    if args.csv:
        Path(args.csv).write_text(
            f"metric,value\nreliability_before,{before!r}\nreliability_after,{after!r}\n",
            encoding="utf-8",
        )
    return EXIT_OK


# -- parser --


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssda-lab",
        description="Three-stage semi-supervised domain adaptation on synthetic benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and serialize a benchmark split")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--n-source", dest="n_source", type=int, default=500)
    p.add_argument("--n-target", dest="n_target", type=int, default=500)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--rotation", type=float, default=30.0)
    p.add_argument("--translation", default="1,1")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--skew", type=float, default=0.0)
    p.add_argument("--shots", type=int, choices=(1, 3), default=3)
    p.add_argument("--val-per-class", dest="val_per_class", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-baseline", help="stage 1: minimax-entropy baseline")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("pseudo-label", help="stage 2: infer and select pseudo labels")
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("self-train", help="stage 3: progressive self-training")
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_self_train)

    p = sub.add_parser("run-pipeline", help="stages 1-3 end to end")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-pseudo", dest="no_pseudo", action="store_true",
                   help="stop after stage 1 (with --lambda 0 this is the S+T arm)")
    _config_flags(p)
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on the unlabeled target")
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-ru", help="selection-ratio sweep")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="0.01,0.05,0.2,0.5,1.0")
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--regen", action="store_true",
                   help="regenerate the split per seed from its spec instead of reusing the data")
    _config_flags(p)
    p.set_defaults(func=cmd_ablate_ru)

    p = sub.add_parser("ablate-noise", help="progressive soft labels vs frozen hard labels")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--regen", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_ablate_noise)

    p = sub.add_parser("report-reliability", help="before/after selection reliability")
    p.add_argument("--selection", required=True)
    p.add_argument("--split", help="split dir for ground truth (otherwise use stored values)")
    p.add_argument("--csv", help="also write the table to this CSV path")
    p.set_defaults(func=cmd_report_reliability)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001 - map anything else to the runtime code
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
