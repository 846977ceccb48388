"""Experiment command line: synthesize, train-source, adapt, report.

A single YAML document declares the experiment; CLI flags override file
values and the merged effective config is persisted next to the results.
Exit codes: 0 success; otherwise a machine-readable error category is
printed to stderr (config=2, dataset=3, input=4, checkpoint=5).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import yaml

from . import degrade
from .datasets import load_dataset, make_shapes_dataset, save_dataset
from .engine import AdaptationConfig, run_continual
from .errors import ConfigurationError, ContdaError
from .models import SourceConfig, evaluate_accuracy, load_checkpoint, save_checkpoint, train_source
from .results import (
    RunResult,
    build_report,
    plot_accuracy_comparison,
    read_results_csv,
    summarize_rows,
    write_report_csv,
    write_results_csv,
)

EXIT_CODES = {"config": 2, "dataset": 3, "input": 4, "checkpoint": 5}

DEFAULT_CONFIG = {
    "data_root": None,
    "synth_root": None,
    "output_dir": "runs",
    "checkpoint": None,
    "seeds": [0],
    "grad_norm": [True],
    "degradation": {"kind": "cloud_cover", "seed": 0, "levels": None},
    "source": {
        "backbone": "compact_conv",
        "epochs": 30,
        "eta0": 0.01,
        "momentum": 0.9,
        "batch_size": 64,
        "smoothing": 0.1,
        "seed": 0,
    },
    "adaptation": {
        "method": "conda",
        "eta0": 0.002,
        "momentum": 0.9,
        "chunk_size": 256,
        "epochs_per_chunk": 15,
        "minibatch_size": 64,
        "grad_norm_scope": "global",
        "buffer_capacity": 420,
        "buffer_policy": "auto",
        "beta": 0.3,
        "lam": 1.0,
        "tau": 0.1,
        "refine_rounds": 2,
        "bn_update": True,
    },
}


def _merge_checked(defaults: dict, overrides: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigurationError(f"unknown config key: {prefix}{key}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge_checked(defaults[key], value, prefix=f"{prefix}{key}.")
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file must be a mapping: {path}")
    return _merge_checked(DEFAULT_CONFIG, raw)


def _apply_flag_overrides(config: dict, args: argparse.Namespace) -> dict:
    flag_map = {
        "data_root": ("data_root",),
        "synth_root": ("synth_root",),
        "output_dir": ("output_dir",),
        "checkpoint": ("checkpoint",),
        "kind": ("degradation", "kind"),
        "method": ("adaptation", "method"),
        "eta0": ("adaptation", "eta0"),
        "buffer_size": ("adaptation", "buffer_capacity"),
        "chunk_size": ("adaptation", "chunk_size"),
        "epochs_per_chunk": ("adaptation", "epochs_per_chunk"),
    }
    for flag, keys in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = config
        for key in keys[:-1]:
            target = target[key]
        target[keys[-1]] = value
    if getattr(args, "seed", None) is not None:
        config["seeds"] = [args.seed]
    grad_norm = getattr(args, "grad_norm", None)
    if grad_norm is not None:
        config["grad_norm"] = (
            [True, False] if grad_norm == "both" else [grad_norm == "on"]
        )
    return config


def _build_schedule(config: dict) -> degrade.DegradationSchedule:
    deg = config["degradation"]
    if deg["levels"] is not None:
        cls = degrade.CloudParams if deg["kind"] == "cloud_cover" else degrade.SnowParams
        levels = [cls(**lv) for lv in deg["levels"]]
        return degrade.DegradationSchedule(deg["kind"], levels, deg["seed"])
    if deg["kind"] == "cloud_cover":
        return degrade.default_cloud_schedule(deg["seed"])
    if deg["kind"] == "snowfall":
        return degrade.default_snow_schedule(deg["seed"])
    raise ConfigurationError(f"unknown degradation kind: {deg['kind']}")


def _require(config: dict, key: str) -> str:
    if config.get(key) is None:
        raise ConfigurationError(f"config value {key!r} is required for this command")
    return config[key]


def _persist_effective_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_effective.yaml").write_text(yaml.safe_dump(config, sort_keys=True))


def cmd_make_demo_data(args) -> int:
    dataset = make_shapes_dataset(args.num_per_class, args.seed, args.image_size)
    save_dataset(dataset, args.output_dir)
    print(f"wrote {len(dataset)} images to {args.output_dir}")
    return 0


def cmd_synthesize(args) -> int:
    config = _apply_flag_overrides(load_config(args.config), args)
    clean = load_dataset(_require(config, "data_root"))
    schedule = _build_schedule(config)
    sequence = degrade.build_domain_sequence(clean, schedule)
    synth_root = Path(config["synth_root"] or Path(config["output_dir"]) / "domains")
    manifest_path = degrade.save_domain_sequence(sequence, synth_root)
    _persist_effective_config(config, Path(config["output_dir"]))
    print(f"wrote {len(sequence.domains)} domains under {synth_root}")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_train_source(args) -> int:
    config = _apply_flag_overrides(load_config(args.config), args)
    clean = load_dataset(_require(config, "data_root"))
    source_cfg = SourceConfig(**config["source"])
    if getattr(args, "seed", None) is not None:
        source_cfg.seed = args.seed
    model = train_source(clean, source_cfg)
    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(config["checkpoint"] or out_dir / "source.pt")
    save_checkpoint(model, ckpt)
    metrics = {
        "train_accuracy": evaluate_accuracy(model, clean),
        "classes": model.class_names,
        "provenance": model.provenance,
    }
    (out_dir / "source_metrics.json").write_text(json.dumps(metrics, indent=2))
    _persist_effective_config(config, out_dir)
    print(f"source checkpoint: {ckpt} (train accuracy {metrics['train_accuracy']:.4f})")
    return 0


def cmd_adapt(args) -> int:
    config = _apply_flag_overrides(load_config(args.config), args)
    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    clean = load_dataset(_require(config, "data_root"))
    synth_root = Path(config["synth_root"] or out_dir / "domains")
    sequence = degrade.load_domain_sequence(synth_root, clean)
    ckpt = Path(config["checkpoint"] or out_dir / "source.pt")
    if not ckpt.is_file():
        raise ConfigurationError(f"source checkpoint not found: {ckpt}")

    rows = []
    for seed in config["seeds"]:
        traces_by_setting = {}
        for grad_norm in config["grad_norm"]:
            model = load_checkpoint(ckpt, expected_class_names=clean.class_names)
            adapt_cfg = AdaptationConfig(
                **config["adaptation"], grad_norm=grad_norm, seed=seed
            )
            trace = run_continual(model, sequence, adapt_cfg)
            tag = f"{adapt_cfg.method}_gn{'on' if grad_norm else 'off'}_seed{seed}"
            trace.save_jsonl(out_dir / f"trace_{tag}.jsonl")
            trace.save_summary(out_dir / f"summary_{tag}.json")
            traces_by_setting[grad_norm] = trace
            rows.append(
                RunResult(
                    method=adapt_cfg.method,
                    backbone=model.encoder.backbone_name,
                    eta0=adapt_cfg.eta0,
                    grad_norm=grad_norm,
                    seed=seed,
                    final_accuracy=trace.final_accuracy,
                    chunk_accuracies=trace.chunk_accuracies(),
                )
            )
            print(
                f"run {tag}: initial {trace.initial_accuracy:.4f} "
                f"-> final {trace.final_accuracy:.4f}"
            )
        plot_accuracy_comparison(
            traces_by_setting,
            out_dir / f"plot_seed{seed}.png",
            title=f"{config['adaptation']['method']} seed {seed}",
        )

    write_results_csv(rows, out_dir / "results.csv")
    summary = summarize_rows(rows)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    _persist_effective_config(config, out_dir)
    print(f"results: {out_dir / 'results.csv'}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.results:
        rows.extend(read_results_csv(path))
    text, csv_rows = build_report(rows)
    print(text)
    if args.output_dir is not None:
        out_dir = Path(args.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text + "\n")
        write_report_csv(csv_rows, out_dir / "report.csv")
        print(f"report written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contda",
        description="Continual source-free adaptation under degrading weather",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--data-root", dest="data_root")
        p.add_argument("--synth-root", dest="synth_root")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("make-demo-data", help="generate a toy 4-class shape dataset")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--num-per-class", type=int, default=125)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_demo_data)

    p = sub.add_parser("synthesize", help="build degraded domains from a clean dataset")
    common(p)
    p.add_argument("--kind", choices=["cloud_cover", "snowfall"])
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train-source", help="train the source model")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="run continual adaptation over the domain stream")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=["cshot", "conda", "uclgv"])
    p.add_argument("--grad-norm", dest="grad_norm", choices=["on", "off", "both"])
    p.add_argument("--eta0", type=float)
    p.add_argument("--buffer-size", dest="buffer_size", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--epochs-per-chunk", dest="epochs_per_chunk", type=int)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("report", help="aggregate results files into a comparison table")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContdaError as err:
        payload = {"error_category": err.category, "message": str(err)}
        print(json.dumps(payload), file=sys.stderr)
        return EXIT_CODES.get(err.category, 1)


if __name__ == "__main__":
    sys.exit(main())
