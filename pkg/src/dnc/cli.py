"""Command line entry points for the divide-and-contrast pipeline.

Every command exits 0 on success, 2 on a configuration problem, 3 on a
missing or mismatched prerequisite artifact, and 4 on a numeric failure.
Stage commands share a run directory and can be chained::

    dnc synth data/toy --kind uncurated --total 256
    dnc run --config run.json
    dnc probe --config run.json
    dnc report runs/toy --out reports/toy

or run stage by stage (``train-base``, ``cluster``, ``train-experts``,
``distill``) for inspection between stages.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig, config_digest, config_from_dict, config_to_dict, load_config
from .data import save_dataset, synth_curated, synth_uncurated
from .errors import ConfigError, DncError, FormatError, NumericError, PrerequisiteError
from .evaluation import emit_report, linear_probe
from .pipeline import (
    ABLATION_VARIANTS,
    expert_checkpoint_path,
    load_checkpoint,
    materialize_data,
    run_ablation,
    run_dnc,
    run_stages,
    stage1_checkpoint_path,
    student_checkpoint_path,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_NUMERIC = 4


def _print(payload) -> None:
    json.dump(payload, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")


def _apply_overrides(payload: dict, pairs) -> dict:
    """Apply ``dotted.key=value`` overrides to a config mapping.

    Values parse as JSON when possible and fall back to bare strings, so
    ``schedule.n1=40`` and ``partitioning=random`` both work.
    """
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = value
    return payload


def _load_run_config(args) -> RunConfig:
    if args.config.startswith("preset:"):
        from .presets import load_preset

        cfg = load_preset(args.config[len("preset:"):])
    else:
        cfg = load_config(args.config)
    payload = config_to_dict(cfg)
    _apply_overrides(payload, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
    if getattr(args, "output_dir", None) is not None:
        payload["output_dir"] = args.output_dir
    if getattr(args, "workers", None) is not None:
        payload["workers"] = args.workers
    cfg = config_from_dict(payload)
    cfg.validate()
    return cfg


def _run_dir(cfg: RunConfig, args) -> str:
    return args.run_dir if getattr(args, "run_dir", None) else cfg.output_dir


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--run-dir", help="run directory (default: config output_dir)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--output-dir", help="override config output_dir")
    p.add_argument("--workers", type=int, help="override config workers")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config field, e.g. --set schedule.n1=40",
    )


def cmd_synth(args) -> int:
    size = tuple(args.size) if len(args.size) == 2 else (args.size[0], args.size[0])
    spec = (size[0], size[1], args.channels)
    rng = np.random.default_rng(args.seed)
    if args.kind == "curated":
        ds = synth_curated(
            args.classes,
            args.per_class,
            image_spec=spec,
            class_separation=args.separation,
            noise_std=args.noise,
            rng=rng,
        )
    else:
        ds = synth_uncurated(
            args.classes,
            args.total,
            zipf_exponent=args.zipf,
            image_spec=spec,
            class_separation=args.separation,
            noise_std=args.noise,
            rng=rng,
        )
    save_dataset(ds, args.out, fmt=args.format)
    _print(
        {
            "out": args.out,
            "kind": args.kind,
            "items": len(ds),
            "num_classes": ds.num_classes,
            "class_sizes": ds.histogram().tolist(),
            "image_shape": list(ds.image_shape),
        }
    )
    return EXIT_OK


def _stage_command(stages):
    def run(args) -> int:
        cfg = _load_run_config(args)
        summary = run_stages(cfg, stages, run_dir=_run_dir(cfg, args))
        _print(summary)
        return EXIT_OK

    return run


def cmd_run(args) -> int:
    cfg = _load_run_config(args)
    summary = run_dnc(cfg, run_dir=_run_dir(cfg, args))
    _print(summary)
    return EXIT_OK


def _checkpoint_for(args, run_dir: str, cfg: RunConfig) -> str:
    if args.checkpoint:
        return args.checkpoint
    if args.stage == "stage1":
        return stage1_checkpoint_path(run_dir)
    if args.stage == "stage3":
        return student_checkpoint_path(run_dir)
    if args.stage.startswith("expert-"):
        suffix = args.stage.split("-", 1)[1]
        if suffix.isdigit():
            return expert_checkpoint_path(run_dir, int(suffix))
    raise ConfigError(f"unknown stage {args.stage!r}; use stage1, stage3, or expert-<k>")


def cmd_probe(args) -> int:
    cfg = _load_run_config(args)
    run_dir = _run_dir(cfg, args)
    path = _checkpoint_for(args, run_dir, cfg)
    if not os.path.isfile(path):
        raise PrerequisiteError(f"checkpoint missing: {path}")
    ckpt = load_checkpoint(path)
    data = materialize_data(cfg.data)
    train, test = data["probe_train"], data["probe_test"]
    if train is None or test is None:
        raise PrerequisiteError("probe needs probe_train/probe_test splits in the data config")
    result = linear_probe(ckpt.state, train, test, cfg.probe)
    payload = result.to_dict()
    payload["checkpoint"] = path
    out = args.out or os.path.join(run_dir, "probe.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _print(payload)
    return EXIT_OK


def cmd_report(args) -> int:
    paths = emit_report(args.run_dirs, out_dir=args.out)
    _print(paths)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    records = run_ablation(
        cfg,
        variants=args.variants,
        seeds=args.seeds,
        root_dir=args.root,
        workers=cfg.workers if args.workers is None else args.workers,
        probe=not args.no_probe,
    )
    _print(records)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--kind", choices=("curated", "uncurated"), default="curated")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=32, help="items per class (curated)")
    p.add_argument("--total", type=int, default=256, help="total items (uncurated)")
    p.add_argument("--zipf", type=float, default=1.0, help="tail exponent (uncurated)")
    p.add_argument("--size", type=int, nargs="+", default=[24], help="image height [width]")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("packed", "png"), default="packed")
    p.set_defaults(func=cmd_synth)

    for name, stages, desc in (
        ("train-base", ("stage1",), "contrastive pretraining of the base model"),
        ("cluster", ("clusters",), "cluster base representations into K groups"),
        ("train-experts", ("stage2",), "train one expert per cluster"),
        ("distill", ("stage3",), "distill base + experts into the student"),
    ):
        p = sub.add_parser(name, help=desc)
        _add_config_args(p)
        p.set_defaults(func=_stage_command(stages))

    p = sub.add_parser("run", help="run all stages end to end (resumable)")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("probe", help="linear evaluation of a checkpoint")
    _add_config_args(p)
    p.add_argument(
        "--stage",
        default="stage3",
        help="which run checkpoint to probe: stage1, stage3, or expert-<k>",
    )
    p.add_argument("--checkpoint", help="explicit checkpoint path (overrides --stage)")
    p.add_argument("--out", help="where to write probe.json (default: run dir)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="aggregate run directories into figures + summary")
    p.add_argument("run_dirs", nargs="+", help="one or more run directories")
    p.add_argument("--out", help="report output directory (default: first run dir)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="train and probe a grid of pipeline variants")
    _add_config_args(p)
    p.add_argument("--root", required=True, help="root directory for the grid")
    p.add_argument(
        "--variants",
        nargs="+",
        default=list(ABLATION_VARIANTS),
        choices=list(ABLATION_VARIANTS),
    )
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--no-probe", action="store_true", help="skip linear probes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, FormatError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DncError as exc:  # fallback for future subclasses
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
