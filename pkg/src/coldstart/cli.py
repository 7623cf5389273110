"""Command-line entry point.

Subcommands mirror the experiment stages; every config key can be
overridden with repeated `--set dotted.key=value` flags. Exit codes:
0 success, 1 validation error, 2 stage failure, 3 grad-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiment import ExperimentConfig, StageError, run_experiment

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_STAGE = 2
EXIT_GRADCHECK = 3


def _apply_overrides(raw: dict, pairs):
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, text = pair.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        target = raw
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return raw


def _load_config(args) -> ExperimentConfig:
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    raw = _apply_overrides(raw, args.set)
    if args.deterministic:
        raw["deterministic"] = True
    return ExperimentConfig.from_dict(raw)


def _add_config_args(p):
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted paths, JSON values)")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded, bitwise-reproducible execution")


def _run_stages(args, stages) -> int:
    try:
        cfg = _load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = run_experiment(cfg, stages=stages)
    except StageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_STAGE
    if "eval" in stages:
        for line in report.text_lines():
            print(line)
        print(f"report files written to {cfg.out_dir}")
    else:
        print(f"stage(s) {'+'.join(stages)} finished; checkpoints in {cfg.out_dir}")
    return EXIT_OK


def _cmd_synth_gen(args) -> int:
    import csv
    import os

    from .data import synth_generate

    try:
        specs, instances, params = synth_generate(
            args.n_ads, (args.min_samples, args.max_samples),
            args.ad_features, args.user_features, args.seed,
        )
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "dataset.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        names = [s.name for s in specs]
        writer = csv.writer(fh)
        writer.writerow(names + ["y"])
        for inst in instances:
            row = []
            for s in specs:
                if s.group == "ad_id":
                    row.append(inst.ad_id)
                else:
                    store = inst.u if s.group == "ad_feature" else inst.v
                    row.append(store[s.name])
            writer.writerow(row + [inst.y])
    schema = {
        "label": "y",
        "fields": [{"name": s.name, "kind": s.kind, "group": s.group} for s in specs],
    }
    with open(os.path.join(args.out, "schema.json"), "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=1)
    print(f"wrote {len(instances)} instances to {csv_path}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    import numpy as np

    from .data import group_by_ad, synth_generate
    from .gradcheck import (
        GradCheckReport,
        check_hvp,
        check_meta_gradient,
        check_model_first_order,
        randomize_parameters,
    )
    from .metagen import Generator, MetaConfig
    from .models import ALL_VARIANTS, build_model

    if args.m > 16:
        print(f"validation error: m={args.m} exceeds the grad-check size guard",
              file=sys.stderr)
        return EXIT_VALIDATION
    specs, insts, _ = synth_generate(12, 20, 2, 2, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    sample = [insts[i] for i in rng.choice(len(insts), args.instances, replace=False)]
    report = GradCheckReport()
    try:
        for variant in ALL_VARIANTS:
            model = build_model(variant, specs, args.m, [6, 5, 4],
                                seed=derive(args.seed, variant))
            randomize_parameters(model, seed=derive(args.seed, variant, "point"))
            report.suites.append(check_model_first_order(model, sample))
            report.suites.append(check_hvp(model, sample, seed=args.seed))
        model = build_model("FM", specs, 4, seed=derive(args.seed, "meta"))
        randomize_parameters(model, seed=derive(args.seed, "meta", "point"))
        gen = Generator(model, seed=derive(args.seed, "meta", "gen"))
        group = group_by_ad(insts)[0]
        cfg = MetaConfig(alpha=0.1, inner_lr=0.05, minibatch=4)
        report.suites.append(check_meta_gradient(model, gen, group, cfg))
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def derive(seed, *tags):
    from .experiment import derive_seed

    return derive_seed(seed, *tags)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="coldstart",
        description="Cold-start embedding warm-up: training and evaluation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, stages in [
        ("run-all", ("pretrain", "meta", "eval")),
        ("pretrain", ("pretrain",)),
        ("meta-train", ("meta",)),
        ("evaluate", ("eval",)),
    ]:
        p = sub.add_parser(name)
        _add_config_args(p)
        p.set_defaults(func=lambda a, s=stages: _run_stages(a, s))

    p = sub.add_parser("synth-gen", help="write a synthetic dataset as CSV + schema")
    p.add_argument("--out", required=True)
    p.add_argument("--n-ads", type=int, default=200)
    p.add_argument("--min-samples", type=int, default=40)
    p.add_argument("--max-samples", type=int, default=200)
    p.add_argument("--ad-features", type=int, default=2)
    p.add_argument("--user-features", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("grad-check", help="finite-difference verification suites")
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
