"""End-to-end experiment pipeline: pre-train, meta-train, then the
cold-start and warm-up evaluation sweep, with reports and checkpoints.

The protocol per (model, seed): pre-train on old ads; train the generator
on old ads with the base model frozen; initialize every new ad's embedding
row by policy (random draw or generated); score the pooled hold-out
(cold); then apply warm-up batches a, b, c one at a time, re-scoring the
hold-out after each. All percentages are relative to the random-policy
cold scores of the same (model, seed).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import metrics as M
from .metagen import Generator, MetaConfig, generate_rows, train_meta, warmup_update
from .models import ALL_VARIANTS, DEFAULT_HIDDEN, RandomInitPolicy, build_model, evaluate_probs, pretrain

PHASES = ("cold", "warm_a", "warm_b", "warm_c")
POLICIES = ("random", "meta")

ENV_DATA_ROOT = "COLDSTART_DATA_ROOT"


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def derive_seed(master: int, *tags) -> int:
    """Stable per-stage seed so stages can be re-run in isolation."""
    text = ":".join([str(master)] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") % (2**63)


@dataclass
class ExperimentConfig:
    dataset: dict
    split: dict
    models: list
    out_dir: str
    name: str = "dataset"
    m: int = 16
    hidden_dims: list = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    pretrain: dict = field(default_factory=lambda: {"epochs": 1, "lr": 0.01, "batch_size": 256})
    meta: dict = field(default_factory=dict)
    pooling: str = "average"
    l2: float = 1e-4
    warmup_lr: float | None = None
    policies: list = field(default_factory=lambda: list(POLICIES))
    seeds: list = field(default_factory=lambda: [0])
    deterministic: bool = True
    svg_chart: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("config needs at least one seed")
        for v in self.models:
            if v not in ALL_VARIANTS:
                raise ValueError(f"unknown model variant {v!r}")
        for p in self.policies:
            if p not in POLICIES:
                raise ValueError(f"unknown init policy {p!r}")
        if "random" not in self.policies:
            raise ValueError("the random policy is the percentage anchor and cannot be dropped")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def meta_config(self, seed: int) -> MetaConfig:
        kwargs = dict(self.meta)
        kwargs.pop("l2", None)
        return MetaConfig(seed=seed, **kwargs)

    @property
    def effective_warmup_lr(self) -> float:
        if self.warmup_lr is not None:
            return self.warmup_lr
        return self.meta_config(0).inner_lr


@dataclass
class MetricRow:
    dataset: str
    model: str
    policy: str
    phase: str
    seed: int
    auc: float
    logloss: float
    auc_pct: float = 0.0
    logloss_pct: float = 0.0


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    split_counts: dict = field(default_factory=dict)
    pretrain_trace: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def row(self, model, policy, phase, seed) -> MetricRow:
        for r in self.rows:
            if (r.model, r.policy, r.phase, r.seed) == (model, policy, phase, seed):
                return r
        raise KeyError((model, policy, phase, seed))

    def aggregates(self):
        """Across-seed mean and standard deviation per (model, policy, phase)."""
        out = {}
        for r in self.rows:
            out.setdefault((r.model, r.policy, r.phase), []).append(r)
        agg = []
        for (model, policy, phase), rows in sorted(out.items()):
            vals = {
                k: np.array([getattr(r, k) for r in rows])
                for k in ("auc", "logloss", "auc_pct", "logloss_pct")
            }
            agg.append({
                "model": model, "policy": policy, "phase": phase,
                "n_seeds": len(rows),
                **{f"{k}_mean": float(v.mean()) for k, v in vals.items()},
                **{f"{k}_std": float(v.std()) for k, v in vals.items()},
            })
        return agg

    def csv_lines(self):
        yield ",".join(M.CSV_COLUMNS)
        ordered = sorted(
            self.rows,
            key=lambda r: (r.model, r.policy, PHASES.index(r.phase), r.seed),
        )
        for r in ordered:
            yield M.format_metric_row(
                r.dataset, r.model, r.policy, r.phase, r.seed,
                r.auc, r.logloss, r.auc_pct, r.logloss_pct,
            )

    def text_lines(self):
        yield f"dataset={self.config.name}  models={','.join(self.config.models)}  seeds={self.config.seeds}"
        yield (f"split: old={self.split_counts.get('old_ids')} ids / "
               f"{self.split_counts.get('old_instances')} rows, "
               f"new={self.split_counts.get('new_ids')} ids / "
               f"{self.split_counts.get('new_instances')} rows, "
               f"discarded={self.split_counts.get('discarded_ids')} ids")
        header = f"{'model':9s} {'policy':7s} {'phase':7s} {'auc':>9s} {'logloss':>9s} {'auc%':>8s} {'logloss%':>9s}"
        yield header
        yield "-" * len(header)
        for a in self.aggregates():
            yield (f"{a['model']:9s} {a['policy']:7s} {a['phase']:7s} "
                   f"{a['auc_mean']:9.4f} {a['logloss_mean']:9.4f} "
                   f"{a['auc_pct_mean']:+8.2f} {a['logloss_pct_mean']:+9.2f}")


# ---------------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig):
    ds = cfg.dataset
    kind = ds.get("kind")
    if kind == "synthetic":
        params = {k: v for k, v in ds.items() if k != "kind"}
        specs, instances, _ = D.synth_generate(**params)
        return specs, instances
    if kind == "movielens":
        root = ds.get("root") or os.path.join(os.environ.get(ENV_DATA_ROOT, "."), "ml-1m")
        return D.load_movielens(
            os.path.join(root, "ratings.dat"),
            os.path.join(root, "movies.dat"),
            os.path.join(root, "users.dat"),
        )
    if kind == "csv":
        return D.load_csv_dataset(ds["path"], ds["schema"])
    raise ValueError(f"unknown dataset kind {kind!r}")


def _paths(cfg, variant, seed):
    base = os.path.join(cfg.out_dir, f"base-{variant}-seed{seed}.ckpt")
    gen = os.path.join(cfg.out_dir, f"gen-{variant}-seed{seed}.ckpt")
    return base, gen


def _evaluate_phase(model, holdout, rows_by_ad):
    phi = np.stack([rows_by_ad[i.ad_id] for i in holdout])
    probs = evaluate_probs(model, holdout, phi)
    labels = np.fromiter((i.y for i in holdout), np.int64, count=len(holdout))
    return M.auc(probs, labels), M.logloss(probs, labels)


def run_experiment(cfg: ExperimentConfig, stages=("pretrain", "meta", "eval")) -> ExperimentReport:
    t_start = time.time()
    os.makedirs(cfg.out_dir, exist_ok=True)
    marker = os.path.join(cfg.out_dir, "INCOMPLETE")
    with open(marker, "w", encoding="utf-8") as fh:
        fh.write("run in progress or aborted\n")

    report = ExperimentReport(config=cfg)
    try:
        specs, instances = load_dataset(cfg)
    except Exception as exc:
        raise StageError("load", exc) from exc

    split = D.SplitSpec(**cfg.split)
    old_groups, new_groups, discarded = D.split_old_new(instances, split)
    if not old_groups or not new_groups:
        raise StageError("split", ValueError("split produced an empty old or new bucket"))
    new_groups = D.remap_unseen_u(new_groups, old_groups, specs)
    old_instances = [i for g in old_groups for i in g.instances]
    report.split_counts = {
        "old_ids": len(old_groups),
        "new_ids": len(new_groups),
        "discarded_ids": len(discarded),
        "old_instances": len(old_instances),
        "new_instances": sum(g.size for g in new_groups),
    }

    for seed in cfg.seeds:
        carves = {
            g.ad_id: D.carve_warmup(g, split.K, derive_seed(seed, "carve"))
            for g in new_groups
        }
        manifest = D.split_manifest(split, old_groups, new_groups, discarded,
                                    carves=list(carves.values()))
        D.write_split_manifest(
            os.path.join(cfg.out_dir, f"split-seed{seed}.json"), manifest
        )
        holdout = [i for g in new_groups for i in carves[g.ad_id].holdout]

        for variant in cfg.models:
            base_path, gen_path = _paths(cfg, variant, seed)

            if "pretrain" in stages:
                try:
                    model = build_model(variant, specs, cfg.m, cfg.hidden_dims,
                                        seed=derive_seed(seed, "build", variant))
                    trace = pretrain(
                        model, old_instances,
                        epochs=cfg.pretrain.get("epochs", 1),
                        lr=cfg.pretrain.get("lr", 0.01),
                        batch_size=cfg.pretrain.get("batch_size", 256),
                        seed=derive_seed(seed, "pretrain", variant),
                    )
                    report.pretrain_trace[f"{variant}-seed{seed}"] = trace
                    ckpt.save_base_model(base_path, model)
                except StageError:
                    raise
                except Exception as exc:
                    raise StageError("pretrain", exc) from exc
            else:
                model = ckpt.load_base_model(base_path)

            if "meta" in stages:
                try:
                    generator = Generator(model, pooling=cfg.pooling, l2=cfg.l2,
                                          seed=derive_seed(seed, "generator", variant))
                    theta_sum = model.checksum("theta")
                    table_sum = model.checksum("tables")
                    train_meta(model, generator, old_groups,
                               cfg.meta_config(derive_seed(seed, "meta", variant)))
                    if model.checksum("theta") != theta_sum or model.checksum("tables") != table_sum:
                        raise RuntimeError("meta-training modified frozen base parameters")
                    ckpt.save_generator(gen_path, generator, base_path)
                except StageError:
                    raise
                except Exception as exc:
                    raise StageError("meta", exc) from exc
            else:
                generator = ckpt.load_generator(gen_path, model, base_path)

            if "eval" not in stages:
                continue
            try:
                anchor = None
                for policy in cfg.policies:
                    if policy == "random":
                        rng = np.random.default_rng(derive_seed(seed, "random-init", variant))
                        init = RandomInitPolicy().rows(len(new_groups), cfg.m, rng)
                    else:
                        init = generate_rows(generator, new_groups)
                    rows_by_ad = {g.ad_id: init[i].copy() for i, g in enumerate(new_groups)}

                    scores = {}
                    for phase in PHASES:
                        if phase != "cold":
                            batch_name = {"warm_a": "batch_a", "warm_b": "batch_b",
                                          "warm_c": "batch_c"}[phase]
                            for g in new_groups:
                                batch = getattr(carves[g.ad_id], batch_name)
                                rows_by_ad[g.ad_id] = warmup_update(
                                    model, rows_by_ad[g.ad_id], batch,
                                    cfg.effective_warmup_lr,
                                )
                        scores[phase] = _evaluate_phase(model, holdout, rows_by_ad)

                    if policy == "random":
                        anchor = scores["cold"]
                    for phase in PHASES:
                        auc_v, ll_v = scores[phase]
                        report.rows.append(MetricRow(
                            dataset=cfg.name, model=variant, policy=policy,
                            phase=phase, seed=seed, auc=auc_v, logloss=ll_v,
                            auc_pct=M.percentage(auc_v, anchor[0], "auc"),
                            logloss_pct=M.percentage(ll_v, anchor[1], "logloss"),
                        ))
            except StageError:
                raise
            except Exception as exc:
                raise StageError("eval", exc) from exc

    report.elapsed = time.time() - t_start
    if "eval" in stages:
        write_report_files(cfg, report)
    os.remove(marker)
    return report


def write_report_files(cfg: ExperimentConfig, report: ExperimentReport) -> None:
    with open(os.path.join(cfg.out_dir, "report.csv"), "w", encoding="utf-8") as fh:
        for line in report.csv_lines():
            fh.write(line + "\n")
    with open(os.path.join(cfg.out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        for line in report.text_lines():
            fh.write(line + "\n")
    payload = {
        "config": _config_as_dict(cfg),
        "split_counts": report.split_counts,
        "rows": [vars(r) for r in report.rows],
        "aggregates": report.aggregates(),
        "pretrain_trace": report.pretrain_trace,
        "elapsed_seconds": report.elapsed,
    }
    with open(os.path.join(cfg.out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    if cfg.svg_chart:
        from .svgplot import percentage_chart

        percentage_chart(report, os.path.join(cfg.out_dir, "percentages.svg"))


def _config_as_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in cfg.__dataclass_fields__:
        out[name] = copy.deepcopy(getattr(cfg, name))
    return out
