"""Experiment plans, result tables and the protocol runners behind the CLI.

A plan is a versioned JSON document. ``run_plan`` meta-trains and meta-tests
once per trial, ``run_ablation`` repeats a plan over a grid of overrides, and
``run_artificial_to_real`` trains on source classes and tests on disjoint
target classes at several shot counts.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .data import EpisodeSpec, load_corpus, restrict_pools
from .meta_engine import MetaConfig, audit_labels, curve_line, meta_test, meta_train, sample_std

SCHEMA_VERSION = 1
A2R_SHOTS = (1, 3, 5, 10)


class PlanError(ValueError):
    """Malformed or inconsistent experiment plan."""


class BudgetExceeded(RuntimeError):
    """A run went past the plan's wall-time budget."""


@dataclass
class ExperimentPlan:
    corpus: str
    meta_train_classes: list[int]
    meta_test_classes: list[int]
    n_way: int = 3
    k_shot: int = 5
    query_per_class: int = 4
    test_query_per_class: int | None = None  # None: all remaining segments
    train_samples_per_class: int = 9
    test_episodes: int = 10
    trials: int = 5
    config: MetaConfig = field(default_factory=MetaConfig)
    output_dir: str | None = None
    max_seconds: float | None = None
    name: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.config, dict):
            self.config = MetaConfig.from_dict(self.config)
        self.meta_train_classes = [int(c) for c in self.meta_train_classes]
        self.meta_test_classes = [int(c) for c in self.meta_test_classes]
        if self.schema_version != SCHEMA_VERSION:
            raise PlanError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if self.trials < 1:
            raise PlanError("trials must be >= 1")
        if self.test_episodes < 1:
            raise PlanError("test_episodes must be >= 1")
        if self.train_samples_per_class < self.k_shot + self.query_per_class:
            raise PlanError(f"train_samples_per_class {self.train_samples_per_class} cannot supply "
                            f"{self.k_shot} support + {self.query_per_class} query segments")
        try:
            audit_labels(self.meta_train_classes, self.meta_test_classes)
        except ValueError as exc:
            raise PlanError(str(exc)) from None

    @property
    def train_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.query_per_class, tuple(self.meta_train_classes))

    def test_spec(self, shots: int | None = None) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, shots or self.k_shot, self.test_query_per_class,
                           tuple(self.meta_test_classes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["config"] = self.config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentPlan:
        if "schema_version" not in d:
            raise PlanError("plan lacks schema_version")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown plan fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise PlanError(str(exc)) from None

    @classmethod
    def load(cls, path) -> ExperimentPlan:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise PlanError(f"plan is not valid JSON: {exc}") from None
        plan = cls.from_dict(d)
        # Relative corpus and output paths are resolved against the plan file.
        if not Path(plan.corpus).is_absolute():
            plan.corpus = str(path.parent / plan.corpus)
        if plan.output_dir and not Path(plan.output_dir).is_absolute():
            plan.output_dir = str(path.parent / plan.output_dir)
        return plan

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def with_overrides(self, overrides: dict) -> ExperimentPlan:
        plan_keys = {f.name for f in dataclasses.fields(self)} - {"config"}
        cfg_keys = {f.name for f in dataclasses.fields(MetaConfig)}
        plan_over, cfg_over = {}, {}
        for k, v in overrides.items():
            if k in plan_keys:
                plan_over[k] = v
            elif k in cfg_keys:
                cfg_over[k] = v
            else:
                raise PlanError(f"unknown override {k!r}")
        cfg = dataclasses.replace(self.config, **cfg_over)
        return dataclasses.replace(self, config=cfg, **plan_over)


# ---------------------------------------------------------------- results

@dataclass
class ResultRow:
    setting: str
    mean_acc: float
    std: float
    trials: int
    seconds: float


CSV_HEADER = ("setting", "mean_acc", "std", "trials", "seconds")


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)
    episodes: list[dict] = field(default_factory=list)

    def add(self, setting: str, accuracies, trials: int, seconds: float) -> ResultRow:
        accs = np.asarray(accuracies, dtype=np.float64)
        row = ResultRow(setting, float(accs.mean()), sample_std(accs), trials, seconds)
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.setting, repr(r.mean_acc), repr(r.std), r.trials, f"{r.seconds:.3f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [("setting", "accuracy (%)", "trials", "seconds")]
        cells += [(r.setting, f"{100 * r.mean_acc:.2f} ± {100 * r.std:.2f}", str(r.trials), f"{r.seconds:.1f}")
                  for r in self.rows]
        widths = [max(len(c[i]) for c in cells) for i in range(4)]
        lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i]) for i in range(4))
                 for c in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def episodes_ndjson(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.episodes)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(self.to_csv())
        (out / "results.txt").write_text(self.to_text())
        (out / "episodes.ndjson").write_text(self.episodes_ndjson())


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def recompute_from_episodes(episodes: list[dict]) -> dict[str, tuple[float, float]]:
    """Mean and sample std per setting, rebuilt from raw episode records."""
    by_setting: dict[str, list[float]] = {}
    for e in episodes:
        by_setting.setdefault(e["setting"], []).append(e["accuracy"])
    return {s: (float(np.mean(a)), sample_std(a)) for s, a in by_setting.items()}


# ---------------------------------------------------------------- runners

def derive_seed(*entropy) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


def _deadline(plan: ExperimentPlan, start: float):
    if plan.max_seconds is None:
        return None

    def check():
        elapsed = time.monotonic() - start
        if elapsed > plan.max_seconds:
            raise BudgetExceeded(f"plan exceeded its wall-time budget: {elapsed:.0f}s > {plan.max_seconds:.0f}s")

    return check


def _pools_for(plan: ExperimentPlan, pools):
    if pools is None:
        pools = load_corpus(plan.corpus)
    missing = sorted(set(plan.meta_train_classes + plan.meta_test_classes) - set(pools))
    if missing:
        raise PlanError(f"classes {missing} are not in the corpus")
    return pools


def describe(plan: ExperimentPlan) -> str:
    cfg = plan.config
    mode = cfg.inner_lr_mode + (" (frozen)" if cfg.inner_lr_mode == "learnable" and cfg.freeze_lr else "")
    return (f"{plan.n_way}-way {plan.k_shot}-shot n={plan.train_samples_per_class} {mode} "
            f"{cfg.outer_optimizer} alpha={cfg.alpha:g}")


def train_trial(plan: ExperimentPlan, pools, trial: int, should_stop=None, out_dir=None):
    """Meta-train one trial; trial ``t`` uses seed ``config.seed + t``."""
    cfg = dataclasses.replace(plan.config, seed=plan.config.seed + trial)
    train_pools = restrict_pools({c: pools[c] for c in plan.meta_train_classes},
                                 plan.train_samples_per_class, seed=derive_seed(cfg.seed, 3))
    lines = []
    result = meta_train(cfg, train_pools, plan.train_spec, on_record=lambda r: lines.append(curve_line(r)),
                        should_stop=should_stop)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mdl.save_checkpoint(out / f"checkpoint_trial{trial}.mflt", result.theta, result.lr_table.rates)
        (out / f"curve_trial{trial}.ndjson").write_text("".join(line + "\n" for line in lines))
    return cfg, result


def run_plan(plan: ExperimentPlan, pools=None, setting: str | None = None) -> ResultTable:
    """Meta-train and meta-test ``plan.trials`` times and tabulate the accuracies."""
    start = time.monotonic()
    pools = _pools_for(plan, pools)
    stop = _deadline(plan, start)
    setting = setting or describe(plan)
    table = ResultTable()
    test_pools = {c: pools[c] for c in plan.meta_test_classes}
    accs = []
    for t in range(plan.trials):
        cfg, res = train_trial(plan, pools, t, stop, plan.output_dir)
        if stop:
            stop()
        mt = meta_test(res.theta, res.lr_table, test_pools, plan.test_spec(), plan.test_episodes,
                       plan.k_shot, seed=cfg.seed, inner_steps=cfg.eval_steps,
                       train_labels=plan.meta_train_classes)
        accs.extend(mt.accuracies)
        table.episodes.extend({"setting": setting, "trial": t, **e} for e in mt.episodes)
    table.add(setting, accs, plan.trials, time.monotonic() - start)
    if plan.output_dir:
        table.write(plan.output_dir)
    return table


def evaluate_checkpoint(plan: ExperimentPlan, checkpoint, pools=None, seed: int | None = None) -> ResultTable:
    """Meta-test a saved model on the plan's test classes."""
    from .meta_engine import InnerLRTable

    start = time.monotonic()
    pools = _pools_for(plan, pools)
    theta, rates = mdl.load_checkpoint(checkpoint)
    if rates is None:
        rates = np.full((len(theta), plan.config.inner_steps), plan.config.alpha, dtype=theta["fc.weight"].dtype)
    table_lr = InnerLRTable(theta.names, rates)
    seed = plan.config.seed if seed is None else seed
    mt = meta_test(theta, table_lr, {c: pools[c] for c in plan.meta_test_classes}, plan.test_spec(),
                   plan.test_episodes, plan.k_shot, seed=seed, inner_steps=plan.config.eval_steps,
                   train_labels=plan.meta_train_classes)
    table = ResultTable()
    setting = f"eval {plan.n_way}-way {plan.k_shot}-shot"
    table.episodes.extend({"setting": setting, "trial": 0, **e} for e in mt.episodes)
    table.add(setting, mt.accuracies, 1, time.monotonic() - start)
    if plan.output_dir:
        table.write(plan.output_dir)
    return table


def optimizer_lr_grid(optimizers=("adam", "rmsprop", "sgd"), rates=(0.1, 0.01, 0.001)) -> list[dict]:
    return [{"outer_optimizer": o, "alpha": r} for o in optimizers for r in rates]


def train_size_grid(sizes=(4, 6, 9, 12)) -> list[dict]:
    return [{"train_samples_per_class": n} for n in sizes]


def cell_label(cell: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in cell.items())


def run_ablation(grid: list[dict], plan: ExperimentPlan, pools=None) -> ResultTable:
    """One :func:`run_plan` per grid cell.

    Each cell's seed is derived from the plan seed and the cell's content,
    so distinct cells get distinct streams and a repeated cell repeats its
    result.
    """
    if not grid:
        raise PlanError("ablation grid is empty")
    pools = _pools_for(plan, pools)
    table = ResultTable()
    for cell in grid:
        key = zlib.crc32(json.dumps(cell, sort_keys=True).encode())
        seed = derive_seed(plan.config.seed, key) % 2**31
        cell_plan = plan.with_overrides({**cell, "seed": seed, "output_dir": None})
        sub = run_plan(cell_plan, pools, setting=cell_label(cell))
        table.rows.extend(sub.rows)
        table.episodes.extend(sub.episodes)
    if plan.output_dir:
        table.write(plan.output_dir)
        matrix = ablation_matrix(grid, table)
        if matrix:
            (Path(plan.output_dir) / "matrix.txt").write_text(matrix)
    return table


def ablation_matrix(grid: list[dict], table: ResultTable) -> str:
    """Two-factor grids rendered as a matrix of mean accuracies (in percent)."""
    keys = list(grid[0])
    if len(keys) != 2 or any(list(c) != keys for c in grid):
        return ""
    rows = list(dict.fromkeys(c[keys[0]] for c in grid))
    cols = list(dict.fromkeys(c[keys[1]] for c in grid))
    acc = {(c[keys[0]], c[keys[1]]): r for c, r in zip(grid, table.rows)}
    header = [f"{keys[0]} \\ {keys[1]}"] + [str(c) for c in cols]
    body = [[str(r)] + [f"{100 * acc[(r, c)].mean_acc:.2f} ± {100 * acc[(r, c)].std:.2f}"
                        if (r, c) in acc else "-" for c in cols] for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(line, widths)) for line in [header] + body) + "\n"


def run_artificial_to_real(source_classes, target_classes, plan: ExperimentPlan, pools=None,
                           shots=A2R_SHOTS) -> ResultTable:
    """Meta-train on source classes only and meta-test on target classes at each K."""
    audit_labels(source_classes, target_classes)
    plan = dataclasses.replace(plan, meta_train_classes=list(source_classes),
                               meta_test_classes=list(target_classes))
    start = time.monotonic()
    pools = _pools_for(plan, pools)
    stop = _deadline(plan, start)
    test_pools = {c: pools[c] for c in plan.meta_test_classes}
    per_k: dict[int, list[float]] = {k: [] for k in shots}
    table = ResultTable()
    for t in range(plan.trials):
        cfg, res = train_trial(plan, pools, t, stop, plan.output_dir)
        for k in shots:
            if stop:
                stop()
            mt = meta_test(res.theta, res.lr_table, test_pools, plan.test_spec(k), plan.test_episodes, k,
                           seed=derive_seed(cfg.seed, k), inner_steps=cfg.eval_steps,
                           train_labels=plan.meta_train_classes)
            per_k[k].extend(mt.accuracies)
            table.episodes.extend({"setting": f"{k}-shot", "trial": t, **e} for e in mt.episodes)
    elapsed = time.monotonic() - start
    for k in shots:
        table.add(f"{k}-shot", per_k[k], plan.trials, elapsed)
    table.add("overall", [a for k in shots for a in per_k[k]], plan.trials, elapsed)
    # The overall row pools every episode, so its raw records are the union.
    table.episodes.extend({**e, "setting": "overall"} for e in list(table.episodes))
    if plan.output_dir:
        table.write(plan.output_dir)
    return table
