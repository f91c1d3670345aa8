"""Experiment orchestration: methods, sweeps, seeds and aggregate statistics.

Every comparison reuses the same world/episode seeds across methods, so
per-seed differences isolate the method. Runs are independent and may be
farmed out to worker processes; results are always merged by ``(spec, seed)``
key, never by completion order.
"""
from __future__ import annotations

import logging
import math
import re
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpn import LossConfig
from .evaluation import MetricsRecord, evaluate
from .simworld import WorldConfig, make_episode, make_world
from .train import (DetectorState, StepRecord, TrainConfig, TrainingDiverged, init_state, phase1_train,
                    phase2_finetune, train_naive_ensemble)

log = logging.getLogger(__name__)

METHODS = ("single", "corpn", "naive_ensemble", "cosine_div")
METRICS = tuple(f.name for f in fields(MetricsRecord))
CSV_HEADER = ("run_id", "method", "n_rpn", "phi", "lambda_d", "lambda_c", "shot", "seed") + METRICS
MAX_FAILED_FRACTION = 0.10


class ExperimentFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    method: str = "corpn"
    n_rpns: int = 5
    loss: LossConfig = field(default_factory=LossConfig)
    shots: int = 1
    seeds: tuple = tuple(range(20))
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train_scenes: int = 100
    n_test_scenes: int = 60

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "single":
            object.__setattr__(self, "n_rpns", 1)
        if self.n_rpns < 1:
            raise ValueError("n_rpns must be >= 1")
        if self.method == "cosine_div" and self.n_rpns < 2:
            raise ValueError("cosine_div needs at least two RPNs")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    def effective_loss(self) -> LossConfig:
        """Loss actually optimized: single and naive ensembles train plain CE."""
        lc = self.loss
        if self.method in ("single", "naive_ensemble"):
            return replace(lc, lambda_d=0.0, lambda_c=0.0, diversity="logdet")
        if self.method == "cosine_div":
            return replace(lc, diversity="cosine")
        return replace(lc, diversity="logdet")

    def with_seeds(self, seeds) -> "ExperimentSpec":
        return replace(self, seeds=tuple(seeds))


@dataclass
class SeedResult:
    seed: int
    metrics: Optional[MetricsRecord]
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.metrics is not None


@dataclass
class PipelineOutput:
    state: DetectorState
    metrics: Optional[MetricsRecord]  # None when phase 2 is skipped
    history: list  # phase-1 StepRecords (member 0 for naive ensembles)


def run_pipeline(spec: ExperimentSpec, seed: int, phase2: bool = True) -> PipelineOutput:
    """World, episode, phase 1, phase 2 and evaluation for one seed."""
    world = make_world(seed, config=spec.world)
    episode = make_episode(world, k=spec.shots, n_train_scenes=spec.n_train_scenes,
                           n_test_scenes=spec.n_test_scenes, seed=seed)
    cfg = replace(spec.train, seed=seed)
    if spec.method == "naive_ensemble":
        state, histories = train_naive_ensemble(world, episode, cfg, spec.n_rpns)
        history = histories[0]
    else:
        state, history = phase1_train(world, episode, init_state(world, spec.n_rpns, cfg), cfg,
                                      spec.effective_loss())
    if not phase2:
        return PipelineOutput(state, None, history)
    state = phase2_finetune(world, state, episode, cfg)
    metrics = evaluate(world, episode, state, cfg, ridge=spec.loss.ridge)
    return PipelineOutput(state, metrics, history)


def run_seed(spec: ExperimentSpec, seed: int) -> SeedResult:
    try:
        return SeedResult(seed, run_pipeline(spec, seed).metrics)
    except (TrainingDiverged, FloatingPointError, ArithmeticError, ValueError, RuntimeError) as exc:
        tb = traceback.extract_tb(exc.__traceback__)
        where = f" at {tb[-1].name}:{tb[-1].lineno}" if tb else ""
        msg = f"{type(exc).__name__}: {exc}{where}"
        log.warning("run %s seed %d failed: %s", spec.method, seed, msg)
        return SeedResult(seed, None, msg)


def _task(args):
    return run_seed(*args)


def run_many(specs: Sequence[ExperimentSpec], jobs: int = 1) -> list[list[SeedResult]]:
    """Run every (spec, seed) pair, optionally across ``jobs`` processes.

    Returns one seed-ordered result list per spec. A spec with more than 10%
    failed seeds raises :class:`ExperimentFailed`.
    """
    tasks = [(spec, s) for spec in specs for s in spec.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            flat = list(pool.map(_task, tasks))
    else:
        flat = [_task(t) for t in tasks]
    out, i = [], 0
    for spec in specs:
        res = flat[i:i + len(spec.seeds)]
        i += len(spec.seeds)
        bad = [r for r in res if not r.ok]
        if len(bad) > MAX_FAILED_FRACTION * len(res):
            detail = "; ".join(f"seed {r.seed}: {r.error}" for r in bad)
            raise ExperimentFailed(f"{spec.method} n_rpns={spec.n_rpns}: {len(bad)}/{len(res)} seeds failed ({detail})")
        out.append(res)
    return out


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> list[SeedResult]:
    """Full two-phase pipeline per seed, results in seed order."""
    return run_many([spec], jobs)[0]


# ----------------------------------------------------------------------------
# statistics


@dataclass
class Summary:
    n: int
    mean: dict
    std: dict
    stderr: dict


def _summ(matrix: np.ndarray) -> Summary:
    n = matrix.shape[0]
    # shift by the first row so identical records give exactly zero spread
    dev = matrix - matrix[0]
    mean = matrix[0] + dev.mean(axis=0)
    if n >= 2:
        std = dev.std(axis=0, ddof=1)
        se = std / math.sqrt(n)
    else:
        std = se = np.full(matrix.shape[1], np.nan)
    pack = lambda v: {m: float(x) for m, x in zip(METRICS, v)}
    return Summary(n, pack(mean), pack(std), pack(se))


def _matrix(records) -> np.ndarray:
    recs = [r.metrics if isinstance(r, SeedResult) else r for r in records]
    recs = [r for r in recs if r is not None]
    if not recs:
        raise ValueError("no successful records to aggregate")
    return np.array([[getattr(r, m) for m in METRICS] for r in recs], dtype=float)


@dataclass
class Aggregate:
    summary: Summary
    paired: Optional[Summary] = None  # per-seed (records - reference)


def aggregate(records: Sequence, reference: Optional[Sequence] = None) -> Aggregate:
    """Mean, unbiased stddev and stderr per metric; optionally paired differences.

    ``records`` holds MetricsRecords or SeedResults. With SeedResults, pairs
    are formed on seeds that succeeded in both lists; plain records pair by
    position and must have equal length.
    """
    agg = Aggregate(_summ(_matrix(records)))
    if reference is None:
        return agg
    if len(records) != len(reference):
        raise ValueError(f"cannot pair {len(records)} records with {len(reference)} reference records")
    if records and isinstance(records[0], SeedResult):
        if [r.seed for r in records] != [r.seed for r in reference]:
            raise ValueError("paired results must share seeds in the same order")
        both = [(a, b) for a, b in zip(records, reference) if a.ok and b.ok]
        records, reference = [a for a, _ in both], [b for _, b in both]
    agg.paired = _summ(_matrix(records) - _matrix(reference))
    return agg


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    value: float  # the swept parameter (phi or N)
    n: int
    mean: dict
    stderr: dict


@dataclass
class Sweep:
    parameter: str
    rows: list
    runs: list  # of (ExperimentSpec, [SeedResult])
    shape: str = ""


def _rows(param_values, specs, results) -> list:
    rows = []
    for v, res in zip(param_values, results):
        s = aggregate(res).summary
        rows.append(SweepRow(v, s.n, s.mean, s.stderr))
    return rows


def sweep_phi(base: ExperimentSpec, phis: Sequence[float], jobs: int = 1) -> Sweep:
    """φ ablation with phase 2 in novel_only mode."""
    phis = [float(p) for p in phis]
    if not phis:
        raise ValueError("empty phi sweep")
    for p in phis:
        if not 0.0 < p < 1.0:
            raise ValueError(f"phi={p} outside (0, 1)")
    train = replace(base.train, phase2_mode="novel_only")
    specs = [replace(base, loss=replace(base.loss, phi=p), train=train) for p in phis]
    results = run_many(specs, jobs)
    return Sweep("phi", _rows(phis, specs, results), list(zip(specs, results)))


def curve_shape(values: Sequence[float]) -> str:
    """``interior`` if the maximum sits strictly inside the sweep, else ``boundary``."""
    v = np.asarray(values, dtype=float)
    if v.size < 3 or np.all(np.isnan(v)):
        return "boundary"
    k = int(np.nanargmax(v))
    return "interior" if 0 < k < v.size - 1 else "boundary"


def sweep_n_rpns(base: ExperimentSpec, ns: Sequence[int], jobs: int = 1) -> Sweep:
    """Number-of-RPNs sweep; N=1 is the single-RPN baseline."""
    ns = [int(n) for n in ns]
    if not ns:
        raise ValueError("empty n_rpns sweep")
    if min(ns) < 1:
        raise ValueError("every N must be >= 1")
    specs = [replace(base, method="single" if n == 1 else base.method, n_rpns=n) for n in ns]
    results = run_many(specs, jobs)
    sweep = Sweep("n_rpns", _rows(ns, specs, results), list(zip(specs, results)))
    sweep.shape = curve_shape([r.mean["novel_ap50"] for r in sweep.rows])
    return sweep


def compare_methods(base: ExperimentSpec, methods: Sequence[str] = METHODS, jobs: int = 1) -> Sweep:
    """Paired comparison of methods on the same seeds."""
    if not methods:
        raise ValueError("empty method list")
    specs = [replace(base, method=m, n_rpns=1 if m == "single" else base.n_rpns) for m in methods]
    results = run_many(specs, jobs)
    rows = []
    for m, res in zip(methods, results):
        s = aggregate(res).summary
        rows.append(SweepRow(m, s.n, s.mean, s.stderr))
    return Sweep("method", rows, list(zip(specs, results)))


# ----------------------------------------------------------------------------
# CSV


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def run_id(spec: ExperimentSpec, seed: int) -> str:
    lc = spec.effective_loss()
    return (f"{spec.method}-n{spec.n_rpns}-phi{lc.phi:g}-ld{lc.lambda_d:g}-lc{lc.lambda_c:g}"
            f"-k{spec.shots}-s{seed}")


def csv_rows(runs: Iterable) -> list[list[str]]:
    """Harness-schema rows for successful seeds of ``(spec, results)`` pairs."""
    rows = []
    for spec, results in runs:
        lc = spec.effective_loss()
        for r in results:
            if not r.ok:
                continue
            m = r.metrics
            rows.append([run_id(spec, r.seed), spec.method, str(spec.n_rpns), _fmt(lc.phi),
                         _fmt(lc.lambda_d), _fmt(lc.lambda_c), str(spec.shots), str(r.seed)]
                        + [_fmt(getattr(m, k)) for k in METRICS])
    return rows


def write_csv(path, runs: Iterable) -> int:
    rows = csv_rows(runs)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    return len(rows)


_FLOAT6 = re.compile(r"^(-?\d+\.\d{6}|nan)$")
_INT = re.compile(r"^-?\d+$")
_FLOAT_COLS = {"phi", "lambda_d", "lambda_c"} | set(METRICS)
_INT_COLS = {"n_rpn", "shot", "seed"}


def read_csv(path) -> list[dict]:
    """Strict reader for the harness schema; raises ValueError on any deviation."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split(",")) != CSV_HEADER:
        raise ValueError("CSV header does not match the harness schema")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(CSV_HEADER):
            raise ValueError(f"line {n}: expected {len(CSV_HEADER)} fields, got {len(parts)}")
        row = {}
        for k, v in zip(CSV_HEADER, parts):
            if k in _FLOAT_COLS:
                if not _FLOAT6.match(v):
                    raise ValueError(f"line {n}: {k}={v!r} is not a 6-digit fixed decimal")
                row[k] = float(v)
            elif k in _INT_COLS:
                if not _INT.match(v):
                    raise ValueError(f"line {n}: {k}={v!r} is not an integer")
                row[k] = int(v)
            elif k == "method":
                if v not in METHODS:
                    raise ValueError(f"line {n}: unknown method {v!r}")
                row[k] = v
            else:
                row[k] = v
        out.append(row)
    return out


def write_summary_csv(path, sweep: Sweep) -> None:
    """Aggregate table: one row per sweep point with mean and stderr per metric."""
    cols = [sweep.parameter, "n_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "stderr")]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in sweep.rows:
            v = row.value if isinstance(row.value, str) else _fmt(row.value)
            vals = [v, str(row.n)] + [_fmt(d[m]) for m in METRICS for d in (row.mean, row.stderr)]
            fh.write(",".join(vals) + "\n")
        if sweep.shape:
            fh.write(f"# shape {sweep.shape}\n")


def spec_dict(spec: ExperimentSpec) -> dict:
    return asdict(spec)
