"""
End-to-end benchmark: load/train the classifier, fit the prior, pick
references that need a class change, run every configured method on them and
aggregate the metrics.

Input:  RunConfig (dataset or synthetic block, methods, optional grid)
Output: <out>/report.csv   method, metric, value, n, failures
        <out>/records.csv  one row per (method, reference)
        <out>/report.txt   aligned table: l2, l∞, yNN, Redun., Div., t(s), success
        <out>/grid.csv     one row per grid point (only with a grid)

Instances run in a thread pool, each with its own (seed, task id) stream, and
are aggregated in task-id order, so reports do not depend on the worker count.
With `timing: off` seconds are recorded as 0 and the files are byte-identical
across runs.
"""

import itertools
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from cf_utils.actionability import FeaturePolicy
from cf_utils.codec import schema_prior
from cf_utils.errors import ConfigError, CounterfactualError, SchemaError
from cf_utils.gaussian import rng_stream
from cf_utils.generators import GenContext, GenRequest, MethodParams, generate
from cf_utils.models import SplitClassifier, TrainConfig, forward, init_classifier, load_classifier, predict, train
from cf_utils.posterior import LaplaceConfig
from cf_utils.prior import DataPrior, fit_data_prior, prior_from_schema_scm
from cf_utils.utils import write_csv
from run_utils.config import MethodSpec, RunConfig
from run_utils.datasets import Dataset, load_dataset
from run_utils.metrics import metric_diversity, metric_l2, metric_linf, metric_redundancy, metric_ynn

_logger = logging.getLogger(__name__)

SUCCESS_FLOOR = 0.99
GRID_BATCH = 20
TASK_BASE = 1000        # per-instance streams are (seed, TASK_BASE + position)
REFERENCE_STREAM = 2

METRIC_NAMES = ("l2", "linf", "ynn", "redundancy", "diversity", "seconds", "success")
TABLE_COLUMNS = {"l2": "l2", "linf": "l∞", "ynn": "yNN", "redundancy": "Redun.",
                 "diversity": "Div.", "seconds": "t(s)", "success": "success"}


@dataclass(frozen=True)
class InstanceRecord:
    method: str
    task: int
    reference_index: int
    target: int
    ok: bool
    error: str = ""
    l2: Optional[float] = None
    linf: Optional[float] = None
    ynn: Optional[float] = None
    redundancy: Optional[float] = None
    diversity: Optional[float] = None
    seconds: Optional[float] = None
    success: Optional[float] = None

    FIELDS = ("method", "task", "reference_index", "target", "ok", "error",
              *METRIC_NAMES)

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass(frozen=True)
class MetricsReport:
    method: str
    n: int
    failures: int
    l2: Optional[float] = None
    linf: Optional[float] = None
    ynn: Optional[float] = None
    redundancy: Optional[float] = None
    diversity: Optional[float] = None
    seconds: Optional[float] = None
    success: Optional[float] = None
    params: Dict[str, float] = field(default_factory=dict)
    flagged: bool = False   # grid search found no point reaching SUCCESS_FLOOR


@dataclass(eq=False)
class BenchSetup:
    cfg: RunConfig
    data: Dataset
    clf: SplitClassifier
    prior: DataPrior
    preds: np.ndarray
    policy: FeaturePolicy
    ctx: GenContext


@dataclass(eq=False)
class BenchResult:
    reports: List[MetricsReport]
    records: List[InstanceRecord]
    grid: List[list] = field(default_factory=list)
    notice: str = ""


def fit_prior(cfg: RunConfig, data: Dataset) -> DataPrior:
    """Empirical moments, or the schema prior (its SCM when it declares one)."""
    if cfg.prior_mode == "schema":
        scm = prior_from_schema_scm(data.schema.scm, data.schema.latent_names)
        if scm is not None:
            return scm
        return schema_prior(data.schema, data.rows, cfg.prior_jitter)
    return fit_data_prior(data.rows, cfg.prior_jitter)


def fit_classifier(cfg: RunConfig, data: Dataset) -> SplitClassifier:
    if cfg.model is not None:
        clf = load_classifier(str(cfg.model))
        if clf.n_in != data.rows.shape[1]:
            raise SchemaError(
                f"model expects {clf.n_in} inputs but the dataset encodes to {data.rows.shape[1]}"
            )
        return clf
    clf = init_classifier(data.rows.shape[1], cfg.hidden, data.class_count, cfg.activation, cfg.seed)
    tc = TrainConfig(cfg.train.lr, cfg.train.steps, cfg.train.batch_size, cfg.seed)
    return train(clf, data.rows, data.labels, tc).classifier


def prepare(cfg: RunConfig, data: Optional[Dataset] = None, clf: Optional[SplitClassifier] = None,
            prior: Optional[DataPrior] = None) -> BenchSetup:
    data = data if data is not None else load_dataset(cfg)
    clf = clf if clf is not None else fit_classifier(cfg, data)
    prior = prior if prior is not None else fit_prior(cfg, data)
    if prior.dim != data.rows.shape[1]:
        raise SchemaError(f"prior covers {prior.dim} latent columns, the dataset has {data.rows.shape[1]}")
    preds = predict(clf, data.rows)
    policy = data.schema.latent_policy()
    lap = LaplaceConfig(restarts=cfg.laplace.restarts, lr=cfg.laplace.lr, steps=cfg.laplace.steps,
                        min_target_prob=cfg.laplace.min_target_prob, seed=cfg.seed)
    ctx = GenContext(clf, prior, data.rows, preds, policy, lap)
    _logger.info("prior (%s) and classifier ready; accuracy %.3f",
                 prior.source.value, float(np.mean(preds == data.labels)))
    return BenchSetup(cfg, data, clf, prior, preds, policy, ctx)


def choose_references(setup: BenchSetup, n: int, skip: int = 0) -> List[Tuple[int, int]]:
    """(row index, target) pairs for rows the classifier does not already put
    in the target class; default target is the next class, (pred + 1) mod m."""
    m = setup.clf.class_count
    order = rng_stream(setup.cfg.seed, REFERENCE_STREAM).permutation(setup.preds.shape[0])
    picked = []
    for i in order:
        target = setup.cfg.target if setup.cfg.target is not None else (int(setup.preds[i]) + 1) % m
        if target >= m:
            raise ConfigError(f"target {target} is outside the {m} classes")
        if setup.preds[i] != target:
            picked.append((int(i), int(target)))
    return picked[skip:skip + n]


def run_instance(setup: BenchSetup, method: str, params: MethodParams, task: int,
                 index: int, target: int) -> InstanceRecord:
    cfg = setup.cfg
    ref = setup.data.rows[index]
    req = GenRequest(ref, target, method, cfg.count, cfg.seed, params, TASK_BASE + task)
    try:
        res = generate(req, setup.ctx)
    except CounterfactualError as e:
        _logger.info("%s failed on row %d: %s", method, index, e)
        return InstanceRecord(method, task, index, target, False, f"{type(e).__name__}: {e}")
    cfs = res.counterfactuals
    valid = forward(setup.clf, cfs)[:, target] >= params.validity
    k = min(cfg.k_ynn, setup.data.rows.shape[0])
    return InstanceRecord(
        method, task, index, target, True,
        l2=float(np.mean([metric_l2(c, ref) for c in cfs])),
        linf=float(np.mean([metric_linf(c, ref) for c in cfs])),
        ynn=float(np.mean([metric_ynn(c, setup.data.rows, setup.preds, target, k) for c in cfs])),
        redundancy=float(np.mean([metric_redundancy(c, ref, setup.clf, target) for c in cfs])),
        diversity=metric_diversity(cfs),
        seconds=res.seconds / cfs.shape[0] if cfg.timing == "wall" else 0.0,
        success=float(np.mean(valid)),
    )


def run_method(setup: BenchSetup, method: str, params: MethodParams,
               refs: Sequence[Tuple[int, int]]) -> List[InstanceRecord]:
    def _task(item):
        task, (index, target) = item
        return run_instance(setup, method, params, task, index, target)

    with ThreadPoolExecutor(max_workers=setup.cfg.workers) as ex:
        records = list(ex.map(_task, enumerate(refs)))
    return sorted(records, key=lambda r: r.task)


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate(method: str, records: Sequence[InstanceRecord], params=None,
              flagged: bool = False) -> MetricsReport:
    """Means over successful instances; failures are counted, never averaged in."""
    ok = [r for r in sorted(records, key=lambda r: r.task) if r.ok]
    means = {m: _mean(getattr(r, m) for r in ok) for m in METRIC_NAMES}
    return MetricsReport(method, len(ok), len(records) - len(ok), params=dict(params or {}),
                         flagged=flagged, **means)


def select_grid_point(scores: Sequence[Tuple[float, Optional[float]]]) -> Tuple[int, bool]:
    """Index of the chosen (success, mean l2) grid point and whether it is flagged.

    Lowest l2 among points with success >= SUCCESS_FLOOR, first in grid order
    on ties; without any such point, the highest success, flagged.
    """
    if not scores:
        raise ValueError("grid is empty")
    best = None
    for i, (success, l2) in enumerate(scores):
        if success >= SUCCESS_FLOOR and l2 is not None and (best is None or l2 < scores[best][1]):
            best = i
    if best is not None:
        return best, False
    return int(np.argmax([s for s, _ in scores])), True


def grid_points(grid: Dict[str, List[float]]) -> List[Dict[str, float]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(setup: BenchSetup, spec: MethodSpec, grid: Dict[str, List[float]],
                refs: Sequence[Tuple[int, int]]):
    """Returns (chosen params, chosen point, flagged, per-point rows)."""
    points = grid_points(grid)
    scores, rows = [], []
    for point in points:
        params = spec.method_params(**point)
        records = run_method(setup, spec.name, params, refs)
        success = float(np.mean([r.success if r.ok else 0.0 for r in records])) if records else 0.0
        l2 = _mean(r.l2 for r in records if r.ok)
        scores.append((success, l2))
        rows.append([spec.name, *[point[k] for k in grid], success, l2])
    chosen, flagged = select_grid_point(scores)
    if flagged:
        _logger.warning("%s: no grid point reached %.0f%% success; using the best (%.3f)",
                        spec.name, 100 * SUCCESS_FLOOR, scores[chosen][0])
    return spec.method_params(**points[chosen]), points[chosen], flagged, rows


def run_benchmark(cfg: RunConfig, setup: Optional[BenchSetup] = None) -> BenchResult:
    setup = setup if setup is not None else prepare(cfg)
    refs = choose_references(setup, cfg.references)
    if not refs:
        notice = "no references need a class change; nothing to benchmark"
        _logger.warning(notice)
        return BenchResult([], [], notice=notice)
    held_out = choose_references(setup, GRID_BATCH, skip=len(refs)) or refs
    reports, records, grid_rows = [], [], []
    for spec in cfg.methods:
        t0 = time.perf_counter()
        params, point, flagged = spec.method_params(), {}, False
        if cfg.grid:
            params, point, flagged, rows = grid_search(setup, spec, cfg.grid, held_out)
            grid_rows.extend(rows)
        recs = run_method(setup, spec.name, params, refs)
        report = aggregate(spec.name, recs, point, flagged)
        _logger.info("%s: %d ok, %d failed in %.1fs", spec.name, report.n, report.failures,
                     time.perf_counter() - t0)
        reports.append(report)
        records.extend(recs)
    return BenchResult(reports, records, grid_rows)


def report_table(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    cols = {"method": [r.method for r in reports]}
    for name, title in TABLE_COLUMNS.items():
        cols[title] = [getattr(r, name) for r in reports]
    cols["n"] = [r.n for r in reports]
    cols["failures"] = [r.failures for r in reports]
    return pd.DataFrame(cols)


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_reports(result: BenchResult, out: str, grid_keys: Sequence[str] = ()) -> None:
    os.makedirs(out, exist_ok=True)
    write_csv(os.path.join(out, "report.csv"), ["method", "metric", "value", "n", "failures"],
              [[r.method, m, getattr(r, m), r.n, r.failures] for r in result.reports for m in METRIC_NAMES])
    write_csv(os.path.join(out, "records.csv"), list(InstanceRecord.FIELDS),
              [r.row() for r in result.records])
    if result.grid:
        write_csv(os.path.join(out, "grid.csv"), ["method", *grid_keys, "success", "l2"], result.grid)
    if result.reports:
        table = report_table(result.reports).astype(object)
        text = table.to_string(index=False, formatters={c: _cell for c in table.columns})
        flagged = [r.method for r in result.reports if r.flagged]
        if flagged:
            text += f"\n\nflagged (grid never reached {SUCCESS_FLOOR:.0%} success): {', '.join(flagged)}"
    else:
        text = result.notice or "no methods configured"
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(text + "\n")


def summary_line(report: MetricsReport) -> str:
    return (f"{report.method}: l2 {_cell(report.l2)}  yNN {_cell(report.ynn)}  "
            f"success {_cell(report.success)}  n={report.n} failures={report.failures}")
