"""Consensus ranking, bootstrap rank stability, and pairwise significance maps.

The consensus score of an algorithm is the mean of its per-metric ranks
(fractional ranks for ties); lower is better.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import binomtest, rankdata, spearmanr, wilcoxon

from . import _rng
from ._io import atomic_write_text
from .errors import AlignmentError, ConfigError, DataError
from .metrics import MetricReport, PerImageDistances

DEFAULT_SCOPES = ("site-1", "site-2", "site-3", "overall")
SITE_LEVEL = ("lin_kappa", "quad_kappa", "auc")
IMAGE_LEVEL = ("mean_linear_distance", "mean_quadratic_distance")
# Means closer than this are treated as tied in bootstrap trials.
TIE_DECIMALS = 12


class Direction(str, Enum):
    HIGHER = "HigherBetter"
    LOWER = "LowerBetter"


class DistanceMetric(str, Enum):
    LINEAR = "LinearMean"
    QUADRATIC = "QuadraticMean"


@dataclass(frozen=True)
class MetricTable:
    algorithms: tuple[str, ...]
    metrics: tuple[tuple[str, Direction], ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "metrics",
                           tuple((name, Direction(d)) for name, d in self.metrics))
        if values.shape != (len(self.algorithms), len(self.metrics)):
            raise DataError(f"values shape {values.shape} does not match "
                            f"{len(self.algorithms)} algorithms x {len(self.metrics)} metrics")
        if not self.metrics:
            raise DataError("need at least one metric")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise DataError("algorithm names must be unique")
        object.__setattr__(self, "values", values)

    @property
    def metric_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.metrics)

    def restrict(self, names: Sequence[str]) -> "MetricTable":
        idx = [self.metric_names.index(n) for n in names]
        return MetricTable(self.algorithms, [self.metrics[i] for i in idx], self.values[:, idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algo", *self.metric_names])
        for name, row in zip(self.algorithms, self.values):
            w.writerow([name, *(repr(float(v)) for v in row)])
        return buf.getvalue()


@dataclass(frozen=True)
class RankResult:
    algorithms: tuple[str, ...]
    metric_names: tuple[str, ...]
    ranks: np.ndarray
    avg_rank: np.ndarray
    ordering: tuple[str, ...]
    ties_broken: bool

    def position(self, algorithm: str) -> int:
        return self.ordering.index(algorithm) + 1

    def to_dict(self) -> dict:
        return {
            "ordering": list(self.ordering),
            "avg_rank": dict(zip(self.algorithms, self.avg_rank.tolist())),
            "ranks": {a: dict(zip(self.metric_names, r.tolist()))
                      for a, r in zip(self.algorithms, self.ranks)},
            "ties_broken": self.ties_broken,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "algo", "avg_rank", *self.metric_names])
        for pos, name in enumerate(self.ordering, 1):
            i = self.algorithms.index(name)
            w.writerow([pos, name, repr(float(self.avg_rank[i])),
                        *(repr(float(r)) for r in self.ranks[i])])
        return buf.getvalue()


def consensus_rank(table: MetricTable) -> RankResult:
    """Rank every metric separately, then average ranks per algorithm.

    Ties within a metric share the average of the ranks they span. The
    final ordering sorts by mean rank; equal means are ordered by name and
    reported through ``ties_broken``.
    """
    if np.any(np.isnan(table.values)):
        raise DataError("metric table contains NaN")
    cols = []
    for j, (_, direction) in enumerate(table.metrics):
        col = table.values[:, j]
        cols.append(rankdata(-col if direction is Direction.HIGHER else col, method="average"))
    ranks = np.column_stack(cols)
    avg = ranks.mean(axis=1)
    order = sorted(range(len(table.algorithms)), key=lambda i: (avg[i], table.algorithms[i]))
    ties = len(np.unique(avg)) < len(avg)
    return RankResult(table.algorithms, table.metric_names, ranks, avg,
                      tuple(table.algorithms[i] for i in order), ties)


# --- metric tables from evaluation reports --------------------------------

def metric_columns(scopes: Sequence[str] = DEFAULT_SCOPES, include_image_level: bool = True
                   ) -> list[tuple[str, Direction]]:
    cols = [(f"{m}_{s}", Direction.HIGHER) for s in scopes for m in SITE_LEVEL]
    if include_image_level:
        cols += [(f"{m}_{s}", Direction.LOWER) for s in scopes for m in IMAGE_LEVEL]
    return cols


def _report_value(report: MetricReport, metric: str) -> float:
    return {
        "lin_kappa": report.lin_kappa,
        "quad_kappa": report.quad_kappa,
        "auc": report.auc,
        "mean_linear_distance": report.mean_linear,
        "mean_quadratic_distance": report.mean_quadratic,
    }[metric]


def build_metric_table(reports: Mapping[str, Sequence[MetricReport]],
                       scopes: Sequence[str] = DEFAULT_SCOPES,
                       include_image_level: bool = True) -> MetricTable:
    """Default layout: 12 site-level columns then 8 image-level columns."""
    algorithms = list(reports)
    columns = metric_columns(scopes, include_image_level)
    cells = [(m, s) for s in scopes for m in SITE_LEVEL]
    if include_image_level:
        cells += [(m, s) for s in scopes for m in IMAGE_LEVEL]
    values = np.empty((len(algorithms), len(columns)))
    for i, algo in enumerate(algorithms):
        by_scope = {r.scope: r for r in reports[algo]}
        missing = [s for s in scopes if s not in by_scope]
        if missing:
            raise AlignmentError(f"{algo} has no report for scopes {missing}")
        for j, (metric, scope) in enumerate(cells):
            values[i, j] = _report_value(by_scope[scope], metric)
    return MetricTable(algorithms, columns, values)


# --- bootstrap stability ----------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    algorithms: tuple[str, ...]
    metric: DistanceMetric
    n_trials: int
    seed: int
    rank_samples: np.ndarray
    rank_frequency: np.ndarray
    median_rank: np.ndarray
    interval: np.ndarray

    def rank_counts(self) -> list[tuple[str, float, int]]:
        """Long form ``(algorithm, rank, count)`` over the observed rank values."""
        rows = []
        for i, algo in enumerate(self.algorithms):
            counts = Counter(self.rank_samples[:, i].tolist())
            rows.extend((algo, r, counts[r]) for r in sorted(counts))
        return rows

    def to_dict(self) -> dict:
        return {
            "metric": self.metric.value, "n_trials": self.n_trials, "seed": self.seed,
            "algorithms": list(self.algorithms),
            "rank_frequency": self.rank_frequency.tolist(),
            "median_rank": dict(zip(self.algorithms, self.median_rank.tolist())),
            "interval_95": {a: iv.tolist() for a, iv in zip(self.algorithms, self.interval)},
        }

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algorithm", "rank", "count"])
        for algo, rank, count in self.rank_counts():
            w.writerow([algo, repr(float(rank)), count])
        return buf.getvalue()


def _aligned(per_image: Mapping[str, PerImageDistances], metric: DistanceMetric
             ) -> tuple[tuple[str, ...], np.ndarray]:
    names = tuple(per_image)
    if not names:
        raise AlignmentError("no algorithms")
    ref = np.sort(per_image[names[0]].image_ids)
    rows = []
    for name in names:
        d = per_image[name]
        order = np.argsort(d.image_ids, kind="stable")
        if not np.array_equal(d.image_ids[order], ref):
            raise AlignmentError(f"{name} was scored on a different image set")
        vals = d.linear if DistanceMetric(metric) is DistanceMetric.LINEAR else d.quadratic
        rows.append(np.asarray(vals, dtype=float)[order])
    return names, np.vstack(rows)


def bootstrap_stability(per_image: Mapping[str, PerImageDistances],
                        metric: DistanceMetric = DistanceMetric.LINEAR,
                        n_trials: int = 1000, seed: int = 0) -> BootstrapResult:
    """Paired bootstrap of the ranking by mean per-image distance.

    Trial ``t`` draws image indices with replacement from the stream
    ``(seed, "bootstrap", t)`` and applies the same draw to every algorithm.
    Tied ranks are split evenly across the positions they span in
    ``rank_frequency``.
    """
    if n_trials < 1:
        raise ConfigError("must be >= 1", "n_trials")
    metric = DistanceMetric(metric)
    names, vals = _aligned(per_image, metric)
    n_alg, n = vals.shape
    samples = np.empty((n_trials, n_alg))
    freq = np.zeros((n_alg, n_alg))
    for t in range(n_trials):
        idx = _rng.stream(seed, "bootstrap", t).integers(0, n, size=n)
        means = np.round(vals[:, idx].mean(axis=1), TIE_DECIMALS)
        ranks = rankdata(means, method="average")
        samples[t] = ranks
        lo = rankdata(means, method="min").astype(int)
        hi = rankdata(means, method="max").astype(int)
        for a in range(n_alg):
            span = hi[a] - lo[a] + 1
            freq[a, lo[a] - 1:hi[a]] += 1.0 / span
    median = np.median(samples, axis=0)
    interval = np.percentile(samples, [2.5, 97.5], axis=0).T
    return BootstrapResult(names, metric, n_trials, seed, samples, freq, median, interval)


# --- significance maps ------------------------------------------------------

@dataclass(frozen=True)
class SignificanceMap:
    """``p_values[i, j]``: one-sided test that algorithm ``i`` has smaller
    distances than algorithm ``j``."""

    algorithms: tuple[str, ...]
    metric: DistanceMetric
    p_values: np.ndarray
    alpha: float

    @property
    def significant(self) -> np.ndarray:
        sig = self.p_values < self.alpha
        np.fill_diagonal(sig, False)
        return sig

    def verdict(self, better: str, worse: str) -> str:
        i, j = self.algorithms.index(better), self.algorithms.index(worse)
        return "SignificantlyBetter" if self.significant[i, j] else "NotSignificant"

    def mutually_significant_pairs(self) -> list[tuple[str, str]]:
        sig = self.significant
        return [(self.algorithms[i], self.algorithms[j])
                for i in range(len(sig)) for j in range(i + 1, len(sig))
                if sig[i, j] and sig[j, i]]

    def to_dict(self) -> dict:
        p = [[None if i == j else float(self.p_values[i, j]) for j in range(len(self.algorithms))]
             for i in range(len(self.algorithms))]
        return {"metric": self.metric.value, "alpha": self.alpha,
                "algorithms": list(self.algorithms), "p_values": p,
                "significant": self.significant.tolist()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["better", "worse", "p_value", "verdict"])
        for i, a in enumerate(self.algorithms):
            for j, b in enumerate(self.algorithms):
                if i != j:
                    w.writerow([a, b, repr(float(self.p_values[i, j])), self.verdict(a, b)])
        return buf.getvalue()


def signed_rank_pvalue(diff: np.ndarray) -> float:
    """P-value for H1 "differences tend to be negative"; zeros are dropped."""
    diff = np.asarray(diff, dtype=float)
    diff = diff[diff != 0]
    if diff.size == 0:
        return 1.0
    return float(wilcoxon(diff, alternative="less", zero_method="wilcox").pvalue)


def sign_test_pvalue(diff: np.ndarray) -> float:
    """Exact one-sided sign test for H1 "differences tend to be negative"."""
    diff = np.asarray(diff, dtype=float)
    diff = diff[diff != 0]
    if diff.size == 0:
        return 1.0
    return float(binomtest(int(np.sum(diff < 0)), diff.size, 0.5, alternative="greater").pvalue)


PAIRED_TESTS = {"wilcoxon": signed_rank_pvalue, "sign": sign_test_pvalue}


def significance_map(per_image: Mapping[str, PerImageDistances],
                     metric: DistanceMetric = DistanceMetric.LINEAR,
                     alpha: float = 0.05, test: str = "wilcoxon") -> SignificanceMap:
    if not 0 < alpha <= 0.5:
        raise ConfigError("must be in (0, 0.5]", "alpha")
    if test not in PAIRED_TESTS:
        raise ConfigError(f"unknown test {test!r}; choose from {sorted(PAIRED_TESTS)}", "test")
    pvalue = PAIRED_TESTS[test]
    metric = DistanceMetric(metric)
    names, vals = _aligned(per_image, metric)
    k = len(names)
    p = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(k):
            if i != j:
                p[i, j] = pvalue(vals[i] - vals[j])
    return SignificanceMap(names, metric, p, alpha)


# --- comparisons and I/O ---------------------------------------------------

def rank_correlation(a: RankResult, b: RankResult) -> float:
    """Spearman correlation of final positions over the shared algorithms."""
    common = [x for x in a.ordering if x in b.ordering]
    if len(common) < 2:
        raise AlignmentError("need at least two shared algorithms")
    pa = [a.position(x) for x in common]
    pb = [b.position(x) for x in common]
    rho = spearmanr(pa, pb).statistic
    return float(rho) if not math.isnan(rho) else 0.0


_NON_METRIC = {"rank", "algo", "algo.", "algorithm", "avg_rank", "avg. rank", "team"}


def read_metric_csv(path, columns: Sequence[str] | None = None,
                    lower_better: Sequence[str] = ()) -> MetricTable:
    """Read ``algo, metric1, metric2, ...``.

    Columns whose name contains "distance" or appears in ``lower_better``
    are lower-is-better; all others higher-is-better.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header = [h.strip() for h in rows[0]]
    lowered = [h.lower() for h in header]
    algo_col = next((i for i, h in enumerate(lowered) if h in ("algo", "algo.", "algorithm")), None)
    if algo_col is None:
        raise DataError(f"{path}: missing algo column")
    metric_idx = [i for i, h in enumerate(lowered) if h not in _NON_METRIC]
    if columns:
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: unknown columns {missing}")
        metric_idx = [header.index(c) for c in columns]
    metrics = [(header[i], Direction.LOWER if ("distance" in lowered[i] or header[i] in lower_better)
                else Direction.HIGHER) for i in metric_idx]
    try:
        values = np.array([[float(r[i]) for i in metric_idx] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return MetricTable([r[algo_col].strip() for r in rows[1:]], metrics, values)


def write_text(path, text: str) -> None:
    atomic_write_text(path, text)


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
