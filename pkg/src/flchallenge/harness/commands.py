"""Experiment commands: data generation, training, evaluation, leaderboards.

Every command writes its outputs atomically under a directory and returns
the in-memory results. Outputs contain no timestamps, so reruns with the
same configuration produce identical files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy

from .. import __version__, _rng
from .._io import atomic_write_text
from ..aggregate import Ensemble
from ..errors import BudgetError, CheckpointError, ConfigError, EmptySplitError, SchemaError
from ..flcore import RunRecord, run_federated, sgd_epochs, steps_per_epoch
from ..metrics import (Grouping, MetricReport, evaluate, predict_federation,
                       reports_from_predictions)
from ..model import ModelSpec, ParamVector, SingleModel, init_params, load_params, save_params
from ..ranking import (BootstrapResult, DistanceMetric, MetricTable, RankResult,
                       SignificanceMap, bootstrap_stability, build_metric_table,
                       consensus_rank, rank_correlation, read_metric_csv, significance_map)
from ..synthdata import RACES, SiteDataset, pooled_dataset, write_csv, write_json
from .bundles import (ENSEMBLE, GLOBAL, GLOBAL_ONLY, PER_SITE, AlgorithmEntry,
                      builtin_bundles, pretrain)
from .config import ExperimentConfig

log = logging.getLogger(__name__)

INTERNAL = "Phase2Analog"
EXTERNAL = "ExternalValidation"
PREDICTOR_FILE = "predictor.json"
Z95 = 1.959963984540054


def _dump(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def reproducibility_manifest(cfg: ExperimentConfig, **extra) -> dict:
    out = {
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "versions": {"flchallenge": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    out.update(extra)
    return out


# --- data -------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out_dir=None) -> list[SiteDataset]:
    federation = cfg.data.load(cfg.seed)
    out = Path(out_dir or cfg.output_dir / "data")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(federation, out / "federation.csv")
    write_json(federation, out / "federation.json")
    _dump(out / "manifest.json", reproducibility_manifest(
        cfg, counts={str(ds.primary_site): ds.counts() for ds in federation}))
    return federation


# --- training ---------------------------------------------------------------

def _initial_params(cfg: ExperimentConfig, spec: ModelSpec, warm: bool) -> ParamVector:
    if cfg.warm_start is not None:
        return load_params(cfg.warm_start, spec)
    if warm:
        return pretrain(spec, cfg.seed)
    return init_params(spec, _rng.stream(cfg.seed, "init"))


def _save_run(out: Path, spec: ModelSpec, record: RunRecord, entry: AlgorithmEntry,
              cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_params(record.global_params, out / "global.json")
    clients = {}
    for cid, params in sorted(record.client_params.items()):
        save_params(params, out / f"client_{cid}.json")
        clients[str(cid)] = f"client_{cid}.json"
    atomic_write_text(out / "run_record.json", record.to_json() + "\n")
    _dump(out / PREDICTOR_FILE, {"model": spec.to_dict(), "global": "global.json",
                                 "clients": clients, "internal": entry.internal,
                                 "external": entry.external})
    _dump(out / "manifest.json", reproducibility_manifest(
        cfg, entry=entry.name, model=spec.to_dict(), rounds=entry.rounds.to_dict(),
        warm_start=entry.warm_start or cfg.warm_start is not None))
    # Wall time is the only non-deterministic output; it goes to a log file.
    atomic_write_text(out / "run.log", f"wall_time_secs {record.wall_time:.3f}\n"
                                        f"termination {record.termination}\n")


def default_entry(cfg: ExperimentConfig, name: str = "run") -> AlgorithmEntry:
    return AlgorithmEntry(name, cfg.model, cfg.rounds)


def cmd_run(cfg: ExperimentConfig, federation: Sequence[SiteDataset] | None = None,
            entry: AlgorithmEntry | None = None, out_dir=None,
            clock: Callable[[], float] = time.monotonic) -> RunRecord:
    """Train one algorithm and persist its checkpoints and run record.

    A :class:`~flchallenge.errors.MessageTooLarge` still writes the partial
    record before propagating.
    """
    federation = federation if federation is not None else cfg.data.load(cfg.seed)
    entry = entry or default_entry(cfg)
    out = Path(out_dir or cfg.output_dir / "runs" / entry.name)
    init = _initial_params(cfg, entry.model, entry.warm_start)
    try:
        record = run_federated(federation, entry.model, entry.rounds, cfg.seed, init=init,
                               clock=clock)
    except BudgetError as exc:
        if exc.record is not None:
            _save_run(out, entry.model, exc.record, entry, cfg)
        raise
    _save_run(out, entry.model, record, entry, cfg)
    log.info("%s: %s after %d rounds, %d bytes", entry.name, record.termination,
             record.rounds_completed, record.bytes_sent)
    return record


def central_step_budget(federation: Sequence[SiteDataset], cfg: ExperimentConfig) -> int:
    """Rounds x local epochs x mean per-client steps per epoch, rounded."""
    counts = [ds.counts()["Train"] for ds in federation if ds.counts()["Train"] > 0]
    if not counts:
        raise EmptySplitError("no Train samples")
    mean_steps = float(np.mean([steps_per_epoch(n, cfg.rounds.batch_size) for n in counts]))
    return int(round(cfg.rounds.n_rounds * cfg.rounds.local_epochs * mean_steps))


def train_central(cfg: ExperimentConfig, federation: Sequence[SiteDataset],
                  spec: ModelSpec | None = None) -> ParamVector:
    spec = spec or cfg.model
    train = pooled_dataset([ds for ds in federation if ds.counts()["Train"] > 0], "Train")
    params = _initial_params(cfg, spec, warm=False)
    params, _ = sgd_epochs(spec, params, train, lr=cfg.rounds.lr_local,
                           batch_size=cfg.rounds.batch_size,
                           rng=_rng.stream(cfg.seed, "batching", train.primary_site),
                           max_steps=central_step_budget(federation, cfg),
                           momentum=cfg.rounds.momentum)
    return params


def cmd_central_baseline(cfg: ExperimentConfig, federation: Sequence[SiteDataset] | None = None,
                         out_dir=None) -> tuple[ParamVector, list[MetricReport]]:
    """Train on pooled Train data and evaluate like a federated model."""
    federation = federation if federation is not None else cfg.data.load(cfg.seed)
    out = Path(out_dir or cfg.output_dir / "runs" / "central")
    params = train_central(cfg, federation)
    out.mkdir(parents=True, exist_ok=True)
    save_params(params, out / "global.json")
    _dump(out / PREDICTOR_FILE, {"model": cfg.model.to_dict(), "global": "global.json",
                                 "clients": {}, "internal": GLOBAL, "external": GLOBAL})
    _dump(out / "manifest.json", reproducibility_manifest(
        cfg, entry="central", model=cfg.model.to_dict(),
        steps=central_step_budget(federation, cfg)))
    reports = evaluate(SingleModel(cfg.model, params), _with_split(federation, cfg.split),
                       cfg.split, cfg.groupings)
    _dump(out / "reports.json", [r.to_dict() for r in reports])
    return params, reports


def _with_split(federation: Sequence[SiteDataset], split: str) -> list[SiteDataset]:
    """Sites that have images in ``split``; raises if there are none."""
    kept = [ds for ds in federation if ds.counts().get(split, 0) > 0]
    if not kept:
        raise EmptySplitError(f"no samples in split {split!r}")
    return kept


# --- evaluation ---------------------------------------------------------------

def load_predictor(manifest_path, mode: str | None = None, phase: str = INTERNAL):
    """Rebuild a predictor from a run directory's ``predictor.json``."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / PREDICTOR_FILE
    try:
        info = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read predictor manifest {manifest_path}: {exc}") from None
    spec = ModelSpec.from_dict(info["model"])
    root = manifest_path.parent
    mode = mode or info["external" if phase == EXTERNAL else "internal"]
    if mode in (GLOBAL, GLOBAL_ONLY):
        return SingleModel(spec, load_params(root / info["global"], spec),
                           global_only=mode == GLOBAL_ONLY)
    clients = {int(cid): SingleModel(spec, load_params(root / path, spec))
               for cid, path in info["clients"].items()}
    if not clients:
        raise CheckpointError(f"{manifest_path} lists no client checkpoints")
    if mode == PER_SITE:
        return clients
    if mode == ENSEMBLE:
        return Ensemble([clients[c] for c in sorted(clients)])
    raise ConfigError(f"unknown predictor mode {mode!r}", "mode")


def cmd_evaluate(manifest_path, federation: Sequence[SiteDataset], split: str = "Test2",
                 groupings: Sequence[str] = ("BySite", "Overall"), mode: str | None = None,
                 out_path=None) -> list[MetricReport]:
    phase = EXTERNAL if split == "External" else INTERNAL
    predictor = load_predictor(manifest_path, mode, phase)
    if phase == EXTERNAL:
        federation = [ds.select("External") for ds in federation]
    reports = evaluate(predictor, _with_split(federation, split), split, groupings)
    if out_path is not None:
        _dump(out_path, [r.to_dict() for r in reports])
    return reports


# --- leaderboards -----------------------------------------------------------

SITE_COLUMNS = ("lin_kappa", "quad_kappa", "auc")


@dataclass
class Leaderboard:
    phase: str
    table: MetricTable
    rank: RankResult
    reports: dict[str, list[MetricReport]]
    bootstrap: dict[str, BootstrapResult] = field(default_factory=dict)
    significance: dict[str, SignificanceMap] = field(default_factory=dict)
    unranked: dict[str, list[MetricReport]] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)

    @property
    def ordering(self) -> tuple[str, ...]:
        return self.rank.ordering

    def rows(self) -> list[dict]:
        out = []
        for pos, name in enumerate(self.rank.ordering, 1):
            i = self.table.algorithms.index(name)
            row = {"rank": pos, "algo": name, "avg_rank": float(self.rank.avg_rank[i])}
            row.update(zip(self.table.metric_names, self.table.values[i].tolist()))
            out.append(row)
        scopes = _scopes_of(self.table)
        for name, reports in self.unranked.items():
            try:
                extra = build_metric_table({name: reports}, scopes,
                                           _has_image_columns(self.table))
            except Exception:  # noqa: BLE001 - unranked rows are best effort
                continue
            row = {"rank": "N/A", "algo": name, "avg_rank": "N/A"}
            row.update(zip(extra.metric_names, extra.values[0].tolist()))
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["rank", "algo", "avg_rank", *self.table.metric_names]
        w.writerow(header)
        for row in self.rows():
            w.writerow([_fmt(row.get(h, "")) for h in header])
        return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _scopes_of(table: MetricTable) -> tuple[str, ...]:
    scopes = []
    for name in table.metric_names:
        if name.startswith("lin_kappa_"):
            scopes.append(name[len("lin_kappa_"):])
    return tuple(scopes)


def _has_image_columns(table: MetricTable) -> bool:
    return any(n.startswith("mean_linear_distance_") for n in table.metric_names)


def _phase_data(federation: Sequence[SiteDataset], phase: str, split: str):
    if phase == EXTERNAL:
        data = [ds.select("External") for ds in federation]
        data = [ds for ds in data if len(ds)]
        if not data:
            raise EmptySplitError("no External samples")
        return data, "External", (Grouping.OVERALL,), ("overall",)
    data = [ds.select(split) for ds in federation]
    data = [ds for ds in data if len(ds)]
    if not data:
        raise EmptySplitError(f"no {split} samples")
    sites = tuple(f"site-{ds.primary_site}" for ds in sorted(data, key=lambda d: d.primary_site))
    return data, split, (Grouping.BY_SITE, Grouping.OVERALL), sites + ("overall",)


def cmd_leaderboard(entries: Sequence[AlgorithmEntry], federation: Sequence[SiteDataset],
                    phase: str, cfg: ExperimentConfig, out_dir=None,
                    unranked: Mapping[str, Path] | None = None) -> Leaderboard:
    """Score saved checkpoints, rank them, and analyze ranking stability.

    Only checkpoints are read; nothing is retrained. In the external phase
    only External images are passed to the models.
    """
    if phase not in (INTERNAL, EXTERNAL):
        raise ConfigError(f"unknown phase {phase!r}", "phase")
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise ConfigError("algorithm names must be unique", "entries")
    data, split, groupings, scopes = _phase_data(federation, phase, cfg.split)

    reports, overall = {}, {}
    for entry in entries:
        if entry.artifacts is None:
            raise CheckpointError(f"{entry.name} has no saved checkpoints")
        predictor = load_predictor(entry.artifacts, phase=phase)
        reports[entry.name] = evaluate(predictor, data, split, groupings)
        overall[entry.name] = next(r for r in reports[entry.name] if r.scope == "overall")

    table = build_metric_table(reports, scopes, cfg.include_image_level)
    rank = consensus_rank(table)
    board = Leaderboard(phase, table, rank, reports)
    if len(entries) >= 2:
        per_image = {n: overall[n].distances for n in names}
        for metric in DistanceMetric:
            key = "linear" if metric is DistanceMetric.LINEAR else "quadratic"
            board.bootstrap[key] = bootstrap_stability(
                per_image, metric, cfg.n_trials, _rng.derive_seed(cfg.seed, "bootstrap"))
            board.significance[key] = significance_map(per_image, metric, cfg.alpha,
                                                       cfg.test)
    else:
        board.notices.append("fewer than two entries: bootstrap and significance skipped")

    for name, path in (unranked or {}).items():
        predictor = load_predictor(path, phase=phase)
        board.unranked[name] = evaluate(predictor, data, split, groupings)

    if out_dir is not None:
        write_leaderboard(board, Path(out_dir))
    return board


def write_leaderboard(board: Leaderboard, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "leaderboard.csv", board.to_csv())
    atomic_write_text(out / "metric_table.csv", board.table.to_csv())
    atomic_write_text(out / "ranks.csv", board.rank.to_csv())
    _dump(out / "ranks.json", {"phase": board.phase, **board.rank.to_dict(),
                               "notices": board.notices})
    _dump(out / "reports.json", {name: [r.to_dict() for r in reps]
                                 for name, reps in {**board.reports, **board.unranked}.items()})
    for key, boot in board.bootstrap.items():
        _dump(out / f"bootstrap_{key}.json", boot.to_dict())
        atomic_write_text(out / f"bootstrap_{key}_long.csv", boot.long_csv())
    for key, sig in board.significance.items():
        _dump(out / f"significance_{key}.json", sig.to_dict())
        atomic_write_text(out / f"significance_{key}.csv", sig.to_csv())


def compare_phases(internal: Leaderboard, external: Leaderboard, out_path=None) -> dict:
    result = {"spearman": rank_correlation(internal.rank, external.rank),
              "internal_ordering": list(internal.ordering),
              "external_ordering": list(external.ordering)}
    if out_path is not None:
        _dump(out_path, result)
    return result


# --- demographics -------------------------------------------------------------

def normal_ci(scores: np.ndarray) -> tuple[float, float]:
    """Mean and 95% half-width under the normal approximation."""
    scores = np.asarray(scores, dtype=float)
    if scores.size < 2:
        return float(scores.mean()), math.nan
    return float(scores.mean()), float(Z95 * scores.std(ddof=1) / math.sqrt(scores.size))


def _check_demographics(federation: Sequence[SiteDataset]) -> None:
    for ds in federation:
        if ds.race is None or ds.age is None or len(ds.race) != len(ds):
            raise SchemaError(f"site {ds.primary_site} lacks demographic fields")
        bad = set(np.unique(ds.race)) - set(RACES)
        if "" in set(np.unique(ds.race)) or bad:
            raise SchemaError(f"site {ds.primary_site} has unknown race values {sorted(bad)}")


@dataclass
class DemographicsBundle:
    race_rows: list[dict]
    age_rows: list[dict]


def cmd_demographics(entries: Sequence[AlgorithmEntry], federation: Sequence[SiteDataset],
                     split: str = "Test2", out_dir=None) -> DemographicsBundle:
    """Quadratic kappa per race (per site and pooled) and per age decade."""
    _check_demographics(federation)
    data = [ds.select(split) for ds in federation]
    data = [ds for ds in data if len(ds)]
    if not data:
        raise EmptySplitError(f"no {split} samples")
    race_rows, age_rows = [], []
    pooled_scores: dict[int, list[np.ndarray]] = {}
    pooled_kappa: dict[int, list[float]] = {}
    for entry in entries:
        predictor = load_predictor(entry.artifacts, phase=INTERNAL)
        preds = predict_federation(predictor, data, split)
        for site in [*sorted({ds.primary_site for ds in data}), "all"]:
            sub = preds if site == "all" else preds.take(preds.site_id == site)
            for rep in reports_from_predictions(sub, Grouping.BY_RACE):
                race_rows.append({"algo": entry.name, "site": site,
                                  "race": rep.scope.split(":", 1)[1], "n": rep.n,
                                  "quad_kappa": rep.quad_kappa,
                                  "low_sample": "low_sample" in rep.flags})
        for rep in reports_from_predictions(preds, Grouping.BY_AGE_DECADE):
            decade = int(rep.scope.split(":", 1)[1])
            scores = 1.0 - rep.distances.quadratic
            mean, half = normal_ci(scores)
            age_rows.append({"algo": entry.name, "age_decade": decade, "n": rep.n,
                             "quad_kappa": rep.quad_kappa, "mean_quadratic_score": mean,
                             "ci_half_width": half, "ci_low": mean - half,
                             "ci_high": mean + half})
            pooled_scores.setdefault(decade, []).append(scores)
            pooled_kappa.setdefault(decade, []).append(rep.quad_kappa)
    for decade in sorted(pooled_scores):
        scores = np.concatenate(pooled_scores[decade])
        mean, half = normal_ci(scores)
        age_rows.append({"algo": "all", "age_decade": decade, "n": int(scores.size),
                         "quad_kappa": float(np.mean(pooled_kappa[decade])),
                         "mean_quadratic_score": mean, "ci_half_width": half,
                         "ci_low": mean - half, "ci_high": mean + half})
    bundle = DemographicsBundle(race_rows, age_rows)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_text(out / "race_quad_kappa.csv", _rows_csv(race_rows))
        atomic_write_text(out / "age_quad_kappa.csv", _rows_csv(age_rows))
    return bundle


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


# --- standalone ranking -----------------------------------------------------

def cmd_rank(csv_path, columns: Sequence[str] | None = None,
             lower_better: Sequence[str] = (), out_dir=None) -> RankResult:
    table = read_metric_csv(csv_path, columns, lower_better)
    result = consensus_rank(table)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_text(out / "ranks.csv", result.to_csv())
        _dump(out / "ranks.json", result.to_dict())
    return result


# --- full challenge -----------------------------------------------------------

def challenge_entries(cfg: ExperimentConfig) -> list[AlgorithmEntry]:
    entries = builtin_bundles(cfg.model.d, cfg.rounds.n_rounds, base=cfg.rounds)
    if cfg.bundles:
        unknown = set(cfg.bundles) - {e.name for e in entries}
        if unknown:
            raise ConfigError(f"unknown bundles {sorted(unknown)}", "leaderboard.bundles")
        entries = [e for e in entries if e.name in cfg.bundles]
    return [e.with_artifacts(cfg.output_dir / "runs" / e.name) for e in entries]


def train_entries(cfg: ExperimentConfig, federation, entries, reuse: bool = True) -> None:
    for entry in entries:
        if reuse and (entry.artifacts / PREDICTOR_FILE).exists():
            continue
        cmd_run(cfg, federation, entry, entry.artifacts)


def run_challenge(cfg: ExperimentConfig, phases: Sequence[str] = (INTERNAL, EXTERNAL),
                  train: bool = True) -> dict:
    """Generate data, train every bundle, and build both leaderboards."""
    federation = cmd_gen_data(cfg)
    entries = challenge_entries(cfg)
    central_dir = cfg.output_dir / "runs" / "central"
    if train:
        train_entries(cfg, federation, entries, reuse=False)
        cmd_central_baseline(cfg, federation, central_dir)
    boards = {}
    for phase in phases:
        extra = {"central": central_dir} if (central_dir / PREDICTOR_FILE).exists() else None
        out = cfg.output_dir / ("leaderboard_internal" if phase == INTERNAL
                                else "leaderboard_external")
        boards[phase] = cmd_leaderboard(entries, federation, phase, cfg, out, unranked=extra)
    summary = {"leaderboards": boards}
    if INTERNAL in boards and EXTERNAL in boards:
        summary["comparison"] = compare_phases(boards[INTERNAL], boards[EXTERNAL],
                                               cfg.output_dir / "phase_comparison.json")
    if INTERNAL in phases:
        summary["demographics"] = cmd_demographics(entries, federation, cfg.split,
                                                   cfg.output_dir / "demographics")
    return summary
