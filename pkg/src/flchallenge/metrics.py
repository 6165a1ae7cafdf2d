"""Site-level (weighted kappa, AUC) and image-level (distance) metrics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, EmptySplitError, ShapeError, UndefinedAUC, UndefinedKappa
from .synthdata import N_CLASSES, RACES, SiteDataset

MAX_GAP = N_CLASSES - 1
LOW_SAMPLE_N = 10


class KappaWeighting(str, Enum):
    LINEAR = "Linear"
    QUADRATIC = "Quadratic"


class Grouping(str, Enum):
    BY_SITE = "BySite"
    OVERALL = "Overall"
    BY_RACE = "ByRace"
    BY_AGE_DECADE = "ByAgeDecade"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes 1..4, columns predicted classes 1..4."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (N_CLASSES, N_CLASSES):
            raise ShapeError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}")
        if np.any(counts < 0):
            raise DomainError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_labels(cls, labels, preds) -> "ConfusionMatrix":
        labels, preds = _check_classes(labels, preds)
        counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        np.add.at(counts, (labels - 1, preds - 1), 1)
        return cls(counts)

    def expected(self) -> np.ndarray:
        return np.outer(self.counts.sum(axis=1), self.counts.sum(axis=0)) / self.n

    def is_diagonal(self) -> bool:
        return not np.any(self.counts - np.diag(np.diag(self.counts)))


def disagreement_weights(weighting: KappaWeighting) -> np.ndarray:
    i = np.arange(N_CLASSES)
    w = np.abs(i[:, None] - i[None, :]) / MAX_GAP
    return w if KappaWeighting(weighting) is KappaWeighting.LINEAR else w**2


def weighted_kappa(cm: ConfusionMatrix, weighting: KappaWeighting = KappaWeighting.LINEAR
                   ) -> float:
    """``1 - sum(w * O) / sum(w * E)`` with ``E`` from the marginals.

    When the expected disagreement is zero (all mass in one diagonal cell)
    the agreement is perfect and 1.0 is returned; see :func:`kappa_is_degenerate`.
    """
    if cm.n < 1:
        raise UndefinedKappa("empty confusion matrix")
    w = disagreement_weights(weighting)
    denom = float(np.sum(w * cm.expected()))
    if denom == 0.0:
        if cm.is_diagonal():
            return 1.0
        raise UndefinedKappa("zero expected disagreement")
    return 1.0 - float(np.sum(w * cm.counts)) / denom


def kappa_is_degenerate(cm: ConfusionMatrix) -> bool:
    return cm.n >= 1 and float(np.sum(disagreement_weights("Linear") * cm.expected())) == 0.0


def macro_ovr_auc(labels, class_probs) -> float:
    """Unweighted mean of one-vs-rest AUCs over classes present in ``labels``.

    Each AUC is the Mann-Whitney statistic with midranks, so tied scores
    count as half-concordant.
    """
    labels = np.asarray(labels)
    probs = np.asarray(class_probs, dtype=float)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ShapeError("class_probs must be (n, n_classes) aligned with labels")
    present = np.unique(labels)
    if present.size < 2:
        raise UndefinedAUC("AUC needs at least two distinct labels")
    aucs = []
    for c in present:
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = labels.size - n_pos
        ranks = rankdata(probs[:, int(c) - 1])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(aucs))


@dataclass(frozen=True)
class PerImageDistances:
    image_ids: np.ndarray
    linear: np.ndarray
    quadratic: np.ndarray

    def __len__(self) -> int:
        return int(self.image_ids.size)

    def take(self, idx) -> "PerImageDistances":
        return PerImageDistances(self.image_ids[idx], self.linear[idx], self.quadratic[idx])

    def to_dict(self) -> dict:
        return {"image_ids": self.image_ids.tolist(), "linear": self.linear.tolist(),
                "quadratic": self.quadratic.tolist()}


def _check_classes(labels, preds):
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.shape != preds.shape or labels.ndim != 1:
        raise ShapeError("labels and predictions must be equal-length 1-D arrays")
    for arr, name in ((labels, "label"), (preds, "prediction")):
        if arr.size and (np.any(arr != np.round(arr)) or arr.min() < 1 or arr.max() > N_CLASSES):
            raise DomainError(f"{name} outside 1..{N_CLASSES}")
    return labels.astype(np.int64), preds.astype(np.int64)


def per_image_distances(labels, preds, image_ids=None) -> PerImageDistances:
    """Class gap scaled to [0, 1] (divided by 3), and its square."""
    labels, preds = _check_classes(labels, preds)
    if labels.size == 0:
        raise ShapeError("need at least one image")
    ids = np.arange(labels.size) if image_ids is None else np.asarray(image_ids)
    linear = np.abs(preds - labels) / MAX_GAP
    return PerImageDistances(ids, linear, linear**2)


@dataclass(frozen=True)
class MetricReport:
    scope: str
    n: int
    lin_kappa: float
    quad_kappa: float
    auc: float
    distances: PerImageDistances = field(repr=False)
    flags: tuple[str, ...] = ()

    @property
    def mean_linear(self) -> float:
        return float(np.mean(self.distances.linear))

    @property
    def mean_quadratic(self) -> float:
        return float(np.mean(self.distances.quadratic))

    def to_dict(self, per_image: bool = True) -> dict:
        out = {"scope": self.scope, "n": self.n,
               "lin_kappa": _json_float(self.lin_kappa),
               "quad_kappa": _json_float(self.quad_kappa),
               "auc": _json_float(self.auc),
               "mean_linear_distance": self.mean_linear,
               "mean_quadratic_distance": self.mean_quadratic,
               "flags": list(self.flags)}
        if per_image:
            out["per_image"] = self.distances.to_dict()
        return out


def _json_float(x: float):
    return None if math.isnan(x) else x


def report_for(scope: str, labels, preds, probs, image_ids) -> MetricReport:
    labels, preds = _check_classes(labels, preds)
    cm = ConfusionMatrix.from_labels(labels, preds)
    flags = []
    if kappa_is_degenerate(cm):
        flags.append("kappa_degenerate")
    lin = weighted_kappa(cm, KappaWeighting.LINEAR)
    quad = weighted_kappa(cm, KappaWeighting.QUADRATIC)
    try:
        auc = macro_ovr_auc(labels, probs)
    except UndefinedAUC:
        auc = math.nan
        flags.append("auc_undefined")
    if labels.size < LOW_SAMPLE_N:
        flags.append("low_sample")
    return MetricReport(scope, int(labels.size), lin, quad, auc,
                        per_image_distances(labels, preds, image_ids), tuple(flags))


def age_decade(age) -> np.ndarray:
    """Nearest multiple of ten, halves rounded up (54 -> 50, 55 -> 60)."""
    return (np.floor(np.asarray(age) / 10 + 0.5) * 10).astype(np.int64)


@dataclass
class Predictions:
    """Per-image predictions pooled over sites in ascending site order."""

    image_id: np.ndarray
    site_id: np.ndarray
    label: np.ndarray
    race: np.ndarray
    age: np.ndarray
    pred: np.ndarray
    probs: np.ndarray

    def take(self, mask) -> "Predictions":
        return Predictions(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))


def predict_federation(predictor, federation: Sequence[SiteDataset], split) -> Predictions:
    """Run ``predictor`` on ``split`` of every site.

    ``predictor`` is either one model (anything with ``predict`` and
    ``predict_proba``) or a mapping from site id to model, which routes each
    site's images to its own personalized model.
    """
    parts = []
    for ds in sorted(federation, key=lambda s: s.primary_site):
        sub = ds.select(split)
        if len(sub) == 0:
            continue
        model = predictor
        if isinstance(predictor, Mapping):
            model = predictor[ds.primary_site]
        parts.append((sub, model.predict(sub.features), model.predict_proba(sub.features)))
    if not parts:
        raise EmptySplitError(f"no samples in split {split!r}")
    return Predictions(
        image_id=np.concatenate([p[0].image_id for p in parts]),
        site_id=np.concatenate([p[0].site_id for p in parts]),
        label=np.concatenate([p[0].label for p in parts]),
        race=np.concatenate([p[0].race for p in parts]),
        age=np.concatenate([p[0].age for p in parts]),
        pred=np.concatenate([p[1] for p in parts]),
        probs=np.concatenate([p[2] for p in parts]),
    )


def scopes_for(preds: Predictions, grouping: Grouping, sites: Iterable[int] = ()
               ) -> list[tuple[str, np.ndarray]]:
    grouping = Grouping(grouping)
    if grouping is Grouping.OVERALL:
        return [("overall", np.ones(preds.label.size, dtype=bool))]
    if grouping is Grouping.BY_SITE:
        return [(f"site-{s}", preds.site_id == s) for s in sites]
    if grouping is Grouping.BY_RACE:
        return [(f"race:{r}", preds.race == r) for r in RACES]
    decades = np.unique(age_decade(preds.age))
    return [(f"age:{d}", age_decade(preds.age) == d) for d in decades]


def reports_from_predictions(preds: Predictions, groupings, sites: Iterable[int] = ()
                             ) -> list[MetricReport]:
    if isinstance(groupings, (str, Grouping)):
        groupings = [groupings]
    reports = []
    for grouping in groupings:
        for scope, mask in scopes_for(preds, grouping, sites):
            if not mask.any():
                if Grouping(grouping) is Grouping.BY_SITE:
                    warnings.warn(f"scope {scope} is empty; omitted", stacklevel=3)
                continue
            sub = preds.take(mask)
            reports.append(report_for(scope, sub.label, sub.pred, sub.probs, sub.image_id))
    return reports


def evaluate(predictor, federation: Sequence[SiteDataset], split: str,
             grouping: Grouping | Sequence[Grouping] = (Grouping.BY_SITE, Grouping.OVERALL)
             ) -> list[MetricReport]:
    """One :class:`MetricReport` per non-empty scope, in grouping order.

    Race scopes follow the fixed race list, age scopes ascend. Sites with no
    images in ``split`` are skipped with a warning.
    """
    preds = predict_federation(predictor, federation, split)
    sites = sorted(ds.primary_site for ds in federation)
    return reports_from_predictions(preds, grouping, sites)
