"""Server-side aggregation, SCAFFOLD control variates, Top-k compression
and logit-averaging ensembles."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError
from .messages import ClientUpdate, SparseDelta
from .model import ModelKind, ModelSpec, ParamVector, SingleModel, scores_to_labels, scores_to_probs


class AggKind(str, Enum):
    FEDAVG = "FedAvg"
    FEDPROX = "FedProx"
    SCAFFOLD = "Scaffold"


class Weighting(str, Enum):
    BY_SAMPLES = "BySamples"
    UNIFORM = "Uniform"


@dataclass(frozen=True)
class AggregatorSpec:
    kind: AggKind = AggKind.FEDAVG
    mu: float = 0.0
    topk_fraction: float | None = None
    weighting: Weighting = Weighting.BY_SAMPLES
    error_feedback: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", AggKind(self.kind))
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        if self.mu < 0:
            raise ConfigError("must be >= 0", "aggregator.mu")
        if self.kind is not AggKind.FEDPROX and self.mu:
            raise ConfigError("mu is only meaningful for FedProx", "aggregator.mu")
        if self.topk_fraction is not None and not 0 < self.topk_fraction <= 1:
            raise ConfigError("must be in (0, 1]", "aggregator.topk_fraction")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "mu": self.mu, "topk_fraction": self.topk_fraction,
                "weighting": self.weighting.value, "error_feedback": self.error_feedback}

    @classmethod
    def from_dict(cls, data) -> "AggregatorSpec":
        try:
            return cls(**dict(data))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), "aggregator") from None


# --- weighted averaging ----------------------------------------------------

def aggregation_weights(n_samples: Sequence[int], weighting: Weighting) -> list[float]:
    if Weighting(weighting) is Weighting.UNIFORM:
        return [1.0 / len(n_samples)] * len(n_samples)
    total = sum(n_samples)
    if total <= 0:
        raise ConfigError("BySamples weighting needs a positive total sample count",
                          "aggregator.weighting")
    return [n / total for n in n_samples]


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    layout = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != layout:
            raise ShapeError("client deltas have different layouts")
    acc = weights[0] * vectors[0]
    for w, v in zip(weights[1:], vectors[1:]):
        acc = acc + w * v
    return acc


def fedavg(updates: Sequence[ClientUpdate],
           weighting: Weighting = Weighting.BY_SAMPLES) -> ParamVector:
    """Weighted mean of client deltas, reduced in ascending client id order."""
    if not updates:
        raise ConfigError("no updates to aggregate", "updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    weights = aggregation_weights([u.n_samples for u in ordered], weighting)
    return weighted_sum([u.dense_delta() for u in ordered], weights)


# --- SCAFFOLD ----------------------------------------------------------------

@dataclass
class ScaffoldState:
    server_control: ParamVector
    client_controls: dict[int, ParamVector]

    @classmethod
    def zeros(cls, layout, client_ids: Sequence[int]) -> "ScaffoldState":
        zero = ParamVector.zeros(layout)
        return cls(zero, {cid: zero for cid in client_ids})


def scaffold_client_step(y: ParamVector, grad: ParamVector, c_i: ParamVector,
                         c: ParamVector, lr: float) -> ParamVector:
    """Drift-corrected local step ``y - lr * (grad - c_i + c)``."""
    for v in (y, grad, c_i, c):
        if not v.is_finite():
            raise NumericsError("non-finite SCAFFOLD input")
    return y - lr * (grad - c_i + c)


def scaffold_control_update(x_global: ParamVector, y_final: ParamVector, c_i: ParamVector,
                            c: ParamVector, local_steps: int, lr: float
                            ) -> tuple[ParamVector, ParamVector]:
    """Option II control refresh; returns ``(c_i_new, c_i_new - c_i)``."""
    if local_steps * lr == 0:
        raise ConfigError("local_steps * lr must be non-zero", "scaffold")
    if local_steps < 1 or lr <= 0:
        raise ConfigError("need local_steps >= 1 and lr > 0", "scaffold")
    c_new = c_i - c + (1.0 / (local_steps * lr)) * (x_global - y_final)
    return c_new, c_new - c_i


def scaffold_server_update(x_global: ParamVector, c: ParamVector,
                           updates: Sequence[ClientUpdate], lr_server: float,
                           weighting: Weighting) -> tuple[ParamVector, ParamVector]:
    """Apply model deltas (weighted) and control deltas (uniform mean)."""
    x_new = x_global + lr_server * fedavg(updates, weighting)
    ordered = sorted(updates, key=lambda u: u.client_id)
    controls = [u.control_delta for u in ordered if u.control_delta is not None]
    if controls:
        c = c + weighted_sum(controls, [1.0 / len(controls)] * len(controls))
    return x_new, c


# --- Top-k compression -----------------------------------------------------

@dataclass(frozen=True)
class ErrorFeedback:
    residual: ParamVector

    @classmethod
    def zeros(cls, layout) -> "ErrorFeedback":
        return cls(ParamVector.zeros(layout))


def topk_count(fraction: float, n: int) -> int:
    if not 0 < fraction <= 1:
        raise ConfigError("must be in (0, 1]", "topk_fraction")
    # round() guards against fraction*n landing a hair above an integer.
    return min(n, math.ceil(round(fraction * n, 9)))


def topk_compress(delta: ParamVector, ef: ErrorFeedback | None, fraction: float,
                  error_feedback: bool = True) -> tuple[SparseDelta, ErrorFeedback]:
    """Keep the ``ceil(fraction * len)`` largest-magnitude entries of
    ``delta + residual``; the rest becomes the next residual.

    Ties in magnitude go to the lower index. With ``error_feedback=False``
    the residual is ignored and stays zero.
    """
    layout = delta.layout
    if ef is None:
        ef = ErrorFeedback.zeros(layout)
    v = delta.flat()
    if error_feedback:
        if ef.residual.layout != layout:
            raise ShapeError("residual layout differs from delta layout")
        v = v + ef.residual.flat()
    k = topk_count(fraction, v.size)
    order = np.argsort(-np.abs(v), kind="stable")
    keep = np.sort(order[:k])
    sparse = SparseDelta(keep, v[keep], v.size, layout)
    if not error_feedback:
        return sparse, ErrorFeedback.zeros(layout)
    rest = v.copy()
    rest[keep] = 0.0
    return sparse, ErrorFeedback(ParamVector.from_flat(layout, rest))


# --- ensembles ----------------------------------------------------------------

class Ensemble:
    """Average member logits (cumulative logits for CORAL), then decode."""

    def __init__(self, members: Sequence[SingleModel]):
        if not members:
            raise ConfigError("ensemble needs at least one model", "models")
        kinds = {m.spec.kind is ModelKind.CORAL for m in members}
        classes = {m.spec.n_classes for m in members}
        if len(kinds) > 1 or len(classes) > 1:
            raise ShapeError("ensemble members must share output structure")
        self.members = list(members)
        self.kind = ModelKind.CORAL if kinds.pop() else ModelKind.LINEAR

    def raw_scores(self, X) -> np.ndarray:
        acc = self.members[0].raw_scores(X)
        for m in self.members[1:]:
            acc = acc + m.raw_scores(X)
        return acc / len(self.members)

    def predict_proba(self, X) -> np.ndarray:
        return scores_to_probs(self.kind, self.raw_scores(X))

    def predict(self, X) -> np.ndarray:
        return scores_to_labels(self.kind, self.raw_scores(X))


def ensemble_predict(models: Sequence[tuple[ModelSpec, ParamVector] | SingleModel], X
                     ) -> np.ndarray:
    members = [m if isinstance(m, SingleModel) else SingleModel(*m) for m in models]
    return Ensemble(members).predict_proba(X)
