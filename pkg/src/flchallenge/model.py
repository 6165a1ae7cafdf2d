"""Small differentiable classifiers over a flat, segmented parameter vector.

Four model kinds share one feature pipeline (optional ``tanh`` hidden layer)
and differ in their heads:

* ``LinearSoftmax`` / ``MLP`` -- one categorical head with 4 logits.
* ``CoralOrdinal`` -- one weight vector with 3 ordered thresholds; class
  probabilities come from cumulative sigmoids ``P(y > k)``.
* ``DualHeadMixture`` -- a global and a local categorical head whose logits
  are summed for prediction.

Gradients are written out by hand; :func:`grad_check` compares them against
central finite differences.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping

import numpy as np
from scipy.special import expit, log_softmax, softmax

from ._io import atomic_write_text
from .errors import (CheckpointError, ConfigError, EmptyBatchError, NumericsError,
                     ShapeError)

N_CLASSES = 4
INIT_SD = 0.1


class ParamVector:
    """Ordered named segments of real arrays, treated as one flat vector.

    Arithmetic (``+``, ``-``, scalar ``*``) requires identical layouts and
    returns a new vector; the stored arrays are read-only.
    """

    __slots__ = ("_segs",)

    def __init__(self, segments: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = segments.items() if isinstance(segments, Mapping) else segments
        segs = {}
        for name, values in items:
            if name in segs:
                raise ShapeError(f"duplicate segment {name!r}")
            arr = np.array(values, dtype=float)
            arr.setflags(write=False)
            segs[name] = arr
        self._segs = segs

    # -- structure
    @property
    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((k, v.shape) for k, v in self._segs.items())

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._segs)

    @property
    def total_len(self) -> int:
        return sum(v.size for v in self._segs.values())

    @property
    def layout_hash(self) -> str:
        return layout_hash(self.layout)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segs[name]

    def __contains__(self, name: str) -> bool:
        return name in self._segs

    def items(self):
        return self._segs.items()

    def __len__(self) -> int:
        return self.total_len

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{list(v.shape)}" for k, v in self._segs.items())
        return f"ParamVector({inner})"

    # -- conversion
    def flat(self) -> np.ndarray:
        if not self._segs:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._segs.values()])

    @classmethod
    def from_flat(cls, layout, vec: np.ndarray) -> "ParamVector":
        vec = np.asarray(vec, dtype=float)
        expected = sum(int(np.prod(shape)) for _, shape in layout)
        if vec.shape != (expected,):
            raise ShapeError(f"flat vector has {vec.size} values, layout needs {expected}")
        segs, offset = [], 0
        for name, shape in layout:
            size = int(np.prod(shape))
            segs.append((name, vec[offset:offset + size].reshape(shape)))
            offset += size
        return cls(segs)

    @classmethod
    def zeros(cls, layout) -> "ParamVector":
        return cls((name, np.zeros(shape)) for name, shape in layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector.zeros(self.layout)

    def subset(self, names: Iterable[str]) -> "ParamVector":
        keep = set(names)
        return ParamVector((k, v) for k, v in self._segs.items() if k in keep)

    def without(self, names: Iterable[str]) -> "ParamVector":
        drop = set(names)
        return ParamVector((k, v) for k, v in self._segs.items() if k not in drop)

    def merged(self, other: "ParamVector") -> "ParamVector":
        """Copy of self with segments present in ``other`` replaced."""
        for k, v in other.items():
            if k not in self._segs or self._segs[k].shape != v.shape:
                raise ShapeError(f"segment {k!r} not in layout")
        return ParamVector((k, other[k] if k in other else v) for k, v in self._segs.items())

    def replace(self, name: str, values) -> "ParamVector":
        return self.merged(ParamVector([(name, np.asarray(values).reshape(self[name].shape))]))

    # -- arithmetic
    def _check(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if self.layout != other.layout:
            raise ShapeError(f"layout mismatch: {self.layout} vs {other.layout}")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector((k, v + other[k]) for k, v in self._segs.items())

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector((k, v - other[k]) for k, v in self._segs.items())

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector((k, v * scalar) for k, v in self._segs.items())

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector((k, -v) for k, v in self._segs.items())

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(sum(np.vdot(v, other[k]) for k, v in self._segs.items()))

    def sq_norm(self) -> float:
        return self.dot(self)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._segs.values())

    def equals(self, other: "ParamVector") -> bool:
        """Bitwise equality of layout and values."""
        return self.layout == other.layout and all(
            np.array_equal(v, other[k]) for k, v in self._segs.items())

    def allclose(self, other: "ParamVector", atol: float = 1e-12, rtol: float = 0.0) -> bool:
        return self.layout == other.layout and all(
            np.allclose(v, other[k], atol=atol, rtol=rtol) for k, v in self._segs.items())

    # -- serialization
    def to_json_dict(self) -> dict:
        out = {"layout_hash": self.layout_hash}
        out.update({k: v.tolist() for k, v in self._segs.items()})
        return out

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "ParamVector":
        data = dict(data)
        stored = data.pop("layout_hash", None)
        params = cls((k, np.asarray(v, dtype=float)) for k, v in data.items())
        if stored is not None and stored != params.layout_hash:
            raise CheckpointError("layout_hash does not match stored segments")
        return params


def layout_hash(layout) -> str:
    text = ";".join(f"{name}:{'x'.join(map(str, shape))}" for name, shape in layout)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_params(params: ParamVector, path) -> None:
    atomic_write_text(path, json.dumps(params.to_json_dict()))


def load_params(path, spec: "ModelSpec | None" = None) -> ParamVector:
    try:
        with open(path) as fh:
            params = ParamVector.from_json_dict(json.load(fh))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if spec is not None and params.layout != spec.layout():
        raise CheckpointError(f"checkpoint {path} does not match model layout {spec.kind.value}")
    return params


# --- model specification ---------------------------------------------------

class ModelKind(str, Enum):
    LINEAR = "LinearSoftmax"
    MLP = "MLP"
    CORAL = "CoralOrdinal"
    MIXTURE = "DualHeadMixture"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    d: int
    hidden: int = 0
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.n_classes != N_CLASSES:
            raise ConfigError("only 4 classes are supported", "n_classes")
        if self.d < 1:
            raise ConfigError("must be >= 1", "d")
        if self.kind in (ModelKind.MLP, ModelKind.MIXTURE) and self.hidden < 1:
            raise ConfigError(f"{self.kind.value} needs hidden >= 1", "hidden")
        if self.kind is ModelKind.LINEAR and self.hidden != 0:
            raise ConfigError("LinearSoftmax has no hidden layer", "hidden")
        if self.hidden < 0:
            raise ConfigError("must be >= 0", "hidden")

    @property
    def feat_dim(self) -> int:
        return self.hidden if self.hidden else self.d

    def layout(self):
        k, f = self.n_classes, self.feat_dim
        body = [("body.W", (self.hidden, self.d)), ("body.b", (self.hidden,))] if self.hidden else []
        if self.kind in (ModelKind.LINEAR, ModelKind.MLP):
            return tuple(body + [("head.W", (k, f)), ("head.b", (k,))])
        if self.kind is ModelKind.CORAL:
            return tuple(body + [("head.w", (f,)), ("head.b", (k - 1,))])
        return tuple(body + [("global.W", (k, f)), ("global.b", (k,)),
                             ("local.W", (k, f)), ("local.b", (k,))])

    def head_segments(self) -> tuple[str, ...]:
        """Segments forming the site-specific classifier for personalization."""
        if self.kind is ModelKind.MIXTURE:
            return ("local.W", "local.b")
        return tuple(name for name, _ in self.layout() if name.startswith("head."))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "d": self.d, "hidden": self.hidden,
                "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelSpec":
        try:
            return cls(kind=ModelKind(data["kind"]), d=int(data["d"]),
                       hidden=int(data.get("hidden", 0)),
                       n_classes=int(data.get("n_classes", N_CLASSES)))
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), "model") from None


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Gaussian weights (sd 0.1) and zero biases, drawn in layout order."""
    segs = []
    for name, shape in spec.layout():
        if name.endswith(".b"):
            segs.append((name, np.zeros(shape)))
        else:
            segs.append((name, INIT_SD * rng.standard_normal(shape)))
    return ParamVector(segs)


# --- forward pass ----------------------------------------------------------

def _check_layout(spec: ModelSpec, params: ParamVector) -> None:
    if params.layout != spec.layout():
        raise ShapeError(f"params layout {params.layout} does not match {spec.kind.value}")


def _features(spec, params, X):
    if not spec.hidden:
        return X
    return np.tanh(X @ params["body.W"].T + params["body.b"])


def _as_batch(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise ShapeError(f"features must have shape (n, {d}), got {X.shape}")
    return X


def raw_scores(spec: ModelSpec, params: ParamVector, X, *, global_only: bool = False
               ) -> np.ndarray:
    """Class logits ``(n, 4)``, or cumulative logits ``(n, 3)`` for CORAL.

    ``global_only`` drops the local head of a mixture model.
    """
    _check_layout(spec, params)
    X = _as_batch(X, spec.d)
    z = _features(spec, params, X)
    if spec.kind is ModelKind.CORAL:
        return (z @ params["head.w"])[:, None] + params["head.b"]
    if spec.kind is ModelKind.MIXTURE:
        g = z @ params["global.W"].T + params["global.b"]
        if global_only:
            return g
        return g + z @ params["local.W"].T + params["local.b"]
    return z @ params["head.W"].T + params["head.b"]


def forward(spec: ModelSpec, params: ParamVector, X, *, global_only: bool = False
            ) -> np.ndarray:
    """Logits for categorical heads; cumulative ``P(y > k)`` for CORAL."""
    scores = raw_scores(spec, params, X, global_only=global_only)
    if spec.kind is ModelKind.CORAL:
        return expit(scores)
    return scores


def coral_class_probs(cum_probs: np.ndarray) -> np.ndarray:
    n = cum_probs.shape[0]
    upper = np.hstack([np.ones((n, 1)), cum_probs])
    lower = np.hstack([cum_probs, np.zeros((n, 1))])
    return upper - lower


def coral_predict(cum_probs: np.ndarray) -> np.ndarray:
    return 1 + np.sum(cum_probs > 0.5, axis=1)


def scores_to_probs(kind: ModelKind, scores: np.ndarray) -> np.ndarray:
    if ModelKind(kind) is ModelKind.CORAL:
        return coral_class_probs(expit(scores))
    return softmax(scores, axis=1)


def scores_to_labels(kind: ModelKind, scores: np.ndarray) -> np.ndarray:
    if ModelKind(kind) is ModelKind.CORAL:
        return coral_predict(expit(scores))
    return np.argmax(scores, axis=1) + 1


class SingleModel:
    """Predictor wrapping one parameter vector."""

    def __init__(self, spec: ModelSpec, params: ParamVector, global_only: bool = False):
        _check_layout(spec, params)
        self.spec = spec
        self.params = params
        self.global_only = global_only

    def raw_scores(self, X) -> np.ndarray:
        return raw_scores(self.spec, self.params, X, global_only=self.global_only)

    def predict_proba(self, X) -> np.ndarray:
        return scores_to_probs(self.spec.kind, self.raw_scores(X))

    def predict(self, X) -> np.ndarray:
        return scores_to_labels(self.spec.kind, self.raw_scores(X))


# --- loss and gradients ----------------------------------------------------

@dataclass(frozen=True)
class ProxTerm:
    """Proximal penalty ``mu/2 * ||params - anchor||^2`` on ``segments``."""

    mu: float
    anchor: ParamVector
    segments: frozenset[str] | None = None


@dataclass(frozen=True)
class LossReport:
    loss: float
    grad: ParamVector


def _ce(logits, y_idx):
    logp = log_softmax(logits, axis=1)
    n = logits.shape[0]
    loss = -logp[np.arange(n), y_idx].mean()
    d = np.exp(logp)
    d[np.arange(n), y_idx] -= 1.0
    return loss, d / n


def loss_and_grad(spec: ModelSpec, params: ParamVector, X, y,
                  prox: ProxTerm | None = None) -> LossReport:
    """Mean data loss over the batch plus an optional proximal term."""
    _check_layout(spec, params)
    X = _as_batch(X, spec.d)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    if y.shape != (X.shape[0],):
        raise ShapeError("labels and features disagree in length")
    y_idx = y - 1
    z = _features(spec, params, X)
    grads = {}

    if spec.kind in (ModelKind.LINEAR, ModelKind.MLP):
        logits = z @ params["head.W"].T + params["head.b"]
        loss, dlog = _ce(logits, y_idx)
        grads["head.W"] = dlog.T @ z
        grads["head.b"] = dlog.sum(axis=0)
        dz = dlog @ params["head.W"]
    elif spec.kind is ModelKind.MIXTURE:
        g = z @ params["global.W"].T + params["global.b"]
        both = g + z @ params["local.W"].T + params["local.b"]
        loss_both, d_both = _ce(both, y_idx)
        loss_g, d_g = _ce(g, y_idx)
        loss = loss_both + loss_g
        d_global = d_both + d_g
        grads["global.W"] = d_global.T @ z
        grads["global.b"] = d_global.sum(axis=0)
        grads["local.W"] = d_both.T @ z
        grads["local.b"] = d_both.sum(axis=0)
        dz = d_global @ params["global.W"] + d_both @ params["local.W"]
    else:
        s = (z @ params["head.w"])[:, None] + params["head.b"]
        targets = (y[:, None] > np.arange(1, spec.n_classes)).astype(float)
        n = X.shape[0]
        loss = float(np.sum(np.logaddexp(0.0, s) - targets * s) / n)
        ds = (expit(s) - targets) / n
        row = ds.sum(axis=1)
        grads["head.w"] = z.T @ row
        grads["head.b"] = ds.sum(axis=0)
        dz = row[:, None] * params["head.w"][None, :]

    if spec.hidden:
        da = dz * (1.0 - z * z)
        grads["body.W"] = da.T @ X
        grads["body.b"] = da.sum(axis=0)

    loss = float(loss)
    if prox is not None and prox.mu != 0.0:
        if prox.mu < 0:
            raise ConfigError("must be >= 0", "mu")
        anchor = prox.anchor
        names = prox.segments if prox.segments is not None else params.names
        for name in params.names:
            if name not in names:
                continue
            if name not in anchor or anchor[name].shape != params[name].shape:
                raise ShapeError(f"prox anchor lacks segment {name!r}")
            diff = params[name] - anchor[name]
            loss += 0.5 * prox.mu * float(np.vdot(diff, diff))
            grads[name] = grads[name] + prox.mu * diff

    grad = ParamVector((name, grads[name]) for name, _ in params.layout)
    return LossReport(loss=loss, grad=grad)


def project(spec: ModelSpec | None, params: ParamVector) -> ParamVector:
    """Restore CORAL threshold ordering ``b_1 >= b_2 >= b_3``."""
    if spec is None or spec.kind is not ModelKind.CORAL or "head.b" not in params:
        return params
    b = params["head.b"]
    if np.all(b[:-1] >= b[1:]):
        return params
    return params.replace("head.b", np.sort(b)[::-1])


def sgd_step(params: ParamVector, grad: ParamVector, lr: float,
             spec: ModelSpec | None = None) -> ParamVector:
    if not lr > 0:
        raise ConfigError("learning rate must be > 0", "lr")
    if not grad.is_finite():
        raise NumericsError("non-finite gradient")
    return project(spec, params - lr * grad)


def grad_check(spec: ModelSpec, params: ParamVector, X, y, eps: float = 1e-5,
               n_coords: int | None = 64, rng: np.random.Generator | None = None,
               prox: ProxTerm | None = None, floor: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is ``|a - f| / max(|a| + |f|, floor)``;
    the floor keeps round-off in the difference quotient (about 1e-11 at
    ``eps=1e-5``) from dominating coordinates whose true gradient is zero.
    Coordinates are sampled without replacement when ``n_coords`` is smaller
    than the parameter count.
    """
    if not 0 < eps <= 1e-2:
        raise ConfigError("eps must be in (0, 1e-2]", "eps")
    analytic = loss_and_grad(spec, params, X, y, prox).grad.flat()
    base = params.flat()
    layout = params.layout
    n = base.size
    if n_coords is None or n_coords >= n:
        coords = np.arange(n)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=n_coords, replace=False))

    def f(vec):
        return loss_and_grad(spec, ParamVector.from_flat(layout, vec), X, y, prox).loss

    worst = 0.0
    for i in coords:
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        numeric = (f(plus) - f(minus)) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]) + abs(numeric), floor)
        worst = max(worst, err)
    return worst
