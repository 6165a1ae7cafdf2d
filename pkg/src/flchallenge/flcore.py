"""Synchronous federated rounds with byte and wall-clock budgets.

Every round the server broadcasts the shared part of the global model, each
client trains locally and returns a :class:`ClientUpdate`, and the server
reduces the updates in ascending client id order. Segments named in
``RoundConfig.private_segments`` never leave the clients.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _rng
from .aggregate import (AggKind, AggregatorSpec, ErrorFeedback, ScaffoldState,
                        scaffold_client_step, scaffold_control_update,
                        scaffold_server_update, topk_compress, fedavg)
from .errors import BudgetError, ConfigError, EmptySplitError, MessageTooLarge
from .messages import ClientUpdate, SparseDelta, payload_size, wire_size
from .model import ModelSpec, ParamVector, ProxTerm, init_params, loss_and_grad, project, sgd_step
from .synthdata import SiteDataset

__all__ = [
    "RoundConfig", "RunRecord", "LocalResult", "ClientUpdate", "SparseDelta",
    "wire_size", "run_federated", "client_local_train", "sgd_epochs",
    "COMPLETED", "BUDGET_EXCEEDED", "MESSAGE_TOO_LARGE",
]

COMPLETED = "Completed"
BUDGET_EXCEEDED = "RuntimeBudgetExceeded"
MESSAGE_TOO_LARGE = "MessageTooLarge"

GRPC_CAP_BYTES = 2 * 1024**3


@dataclass(frozen=True)
class RoundConfig:
    n_rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    lr_local: float = 0.1
    lr_server: float = 1.0
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    private_segments: frozenset[str] = frozenset()
    msg_cap_bytes: int = GRPC_CAP_BYTES
    runtime_budget_secs: float = 300.0
    momentum: float = 0.0
    snapshot_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "private_segments", frozenset(self.private_segments))
        if self.n_rounds < 1:
            raise ConfigError("must be >= 1", "rounds.n_rounds")
        if self.local_epochs < 0:
            raise ConfigError("must be >= 0", "rounds.local_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "rounds.batch_size")
        if not self.lr_local > 0:
            raise ConfigError("must be > 0", "rounds.lr_local")
        if not self.lr_server > 0:
            raise ConfigError("must be > 0", "rounds.lr_server")
        if self.msg_cap_bytes <= 0:
            raise ConfigError("must be > 0", "rounds.msg_cap_bytes")
        if self.runtime_budget_secs < 0:
            raise ConfigError("must be >= 0", "rounds.runtime_budget_secs")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must be in [0, 1)", "rounds.momentum")
        if self.aggregator.kind is AggKind.SCAFFOLD and self.momentum:
            raise ConfigError("SCAFFOLD runs plain SGD locally", "rounds.momentum")

    def to_dict(self) -> dict:
        return {
            "n_rounds": self.n_rounds, "local_epochs": self.local_epochs,
            "batch_size": self.batch_size, "lr_local": self.lr_local,
            "lr_server": self.lr_server, "aggregator": self.aggregator.to_dict(),
            "private_segments": sorted(self.private_segments),
            "msg_cap_bytes": self.msg_cap_bytes,
            "runtime_budget_secs": self.runtime_budget_secs,
            "momentum": self.momentum, "snapshot_every": self.snapshot_every,
        }

    @classmethod
    def from_dict(cls, data) -> "RoundConfig":
        data = dict(data)
        if "aggregator" in data and not isinstance(data["aggregator"], AggregatorSpec):
            data["aggregator"] = AggregatorSpec.from_dict(data["aggregator"])
        if "private_segments" in data:
            data["private_segments"] = frozenset(data["private_segments"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc), "rounds") from None


@dataclass
class RunRecord:
    snapshots: list[tuple[int, ParamVector]]
    client_params: dict[int, ParamVector]
    bytes_per_round: list[int]
    termination: str
    wall_time: float
    seed: int
    scaffold: ScaffoldState | None = None

    @property
    def global_params(self) -> ParamVector:
        return self.snapshots[-1][1]

    @property
    def rounds_completed(self) -> int:
        return len(self.bytes_per_round)

    @property
    def bytes_sent(self) -> int:
        return int(sum(self.bytes_per_round))

    def summary(self) -> dict:
        """JSON-safe, deterministic summary (wall time excluded)."""
        return {
            "termination": self.termination,
            "rounds_completed": self.rounds_completed,
            "bytes_sent": self.bytes_sent,
            "bytes_per_round": list(self.bytes_per_round),
            "snapshot_rounds": [r for r, _ in self.snapshots],
            "clients": sorted(self.client_params),
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


@dataclass
class LocalResult:
    params: ParamVector
    update: ClientUpdate
    steps: int
    error_feedback: ErrorFeedback | None = None
    control: ParamVector | None = None


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def sgd_epochs(spec: ModelSpec, params: ParamVector, train: SiteDataset, *,
               lr: float, batch_size: int, rng: np.random.Generator,
               max_steps: int, momentum: float = 0.0,
               prox: ProxTerm | None = None,
               step_fn: Callable[[ParamVector, ParamVector], ParamVector] | None = None
               ) -> tuple[ParamVector, int]:
    """Shuffled minibatch SGD for exactly ``max_steps`` steps.

    A fresh permutation is drawn at every epoch boundary, so a run that
    stops mid-epoch consumes the same random stream as a longer one.
    """
    X, y = train.features, train.label
    velocity = None
    steps = 0
    while steps < max_steps:
        for idx in _batches(rng, len(train), batch_size):
            grad = loss_and_grad(spec, params, X[idx], y[idx], prox).grad
            if momentum:
                velocity = grad if velocity is None else momentum * velocity + grad
                grad = velocity
            if step_fn is None:
                params = sgd_step(params, grad, lr, spec)
            else:
                params = project(spec, step_fn(params, grad))
            steps += 1
            if steps == max_steps:
                break
    return params, steps


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def client_local_train(spec: ModelSpec, start: ParamVector, dataset: SiteDataset,
                       cfg: RoundConfig, rng: np.random.Generator, client_id: int, *,
                       scaffold: tuple[ParamVector, ParamVector] | None = None,
                       error_feedback: ErrorFeedback | None = None) -> LocalResult:
    """Run ``cfg.local_epochs`` over the client's Train split.

    ``start`` is the received global model with this client's private
    segments filled in. ``scaffold`` is ``(c_i, c)`` over the shared
    segments.
    """
    train = dataset.select("Train")
    if len(train) == 0:
        raise EmptySplitError(f"client {client_id} has no Train samples")
    shared = [n for n in start.names if n not in cfg.private_segments]
    agg = cfg.aggregator
    prox = None
    if agg.kind is AggKind.FEDPROX and agg.mu > 0:
        prox = ProxTerm(agg.mu, start, frozenset(shared))

    step_fn = None
    if scaffold is not None:
        c_i, c = scaffold
        zero = start.zeros_like()
        c_i_full, c_full = zero.merged(c_i), zero.merged(c)

        def step_fn(y, g):
            return scaffold_client_step(y, g, c_i_full, c_full, cfg.lr_local)

    max_steps = cfg.local_epochs * steps_per_epoch(len(train), cfg.batch_size)
    params, steps = sgd_epochs(spec, start, train, lr=cfg.lr_local,
                               batch_size=cfg.batch_size, rng=rng, max_steps=max_steps,
                               momentum=cfg.momentum, prox=prox, step_fn=step_fn)

    delta = (params - start).subset(shared)
    control_delta = new_control = None
    if scaffold is not None:
        c_i, c = scaffold
        if steps:
            new_control, control_delta = scaffold_control_update(
                start.subset(shared), params.subset(shared), c_i, c, steps, cfg.lr_local)
        else:
            new_control, control_delta = c_i, c_i.zeros_like()

    payload = delta
    if agg.topk_fraction is not None:
        payload, error_feedback = topk_compress(delta, error_feedback, agg.topk_fraction,
                                                agg.error_feedback)
    update = ClientUpdate(client_id, len(train), payload, control_delta).with_wire_size()
    return LocalResult(params, update, steps, error_feedback, new_control)


def run_federated(federation: Sequence[SiteDataset], spec: ModelSpec, cfg: RoundConfig,
                  seed: int, init: ParamVector | None = None,
                  clock: Callable[[], float] = time.monotonic) -> RunRecord:
    """Train ``spec`` across all sites with a Train split.

    Raises :class:`MessageTooLarge` (with the partial record attached) if any
    message exceeds ``cfg.msg_cap_bytes``. When the wall-clock budget is
    spent, the run stops at the next round boundary and the record is
    returned with ``termination == "RuntimeBudgetExceeded"``.
    """
    clients = sorted((ds for ds in federation if ds.counts()["Train"] > 0),
                     key=lambda ds: ds.primary_site)
    if not clients:
        raise EmptySplitError("federation has no site with Train samples")
    t0 = clock()
    global_params = init if init is not None else init_params(spec, _rng.stream(seed, "init"))
    if global_params.layout != spec.layout():
        raise ConfigError("initial params do not match the model layout", "init")
    unknown = cfg.private_segments - set(global_params.names)
    if unknown:
        raise ConfigError(f"unknown segments {sorted(unknown)}", "rounds.private_segments")
    shared = [n for n in global_params.names if n not in cfg.private_segments]
    if not shared:
        raise ConfigError("every segment is private; nothing to aggregate",
                          "rounds.private_segments")

    ids = [ds.primary_site for ds in clients]
    rngs = {cid: _rng.stream(seed, "batching", cid) for cid in ids}
    local = {cid: global_params for cid in ids}
    feedback: dict[int, ErrorFeedback | None] = {cid: None for cid in ids}
    shared_layout = global_params.subset(shared).layout
    scaffold = (ScaffoldState.zeros(shared_layout, ids)
                if cfg.aggregator.kind is AggKind.SCAFFOLD else None)

    record = RunRecord(snapshots=[(0, global_params)], client_params=dict(local),
                       bytes_per_round=[], termination=COMPLETED, wall_time=0.0,
                       seed=seed, scaffold=scaffold)

    def fail(msg):
        record.termination = MESSAGE_TOO_LARGE
        record.wall_time = clock() - t0
        raise MessageTooLarge(msg, record)

    for rnd in range(1, cfg.n_rounds + 1):
        if clock() - t0 >= cfg.runtime_budget_secs:
            record.termination = BUDGET_EXCEEDED
            break
        broadcast = global_params.subset(shared)
        down = payload_size(broadcast)
        if scaffold is not None:
            down += payload_size(scaffold.server_control)
        if down > cfg.msg_cap_bytes:
            fail(f"round {rnd}: broadcast of {down} bytes exceeds cap {cfg.msg_cap_bytes}")

        round_bytes = 0
        updates = []
        for ds in clients:
            cid = ds.primary_site
            start = local[cid].merged(broadcast)
            result = client_local_train(
                spec, start, ds, cfg, rngs[cid], cid,
                scaffold=(scaffold.client_controls[cid], scaffold.server_control)
                if scaffold is not None else None,
                error_feedback=feedback[cid])
            if result.update.wire_bytes > cfg.msg_cap_bytes:
                fail(f"round {rnd}: client {cid} update of {result.update.wire_bytes} "
                     f"bytes exceeds cap {cfg.msg_cap_bytes}")
            local[cid] = result.params
            feedback[cid] = result.error_feedback
            if scaffold is not None:
                scaffold.client_controls[cid] = result.control
            updates.append(result.update)
            round_bytes += down + result.update.wire_bytes

        if scaffold is not None:
            new_shared, scaffold.server_control = scaffold_server_update(
                broadcast, scaffold.server_control, updates, cfg.lr_server,
                cfg.aggregator.weighting)
        else:
            new_shared = broadcast + cfg.lr_server * fedavg(updates, cfg.aggregator.weighting)
        global_params = project(spec, global_params.merged(new_shared))

        record.bytes_per_round.append(round_bytes)
        record.client_params = dict(local)
        if rnd % max(cfg.snapshot_every, 1) == 0 or rnd == cfg.n_rounds:
            record.snapshots.append((rnd, global_params))

    if record.snapshots[-1][1] is not global_params:
        record.snapshots.append((record.rounds_completed, global_params))
    record.wall_time = clock() - t0
    return record


def run_or_record(*args, **kwargs) -> RunRecord:
    """Like :func:`run_federated` but returns the partial record on a
    budget violation instead of raising."""
    try:
        return run_federated(*args, **kwargs)
    except BudgetError as exc:
        if exc.record is None:
            raise
        return exc.record
