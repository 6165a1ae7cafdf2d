"""Built-in strategy bundles standing in for the seven challenge finalists.

Backbones are replaced by hidden-layer widths: 8 for the small residual
network, 24 for the deeper ones, 32 for the large ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import _rng
from ..aggregate import AggKind, AggregatorSpec, Weighting
from ..flcore import RoundConfig, sgd_epochs
from ..model import ModelKind, ModelSpec, ParamVector, init_params
from ..synthdata import SiteSpec, default_site_specs, generate_site, RACE_COUNTS

# Evaluation routing for internal (per-site test) and external data.
GLOBAL = "global"
PER_SITE = "per_site"
ENSEMBLE = "ensemble"
GLOBAL_ONLY = "global_only"

PRETRAIN_IMAGES = 1185
PRETRAIN_EPOCHS = 20


@dataclass(frozen=True)
class AlgorithmEntry:
    name: str
    model: ModelSpec
    rounds: RoundConfig
    warm_start: bool = False
    internal: str = GLOBAL
    external: str = GLOBAL
    description: str = ""
    artifacts: Path | None = field(default=None, compare=False)

    def with_artifacts(self, path) -> "AlgorithmEntry":
        return replace(self, artifacts=Path(path))


def builtin_bundles(d: int = 16, n_rounds: int = 100, base: RoundConfig | None = None
                    ) -> list[AlgorithmEntry]:
    """Seven bundles in the finalists' final ranking order."""
    base = base or RoundConfig(n_rounds=n_rounds)

    def rounds(**kw):
        kw.setdefault("n_rounds", n_rounds)
        kw.setdefault("private_segments", frozenset())
        kw.setdefault("momentum", 0.0)
        return replace(base, **kw)

    coral = ModelSpec(ModelKind.CORAL, d, 16)
    mixture = ModelSpec(ModelKind.MIXTURE, d, 16)
    return [
        AlgorithmEntry(
            "algo1_fedprox_coral_private", coral,
            rounds(aggregator=AggregatorSpec(AggKind.FEDPROX, mu=0.01),
                   private_segments=coral.head_segments()),
            warm_start=True, internal=PER_SITE, external=ENSEMBLE,
            description="ordinal head kept local, FedProx, task-specific warm start"),
        AlgorithmEntry(
            "algo2_mixture_fedavg", mixture,
            rounds(n_rounds=max(1, round(0.8 * n_rounds)), local_epochs=2,
                   aggregator=AggregatorSpec(AggKind.FEDAVG),
                   private_segments=mixture.head_segments()),
            internal=PER_SITE, external=GLOBAL_ONLY,
            description="shared extractor, global + local heads, FedAvg"),
        AlgorithmEntry(
            "algo3_scaffold_topk", ModelSpec(ModelKind.MLP, d, 24),
            rounds(aggregator=AggregatorSpec(AggKind.SCAFFOLD, topk_fraction=0.1)),
            description="SCAFFOLD with Top-k (10%) sparsified uploads"),
        AlgorithmEntry(
            "algo4_fedavg_warmstart", ModelSpec(ModelKind.MLP, d, 32),
            rounds(lr_local=0.05, aggregator=AggregatorSpec(AggKind.FEDAVG)),
            warm_start=True,
            description="FedAvg from task-specific warm start"),
        AlgorithmEntry(
            "algo6_fedavg_small", ModelSpec(ModelKind.MLP, d, 8),
            rounds(lr_local=0.02, momentum=0.9, aggregator=AggregatorSpec(AggKind.FEDAVG)),
            description="FedAvg, small network, SGD with momentum"),
        AlgorithmEntry(
            "algo5_fedavg_wide", ModelSpec(ModelKind.MLP, d, 32),
            rounds(aggregator=AggregatorSpec(AggKind.FEDAVG)),
            description="reference FedAvg with a wider network"),
        AlgorithmEntry(
            "algo7_fedavg_weighted", ModelSpec(ModelKind.MLP, d, 24),
            rounds(n_rounds=max(1, n_rounds // 5), local_epochs=5,
                   aggregator=AggregatorSpec(AggKind.FEDAVG, weighting=Weighting.BY_SAMPLES)),
            description="size-weighted FedAvg, 5 local epochs, random init"),
    ]


def bundle_by_name(name: str, d: int = 16, n_rounds: int = 100) -> AlgorithmEntry:
    for entry in builtin_bundles(d, n_rounds):
        if entry.name == name:
            return entry
    raise KeyError(name)


def pretraining_site(seed: int, d: int) -> SiteSpec:
    """An outside institution's data: same task, its own shift, never in the federation."""
    template = default_site_specs(_rng.derive_seed(seed, "pretrain-shift"), d,
                                  include_external=False)[0]
    race = np.asarray(RACE_COUNTS[1], dtype=float)
    return replace(template, site_id=99, n_train=PRETRAIN_IMAGES, n_test1=0, n_test2=0,
                   demo_probs=tuple((race / race.sum()).tolist()),
                   seed=_rng.derive_seed(seed, "pretrain-data"))


def pretrain(spec: ModelSpec, seed: int, epochs: int = PRETRAIN_EPOCHS,
             lr: float = 0.1, batch_size: int = 32) -> ParamVector:
    """Centrally train ``spec`` on the pretraining site; used as a warm start."""
    data = generate_site(pretraining_site(seed, spec.d), spec.d)
    params = init_params(spec, _rng.stream(seed, "pretrain-init"))
    steps = epochs * -(-len(data) // batch_size)
    params, _ = sgd_epochs(spec, params, data, lr=lr, batch_size=batch_size,
                           rng=_rng.stream(seed, "pretrain-batching"), max_steps=steps)
    return params
