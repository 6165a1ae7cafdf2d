"""
Federated rounds on a synthetic federation
==========================================

Generate the three-site federation, train FedAvg and FedProx on it, and
compare per-site kappas of the resulting global models.
"""

import numpy as np

from flchallenge.aggregate import AggKind, AggregatorSpec
from flchallenge.flcore import RoundConfig, run_federated
from flchallenge.metrics import evaluate
from flchallenge.model import ModelKind, ModelSpec, SingleModel
from flchallenge.synthdata import default_site_specs, empirical_label_dist, generate_federation

federation = generate_federation(default_site_specs(seed=0))
for ds in federation:
    print(ds.primary_site, ds.counts())

# label skew of the training splits
for ds in federation[:3]:
    print(ds.primary_site, np.round(empirical_label_dist(ds, "Train"), 3))

###############################################################################
# Same model, two aggregators. With mu=0 FedProx reduces to FedAvg exactly.

spec = ModelSpec(ModelKind.MLP, 16, 16)
for agg in (AggregatorSpec(), AggregatorSpec(AggKind.FEDPROX, mu=0.01)):
    rec = run_federated(federation, spec, RoundConfig(n_rounds=50, aggregator=agg), seed=0)
    reports = evaluate(SingleModel(spec, rec.global_params), federation[:3], "Test2")
    kappas = {r.scope: round(r.lin_kappa, 3) for r in reports}
    print(agg.kind.value, rec.bytes_sent, "bytes", kappas)

###############################################################################
# Top-k sparsification sends a tenth of the update entries.

sparse = AggregatorSpec(topk_fraction=0.1)
rec = run_federated(federation, spec, RoundConfig(n_rounds=50, aggregator=sparse), seed=0)
print("top-k", rec.bytes_sent, "bytes")
