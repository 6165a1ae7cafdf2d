"""
Consensus ranking of an existing metric table
=============================================

Rank the seven finalists from their twelve per-site metrics, then check
how the ordering holds up when only kappa columns are used.
"""

from pathlib import Path

from flchallenge.ranking import consensus_rank, read_metric_csv

csv_path = Path(__file__).resolve().parents[1] / "tests" / "data" / "finalist_metrics.csv"
table = read_metric_csv(csv_path)
result = consensus_rank(table)
print(result.to_csv())

kappas = [n for n in table.metric_names if "kappa" in n]
print(consensus_rank(table.restrict(kappas)).ordering)
