import dataclasses
import json
import math

import numpy as np
import pytest

from flchallenge.errors import BudgetError, CheckpointError, ConfigError, EmptySplitError, SchemaError
from flchallenge.flcore import BUDGET_EXCEEDED, COMPLETED, run_federated
from flchallenge.harness import bundles as bundles_mod
from flchallenge.harness.bundles import builtin_bundles, bundle_by_name
from flchallenge.harness.commands import (EXTERNAL, INTERNAL, central_step_budget,
                                          challenge_entries, cmd_central_baseline,
                                          cmd_demographics, cmd_evaluate, cmd_gen_data,
                                          cmd_leaderboard, cmd_rank, cmd_run, compare_phases,
                                          load_predictor, normal_ci, train_central,
                                          train_entries)
from flchallenge.harness.config import apply_overrides, build_config, load_config
from flchallenge.model import ModelKind, load_params
from flchallenge.synthdata import SiteDataset, load_federation

from conftest import FIXTURES


# --- config -------------------------------------------------------------------

def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed"):
        build_config({})


@pytest.mark.parametrize("raw, field", [
    ({"seed": "x"}, "seed"),
    ({"seed": 0, "data": {"bogus": 1}}, "data"),
    ({"seed": 0, "data": {"d": 1}}, "data.d"),
    ({"seed": 0, "warm_start": "/nonexistent/params.json"}, "warm_start"),
    ({"seed": 0, "data": {"path": "/nonexistent/fed.json"}}, "data.path"),
])
def test_config_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError) as info:
        build_config(raw).data.load(0)
    assert info.value.field == field


def test_overrides_and_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nrounds:\n  n_rounds: 7\nmodel:\n  kind: CoralOrdinal\n")
    cfg = load_config(path, ["rounds.lr_local=0.05", "rounds.private_segments=head"])
    assert cfg.seed == 3 and cfg.rounds.n_rounds == 7 and cfg.rounds.lr_local == 0.05
    assert cfg.model.kind is ModelKind.CORAL
    assert cfg.rounds.private_segments == frozenset(cfg.model.head_segments())
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])
    path.write_text("- a list\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_hash_ignores_output_dir(tmp_path):
    a = build_config({"seed": 0, "output_dir": str(tmp_path / "a")})
    b = build_config({"seed": 0, "output_dir": str(tmp_path / "b")})
    c = build_config({"seed": 1, "output_dir": str(tmp_path / "a")})
    assert a.config_hash == b.config_hash != c.config_hash


# --- bundles --------------------------------------------------------------------

def test_seven_unique_bundles():
    entries = builtin_bundles()
    names = [e.name for e in entries]
    assert len(names) == 7 and len(set(names)) == 7
    kinds = {e.model.kind for e in entries}
    assert ModelKind.CORAL in kinds and ModelKind.MIXTURE in kinds
    assert any(e.rounds.private_segments for e in entries)
    assert any(e.warm_start for e in entries)
    with pytest.raises(KeyError):
        bundle_by_name("nope")


# --- run ----------------------------------------------------------------------

def test_run_writes_artifacts(tiny_config):
    cfg = tiny_config()
    rec = cmd_run(cfg)
    out = cfg.output_dir / "runs" / "run"
    assert rec.termination == COMPLETED
    names = sorted(p.name for p in out.iterdir())
    assert names == ["client_1.json", "client_2.json", "client_3.json", "global.json",
                     "manifest.json", "predictor.json", "run.log", "run_record.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash
    assert manifest["seed"] == 0
    assert {"flchallenge", "python", "numpy", "scipy"} <= set(manifest["versions"])
    assert load_params(out / "global.json", cfg.model).equals(rec.global_params)


def test_rerun_is_byte_identical(tiny_config, tmp_path):
    a = tiny_config(output_dir=str(tmp_path / "a"))
    b = tiny_config(output_dir=str(tmp_path / "b"))
    cmd_run(a)
    cmd_run(b)
    for name in ("global.json", "client_2.json", "run_record.json", "manifest.json"):
        assert (a.output_dir / "runs/run" / name).read_bytes() == \
            (b.output_dir / "runs/run" / name).read_bytes()


def test_zero_budget_run(tiny_config):
    cfg = tiny_config(rounds={"n_rounds": 3, "runtime_budget_secs": 0})
    rec = cmd_run(cfg)
    assert rec.termination == BUDGET_EXCEEDED
    assert [r for r, _ in rec.snapshots] == [0]


def test_message_cap_still_saves_record(tiny_config):
    cfg = tiny_config(rounds={"n_rounds": 3, "msg_cap_bytes": 64})
    with pytest.raises(BudgetError):
        cmd_run(cfg)
    record = json.loads((cfg.output_dir / "runs/run/run_record.json").read_text())
    assert record["termination"] == "MessageTooLarge"


# --- central baseline -------------------------------------------------------------

def test_central_step_budget(federation, tiny_config):
    cfg = tiny_config(rounds={"n_rounds": 10, "batch_size": 32})
    # ceil(230/32), ceil(65/32), ceil(400/32) = 8, 3, 13 -> mean 8
    assert central_step_budget(federation, cfg) == 80


def test_central_matches_single_site_fedavg(federation, tiny_config):
    cfg = tiny_config(rounds={"n_rounds": 4})
    site = federation[:1]
    central = train_central(cfg, site)
    fed = run_federated(site, cfg.model, cfg.rounds, cfg.seed).global_params
    assert central.allclose(fed, atol=1e-12)


def test_central_baseline_outputs(tiny_config, federation):
    cfg = tiny_config()
    _, reports = cmd_central_baseline(cfg, federation)
    assert [r.scope for r in reports] == ["site-1", "site-2", "site-3", "overall"]
    assert (cfg.output_dir / "runs/central/reports.json").exists()


# --- evaluate ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """All seven bundles trained for three rounds, plus the central row."""
    root = tmp_path_factory.mktemp("challenge")
    cfg = build_config({"seed": 0, "output_dir": str(root), "rounds": {"n_rounds": 3},
                        "leaderboard": {"n_trials": 50}})
    fed = cmd_gen_data(cfg)
    entries = challenge_entries(cfg)
    train_entries(cfg, fed, entries)
    cmd_central_baseline(cfg, fed)
    return cfg, fed, entries


def test_evaluate_modes(trained):
    cfg, fed, entries = trained
    personal = next(e for e in entries if e.rounds.private_segments)
    run_dir = personal.artifacts
    per_site = cmd_evaluate(run_dir, fed, "Test2", ["BySite", "Overall"], mode="per_site")
    ensemble = cmd_evaluate(run_dir, fed, "External", ["Overall"], mode="ensemble")
    assert len(per_site) == 4 and len(ensemble) == 1
    assert ensemble[0].n == 86
    by_race = cmd_evaluate(run_dir, fed, "Test2", ["ByRace"])
    assert all(r.scope.startswith("race:") for r in by_race)
    assert isinstance(load_predictor(run_dir, "per_site"), dict)


def test_evaluate_errors(trained, tmp_path):
    cfg, fed, entries = trained
    with pytest.raises(CheckpointError):
        load_predictor(tmp_path)
    with pytest.raises(EmptySplitError):
        cmd_evaluate(entries[0].artifacts, fed[:3], "External")
    # a checkpoint whose layout does not match its model
    bad = tmp_path / "bad"
    bad.mkdir()
    info = json.loads((entries[0].artifacts / "predictor.json").read_text())
    info["model"]["hidden"] = 3
    (bad / "predictor.json").write_text(json.dumps(info))
    (bad / "global.json").write_bytes((entries[0].artifacts / "global.json").read_bytes())
    with pytest.raises(CheckpointError):
        load_predictor(bad)


def test_evaluate_from_saved_data(trained, tmp_path):
    cfg, fed, entries = trained
    loaded = load_federation(cfg.output_dir / "data" / "federation.json")
    a = cmd_evaluate(entries[0].artifacts, fed, "Test1")
    b = cmd_evaluate(entries[0].artifacts, loaded, "Test1")
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


# --- leaderboards -----------------------------------------------------------------

def test_internal_leaderboard(trained, tmp_path):
    cfg, fed, entries = trained
    central = cfg.output_dir / "runs" / "central"
    board = cmd_leaderboard(entries, fed, INTERNAL, cfg, tmp_path / "lb",
                            unranked={"central": central})
    assert board.table.values.shape == (7, 20)
    assert board.ordering == board.rank.ordering
    rows = board.rows()
    assert [r["rank"] for r in rows] == [1, 2, 3, 4, 5, 6, 7, "N/A"]
    assert rows[-1]["algo"] == "central"
    assert set(board.bootstrap) == {"linear", "quadratic"}
    assert board.bootstrap["linear"].n_trials == 50
    for sig in board.significance.values():
        assert sig.mutually_significant_pairs() == []
    files = {p.name for p in (tmp_path / "lb").iterdir()}
    assert {"leaderboard.csv", "metric_table.csv", "ranks.json", "bootstrap_linear.json",
            "bootstrap_linear_long.csv", "significance_quadratic.csv"} <= files


def test_leaderboard_is_deterministic(trained, tmp_path):
    cfg, fed, entries = trained
    cmd_leaderboard(entries, fed, INTERNAL, cfg, tmp_path / "a")
    cmd_leaderboard(entries, fed, INTERNAL, cfg, tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name


def test_external_phase_reads_only_external(trained, monkeypatch):
    cfg, fed, entries = trained
    seen = []
    original = SiteDataset.select

    def spy(self, split):
        seen.append(split)
        return original(self, split)

    monkeypatch.setattr(SiteDataset, "select", spy)
    board = cmd_leaderboard(entries, fed, EXTERNAL, cfg)
    assert set(seen) == {"External"}
    assert board.table.values.shape == (7, 5)
    assert board.table.metric_names[:3] == ("lin_kappa_overall", "quad_kappa_overall",
                                            "auc_overall")


def test_external_phase_does_not_train(trained, monkeypatch):
    cfg, fed, entries = trained

    def forbidden(*a, **k):
        raise AssertionError("training during evaluation")

    monkeypatch.setattr("flchallenge.harness.commands.run_federated", forbidden)
    monkeypatch.setattr(bundles_mod, "pretrain", forbidden)
    cmd_leaderboard(entries, fed, EXTERNAL, cfg)


def test_phase_comparison(trained, tmp_path):
    cfg, fed, entries = trained
    a = cmd_leaderboard(entries, fed, INTERNAL, cfg)
    b = cmd_leaderboard(entries, fed, EXTERNAL, cfg)
    first = compare_phases(a, b, tmp_path / "cmp.json")
    second = compare_phases(a, b)
    assert first == second
    assert -1.0 <= first["spearman"] <= 1.0
    assert json.loads((tmp_path / "cmp.json").read_text()) == first


def test_single_entry_leaderboard(trained):
    cfg, fed, entries = trained
    board = cmd_leaderboard(entries[:1], fed, INTERNAL, cfg)
    assert board.bootstrap == {} and board.significance == {}
    assert board.notices


def test_leaderboard_errors(trained):
    cfg, fed, entries = trained
    with pytest.raises(ConfigError):
        cmd_leaderboard(entries + entries[:1], fed, INTERNAL, cfg)
    with pytest.raises(ConfigError):
        cmd_leaderboard(entries, fed, "Phase3", cfg)
    with pytest.raises(EmptySplitError):
        cmd_leaderboard(entries, fed[:3], EXTERNAL, cfg)


def test_unknown_bundle_subset(tiny_config):
    cfg = tiny_config(leaderboard={"bundles": ["nope"]})
    with pytest.raises(ConfigError):
        challenge_entries(cfg)


# --- demographics ----------------------------------------------------------------

def test_demographics_tables(trained, tmp_path):
    cfg, fed, entries = trained
    bundle = cmd_demographics(entries, fed, "Test2", tmp_path)
    race_header = (tmp_path / "race_quad_kappa.csv").read_text().splitlines()[0]
    assert race_header == "algo,site,race,n,quad_kappa,low_sample"
    age_header = (tmp_path / "age_quad_kappa.csv").read_text().splitlines()[0]
    assert age_header.startswith("algo,age_decade,n,quad_kappa,mean_quadratic_score")
    small = [r for r in bundle.race_rows if r["n"] < 10]
    assert small and all(r["low_sample"] for r in small)
    pooled = [r for r in bundle.age_rows if r["algo"] == "all"]
    assert pooled and all(r["ci_low"] <= r["mean_quadratic_score"] <= r["ci_high"]
                          for r in pooled if not math.isnan(r["ci_half_width"]))


def test_demographics_needs_fields(trained):
    cfg, fed, entries = trained
    test2 = fed[0].select("Test2")
    broken = dataclasses.replace(test2, race=np.array([""] * len(test2)))
    with pytest.raises(SchemaError):
        cmd_demographics(entries[:1], [broken], "Test2")


def test_ci_shrinks_with_sqrt_n(rng):
    scores = rng.random(50)
    m1, h1 = normal_ci(scores)
    m4, h4 = normal_ci(np.tile(scores, 4))
    assert m4 == pytest.approx(m1)
    # the ddof=1 std changes slightly with n, so compare against the exact ratio
    ratio = np.std(np.tile(scores, 4), ddof=1) / np.std(scores, ddof=1) / 2
    assert h4 / h1 == pytest.approx(ratio, rel=1e-12)
    assert h4 / h1 == pytest.approx(0.5, rel=0.02)
    assert math.isnan(normal_ci(np.array([0.5]))[1])


# --- standalone ranking -----------------------------------------------------------

def test_rank_command(tmp_path):
    result = cmd_rank(FIXTURES / "finalist_metrics.csv", out_dir=tmp_path)
    assert result.ordering[:4] == ("#1", "#2", "#3", "#4")
    assert json.loads((tmp_path / "ranks.json").read_text())["ordering"] == list(result.ordering)
