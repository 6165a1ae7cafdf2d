import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flchallenge.errors import ConfigError, EmptySplitError, SchemaError
from flchallenge.synthdata import (AGE_RANGE, DEFAULT_CLASS_PROBS, FULL_SCALE_COUNTS, RACES,
                                   SiteSpec, class_means, default_site_specs,
                                   empirical_label_dist, generate_federation, generate_site,
                                   load_federation, ordinal_axis, pooled_dataset, read_csv,
                                   read_json, write_csv, write_json)


def _spec(**kw):
    base = dict(site_id=1, n_train=50, n_test1=5, n_test2=10, class_probs=(0.25,) * 4,
                feature_shift=(0.0,) * 4, demo_probs=(0, 0, 0, 0, 0, 0, 1.0),
                age_mean=50.0, age_sd=10.0, seed=7)
    base.update(kw)
    return SiteSpec(**base)


def test_default_train_counts(federation):
    assert [ds.counts()["Train"] for ds in federation[:3]] == [230, 65, 400]
    assert [ds.counts()["Test1"] for ds in federation[:3]] == [33, 11, 60]
    assert [ds.counts()["Test2"] for ds in federation[:3]] == [66, 39, 134]
    assert federation[3].counts() == {"Train": 0, "Test1": 0, "Test2": 0, "External": 86}


def test_train_ratios_within_one_percent(federation):
    full = np.array([FULL_SCALE_COUNTS[s][0] for s in (1, 2, 3)], dtype=float)
    ours = np.array([ds.counts()["Train"] for ds in federation[:3]], dtype=float)
    assert np.allclose(ours / ours.sum(), full / full.sum(), rtol=0.01)


def test_generation_is_deterministic():
    a = generate_federation(default_site_specs(seed=5))
    b = generate_federation(default_site_specs(seed=5))
    for x, y in zip(a, b):
        assert x.samples == y.samples
        assert x.features.tobytes() == y.features.tobytes()


def test_different_seeds_differ():
    a = generate_federation(default_site_specs(seed=1))
    b = generate_federation(default_site_specs(seed=2))
    assert not np.array_equal(a[0].features, b[0].features)


def test_single_class_site():
    ds = generate_site(_spec(class_probs=(1.0, 0, 0, 0)), d=4)
    assert set(ds.label.tolist()) == {1}
    assert np.array_equal(empirical_label_dist(ds, "Train"), [1, 0, 0, 0])


def test_label_distribution_within_three_sigma():
    ds = generate_site(_spec(n_train=4000), d=4)
    p = empirical_label_dist(ds, "Train")
    assert p.sum() == pytest.approx(1.0)
    # 3 * sqrt(0.25 * 0.75 / 4000) ~= 0.0205, inside the stated 0.024 band
    assert np.all(np.abs(p - 0.25) <= 0.024)


def test_site_label_skew_follows_spec(federation):
    for ds in federation[:3]:
        p = empirical_label_dist(ds, "Train")
        n = ds.counts()["Train"]
        assert np.all(np.abs(p - DEFAULT_CLASS_PROBS[ds.primary_site]) <= 3 / np.sqrt(n))


def test_empty_split_raises():
    ds = generate_site(_spec(n_test1=0), d=4)
    with pytest.raises(EmptySplitError):
        empirical_label_dist(ds, "Test1")


@pytest.mark.parametrize("bad", [
    dict(class_probs=(0.5, 0.5, 0.5, -0.5)),
    dict(class_probs=(0.3, 0.3, 0.3, 0.3)),
    dict(class_probs=(0.5, 0.5)),
    dict(demo_probs=(1.0,)),
    dict(n_train=-1),
    dict(feature_shift=(0.0,) * 3),
])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        generate_federation([_spec(**bad)], d=4)


def test_dimension_must_be_at_least_two():
    with pytest.raises(ConfigError):
        generate_federation([_spec(feature_shift=(0.0,))], d=1)
    with pytest.raises(ConfigError):
        default_site_specs(d=1)


def test_image_ids_unique_and_splits_disjoint(federation):
    pooled = pooled_dataset(federation)
    assert len(np.unique(pooled.image_id)) == len(pooled)
    seen = {}
    for iid, split in zip(pooled.image_id, pooled.split):
        assert seen.setdefault(int(iid), split) == split


def test_pooled_counts_and_order(federation):
    train = pooled_dataset(federation, "Train")
    assert len(train) == 695
    sites = train.site_id.tolist()
    assert sites == sorted(sites)
    one = pooled_dataset([federation[1]])
    assert one is federation[1]


def test_pooled_order_ignores_input_order(federation):
    a = pooled_dataset(federation[:3][::-1], "Train")
    b = pooled_dataset(federation[:3], "Train")
    assert np.array_equal(a.image_id, b.image_id)


def test_adjacent_classes_closer(federation):
    ds = federation[2]
    means = np.stack([ds.features[ds.label == c].mean(axis=0) for c in range(1, 5)])
    for c in range(2):
        assert np.linalg.norm(means[c] - means[c + 1]) < np.linalg.norm(means[c] - means[c + 2])


def test_class_means_lie_on_axis():
    spec = _spec()
    m = class_means(spec, 4)
    u = ordinal_axis(4)
    assert np.linalg.norm(u) == pytest.approx(1.0)
    assert np.allclose(m[1] - m[0], u)


def test_external_shift_is_twice_typical():
    specs = default_site_specs(seed=0)
    norms = {s.site_id: np.linalg.norm(s.feature_shift) for s in specs}
    assert norms[4] == pytest.approx(2 * norms[1])
    assert norms[1] == pytest.approx(norms[3])


def test_demographics(federation):
    for ds in federation:
        assert set(ds.race.tolist()) <= set(RACES)
        assert ds.age.min() >= AGE_RANGE[0] and ds.age.max() <= AGE_RANGE[1]
    # site 2 has no American Indian or Alaska patients, so probability 0
    assert "American Indian or Alaska" not in set(federation[1].race.tolist())


def test_csv_round_trip(tmp_path, small_federation):
    path = tmp_path / "fed.csv"
    write_csv(small_federation, path)
    header = path.read_text().splitlines()[0]
    assert header == "image_id,site_id,split,label,race,age," + ",".join(f"f{j}" for j in range(6))
    back = read_csv(path)
    for a, b in zip(small_federation, back):
        assert np.array_equal(a.image_id, b.image_id)
        assert np.array_equal(a.features, b.features)
        assert a.race.tolist() == b.race.tolist()
        assert b.primary_site == a.primary_site


def test_json_round_trip(tmp_path, small_federation):
    path = tmp_path / "fed.json"
    write_json(small_federation, path)
    back = load_federation(path)
    for a, b in zip(small_federation, back):
        assert a.spec == b.spec
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.split, b.split)


def test_bad_csv_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,site\n1,1\n")
    with pytest.raises(SchemaError):
        read_csv(path)


def test_json_missing_field(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"sites": [{"image_id": [1]}]}))
    with pytest.raises(SchemaError):
        read_json(path)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
       st.integers(0, 40), st.integers(0, 2**32))
def test_split_counts_match_spec(weights, n, seed):
    p = np.array(weights) / np.sum(weights)
    p[-1] = 1.0 - p[:-1].sum()
    spec = _spec(class_probs=tuple(p.tolist()), n_train=n, n_test2=n // 2, seed=seed)
    ds = generate_site(spec, d=4)
    assert ds.counts() == {"Train": n, "Test1": 5, "Test2": n // 2, "External": 0}
    assert np.all((ds.label >= 1) & (ds.label <= 4))


def test_spec_dict_round_trip():
    spec = default_site_specs(seed=0)[1]
    assert SiteSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(ConfigError):
        SiteSpec.from_dict({**spec.to_dict(), "bogus": 1})
    assert replace(spec, n_train=1).n_train == 1
