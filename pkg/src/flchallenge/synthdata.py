"""Synthetic multi-site federation with ordinal labels and demographics.

Three training sites plus one external site are generated at 1/100 of the
full-size image counts in ``FULL_SCALE_COUNTS``. Features are class-conditional Gaussians whose
means lie on a shared ordinal axis ``u`` (class ``c`` sits at ``c * u``),
offset per site by a ``feature_shift`` vector. Label skew and demographic
mix are configured per site.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import _rng
from ._io import atomic_write_text
from .errors import ConfigError, EmptySplitError, SchemaError

N_CLASSES = 4
SPLITS = ("Train", "Test1", "Test2", "External")
RACES = (
    "American Indian or Alaska",
    "Asian",
    "Black or African American",
    "Hispanic or Latino",
    "Other",
    "Unknown",
    "White",
)
AGE_RANGE = (23, 90)

# Full-scale image counts per site: (train, test1, test2).
FULL_SCALE_COUNTS = {
    1: (22964, 3327, 6637),
    2: (6534, 1128, 3889),
    3: (40031, 5952, 13428),
}
EXTERNAL_FULL_SCALE = 8603

# Patient counts per race, in RACES order, for the three test sites.
RACE_COUNTS = {
    1: (0, 33, 176, 41, 10, 5, 1122),
    2: (0, 13, 109, 62, 15, 0, 563),
    3: (2, 37, 389, 72, 18, 0, 2237),
}
AGE_STATS = {1: (55.2, 10.7), 2: (53.1, 9.8), 3: (54.2, 10.2), 4: (54.3, 10.3)}

DEFAULT_CLASS_PROBS = {
    1: (0.10, 0.40, 0.40, 0.10),
    2: (0.05, 0.35, 0.45, 0.15),
    3: (0.12, 0.45, 0.35, 0.08),
}
DEFAULT_DIM = 16
DEFAULT_SHIFT_NORM = 0.5
DEFAULT_NOISE_SD = 0.5
# Shift norm multipliers: site 2 is the most distinct training site, the
# external site is twice as far as a typical training site.
SHIFT_SCALE = {1: 1.0, 2: 1.5, 3: 1.0, 4: 2.0}
# Fraction of each shift lying along the ordinal axis (moves class boundaries).
SHIFT_AXIS_FRACTION = 0.8


@dataclass(frozen=True)
class SiteSpec:
    site_id: int
    n_train: int
    n_test1: int
    n_test2: int
    class_probs: tuple[float, ...]
    feature_shift: tuple[float, ...]
    demo_probs: tuple[float, ...]
    age_mean: float
    age_sd: float
    seed: int
    n_external: int = 0

    def validate(self, d: int | None = None) -> None:
        if self.site_id < 1:
            raise ConfigError("site_id must be >= 1", "site_id")
        for name in ("n_train", "n_test1", "n_test2", "n_external"):
            if getattr(self, name) < 0:
                raise ConfigError("count must be >= 0", name)
        _check_probs(self.class_probs, "class_probs", N_CLASSES)
        _check_probs(self.demo_probs, "demo_probs", len(RACES))
        if d is not None and len(self.feature_shift) != d:
            raise ConfigError(f"length {len(self.feature_shift)} != d={d}", "feature_shift")
        if self.age_sd < 0:
            raise ConfigError("must be >= 0", "age_sd")

    @property
    def split_counts(self) -> dict[str, int]:
        return {
            "Train": self.n_train,
            "Test1": self.n_test1,
            "Test2": self.n_test2,
            "External": self.n_external,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SiteSpec":
        data = dict(data)
        for key in ("class_probs", "feature_shift", "demo_probs"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc), "sites") from None


def _check_probs(probs, name, length):
    p = np.asarray(probs, dtype=float)
    if p.shape != (length,):
        raise ConfigError(f"expected {length} entries, got {p.size}", name)
    if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError("must be non-negative and sum to 1", name)


@dataclass(frozen=True, eq=False)
class Sample:
    image_id: int
    features: np.ndarray
    label: int
    site_id: int
    split: str
    race: str
    age: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.image_id, self.label, self.site_id, self.split, self.race, self.age) == (
            other.image_id, other.label, other.site_id, other.split, other.race, other.age
        ) and np.array_equal(self.features, other.features)

    __hash__ = None


@dataclass
class SiteDataset:
    """Columnar store of samples; ``spec`` is None for pooled or imported data."""

    spec: SiteSpec | None
    image_id: np.ndarray
    site_id: np.ndarray
    split: np.ndarray
    label: np.ndarray
    race: np.ndarray
    age: np.ndarray
    features: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.image_id.shape[0])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(
                image_id=int(self.image_id[i]),
                features=self.features[i],
                label=int(self.label[i]),
                site_id=int(self.site_id[i]),
                split=str(self.split[i]),
                race=str(self.race[i]),
                age=int(self.age[i]),
            )

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def primary_site(self) -> int:
        if self.spec is not None:
            return self.spec.site_id
        ids = np.unique(self.site_id)
        return int(ids[0]) if ids.size == 1 else 0

    def take(self, mask_or_index) -> "SiteDataset":
        idx = np.asarray(mask_or_index)
        return SiteDataset(
            spec=self.spec,
            image_id=self.image_id[idx],
            site_id=self.site_id[idx],
            split=self.split[idx],
            label=self.label[idx],
            race=self.race[idx],
            age=self.age[idx],
            features=self.features[idx],
        )

    def select(self, split: str | Sequence[str]) -> "SiteDataset":
        splits = (split,) if isinstance(split, str) else tuple(split)
        return self.take(np.isin(self.split, splits))

    def counts(self) -> dict[str, int]:
        return {s: int(np.sum(self.split == s)) for s in SPLITS}


def default_site_specs(seed: int = 0, d: int = DEFAULT_DIM, scale: float = 0.01,
                       shift_norm: float = DEFAULT_SHIFT_NORM,
                       include_external: bool = True) -> list[SiteSpec]:
    """Default site specs with counts at ``scale`` of ``FULL_SCALE_COUNTS``.

    The external site (id 4) gets a shift twice as large as the others and
    uses the pooled race proportions.
    """
    if d < 2:
        raise ConfigError("d must be >= 2", "d")
    specs = []
    for site_id, full in FULL_SCALE_COUNTS.items():
        n_train, n_test1, n_test2 = (int(round(n * scale)) for n in full)
        race = np.asarray(RACE_COUNTS[site_id], dtype=float)
        specs.append(SiteSpec(
            site_id=site_id,
            n_train=n_train,
            n_test1=n_test1,
            n_test2=n_test2,
            class_probs=DEFAULT_CLASS_PROBS[site_id],
            feature_shift=_random_shift(seed, site_id, d, SHIFT_SCALE[site_id] * shift_norm),
            demo_probs=tuple((race / race.sum()).tolist()),
            age_mean=AGE_STATS[site_id][0],
            age_sd=AGE_STATS[site_id][1],
            seed=_rng.derive_seed(seed, "data", site_id),
        ))
    if include_external:
        pooled_race = np.sum([RACE_COUNTS[s] for s in RACE_COUNTS], axis=0).astype(float)
        ext_probs = np.mean([DEFAULT_CLASS_PROBS[s] for s in DEFAULT_CLASS_PROBS], axis=0)
        specs.append(SiteSpec(
            site_id=4,
            n_train=0,
            n_test1=0,
            n_test2=0,
            n_external=int(round(EXTERNAL_FULL_SCALE * scale)),
            class_probs=tuple((ext_probs / ext_probs.sum()).tolist()),
            feature_shift=_random_shift(seed, 4, d, SHIFT_SCALE[4] * shift_norm),
            demo_probs=tuple((pooled_race / pooled_race.sum()).tolist()),
            age_mean=AGE_STATS[4][0],
            age_sd=AGE_STATS[4][1],
            seed=_rng.derive_seed(seed, "data", 4),
        ))
    return specs


def _random_shift(seed, site_id, d, norm):
    """Shift of length ``norm`` with a fixed share along the ordinal axis.

    The sign of the axial part and the orthogonal direction are random.
    """
    rng = _rng.stream(seed, "shift", site_id)
    u = ordinal_axis(d)
    v = rng.standard_normal(d)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    a = SHIFT_AXIS_FRACTION
    return tuple((norm * (sign * a * u + np.sqrt(1 - a * a) * v)).tolist())


def ordinal_axis(d: int) -> np.ndarray:
    """Unit direction along which class means are spaced."""
    return np.full(d, 1.0 / np.sqrt(d))


def class_means(spec: SiteSpec, d: int) -> np.ndarray:
    u = ordinal_axis(d)
    shift = np.asarray(spec.feature_shift, dtype=float)
    return np.stack([c * u + shift for c in range(1, N_CLASSES + 1)])


def generate_site(spec: SiteSpec, d: int, first_image_id: int = 0,
                  noise_sd: float = DEFAULT_NOISE_SD) -> SiteDataset:
    spec.validate(d)
    rng = np.random.default_rng(spec.seed)
    means = class_means(spec, d)
    split_col = np.concatenate(
        [np.full(n, s, dtype=object) for s, n in spec.split_counts.items()]
    ).astype(str)
    n = split_col.shape[0]
    labels = rng.choice(N_CLASSES, size=n, p=spec.class_probs) + 1
    features = means[labels - 1] + noise_sd * rng.standard_normal((n, d))
    race_idx = rng.choice(len(RACES), size=n, p=spec.demo_probs)
    ages = np.clip(np.rint(rng.normal(spec.age_mean, spec.age_sd, size=n)), *AGE_RANGE)
    return SiteDataset(
        spec=spec,
        image_id=np.arange(first_image_id, first_image_id + n, dtype=np.int64),
        site_id=np.full(n, spec.site_id, dtype=np.int64),
        split=split_col,
        label=labels.astype(np.int64),
        race=np.asarray(RACES, dtype=str)[race_idx],
        age=ages.astype(np.int64),
        features=features,
    )


def generate_federation(specs: Sequence[SiteSpec], d: int = DEFAULT_DIM,
                        noise_sd: float = DEFAULT_NOISE_SD) -> list[SiteDataset]:
    """Generate one dataset per spec; image ids run consecutively across sites."""
    if d < 2:
        raise ConfigError("d must be >= 2", "d")
    if noise_sd <= 0:
        raise ConfigError("must be > 0", "noise_sd")
    ids = [s.site_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("site ids must be unique", "sites")
    out, next_id = [], 0
    for spec in specs:
        ds = generate_site(spec, d, first_image_id=next_id, noise_sd=noise_sd)
        next_id += len(ds)
        out.append(ds)
    return out


def empirical_label_dist(ds: SiteDataset, split: str) -> np.ndarray:
    labels = ds.label[ds.split == split]
    if labels.size == 0:
        raise EmptySplitError(f"site {ds.primary_site} has no {split} samples")
    return np.bincount(labels - 1, minlength=N_CLASSES) / labels.size


def pooled_dataset(sites: Sequence[SiteDataset], split: str | Sequence[str] | None = None
                   ) -> SiteDataset:
    """Concatenate sites in ascending ``site_id`` order, optionally one split."""
    if not sites:
        raise ConfigError("need at least one site", "sites")
    ordered = sorted(sites, key=lambda s: s.primary_site)
    parts = [s if split is None else s.select(split) for s in ordered]
    if len(parts) == 1:
        return parts[0]
    return SiteDataset(
        spec=None,
        image_id=np.concatenate([p.image_id for p in parts]),
        site_id=np.concatenate([p.site_id for p in parts]),
        split=np.concatenate([p.split for p in parts]),
        label=np.concatenate([p.label for p in parts]),
        race=np.concatenate([p.race for p in parts]),
        age=np.concatenate([p.age for p in parts]),
        features=np.concatenate([p.features for p in parts]),
    )


# --- serialization ---------------------------------------------------------

META_COLUMNS = ("image_id", "site_id", "split", "label", "race", "age")


def write_csv(sites: Sequence[SiteDataset], path) -> None:
    pooled = pooled_dataset(sites)
    d = pooled.dim
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(META_COLUMNS) + [f"f{j}" for j in range(d)])
    for i in range(len(pooled)):
        writer.writerow(
            [int(pooled.image_id[i]), int(pooled.site_id[i]), pooled.split[i],
             int(pooled.label[i]), pooled.race[i], int(pooled.age[i])]
            + [repr(float(v)) for v in pooled.features[i]]
        )
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[SiteDataset]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:6]) != META_COLUMNS or not header[6:]:
            raise SchemaError(f"unexpected CSV header {header[:7]}")
        rows = list(reader)
    cols = list(zip(*rows)) if rows else [()] * len(header)
    d = len(header) - 6
    pooled = SiteDataset(
        spec=None,
        image_id=np.asarray(cols[0], dtype=np.int64),
        site_id=np.asarray(cols[1], dtype=np.int64),
        split=np.asarray(cols[2], dtype=str),
        label=np.asarray(cols[3], dtype=np.int64),
        race=np.asarray(cols[4], dtype=str),
        age=np.asarray(cols[5], dtype=np.int64),
        features=np.asarray(cols[6:], dtype=float).T.reshape(len(rows), d),
    )
    return _split_by_site(pooled)


def _split_by_site(pooled: SiteDataset) -> list[SiteDataset]:
    return [pooled.take(pooled.site_id == s) for s in np.unique(pooled.site_id)]


def to_json_dict(sites: Sequence[SiteDataset]) -> dict:
    out = []
    for ds in sites:
        out.append({
            "spec": ds.spec.to_dict() if ds.spec is not None else None,
            "image_id": ds.image_id.tolist(),
            "site_id": ds.site_id.tolist(),
            "split": ds.split.tolist(),
            "label": ds.label.tolist(),
            "race": ds.race.tolist(),
            "age": ds.age.tolist(),
            "features": ds.features.tolist(),
        })
    return {"sites": out}


def from_json_dict(data: dict) -> list[SiteDataset]:
    try:
        sites = []
        for entry in data["sites"]:
            spec = SiteSpec.from_dict(entry["spec"]) if entry.get("spec") else None
            n = len(entry["image_id"])
            feats = np.asarray(entry["features"], dtype=float)
            sites.append(SiteDataset(
                spec=spec,
                image_id=np.asarray(entry["image_id"], dtype=np.int64),
                site_id=np.asarray(entry["site_id"], dtype=np.int64),
                split=np.asarray(entry["split"], dtype=str),
                label=np.asarray(entry["label"], dtype=np.int64),
                race=np.asarray(entry["race"], dtype=str),
                age=np.asarray(entry["age"], dtype=np.int64),
                features=feats.reshape(n, -1),
            ))
    except KeyError as exc:
        raise SchemaError(f"missing field {exc}") from None
    return sites


def write_json(sites: Sequence[SiteDataset], path) -> None:
    atomic_write_text(path, json.dumps(to_json_dict(sites)))


def read_json(path) -> list[SiteDataset]:
    return from_json_dict(json.loads(Path(path).read_text()))


def load_federation(path) -> list[SiteDataset]:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path)
    return read_json(path)
