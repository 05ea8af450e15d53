"""Synthetic confounded identity datasets and CSV ingestion.

Each sample is ``[causal | attribute]``. The causal block is an identity
center plus noise. The attribute block mixes a per-identity attribute vector
(drawn around a group center) with per-image variation; ``consistency``
controls the mix. High consistency makes the attribute a shortcut for telling
identities apart during training. Test images redraw the attribute vector per
image, so the shortcut stops working at evaluation time.

Group membership lives in :class:`AttributeSidecar`, which training code
never receives.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError
from .evaluation import PairList


@dataclass(frozen=True)
class GroupSpec:
    name: str
    share: float
    images_per_identity: int
    consistency: float
    causal_noise: float | None = None  # falls back to DatasetSpec.causal_noise


@dataclass
class DatasetSpec:
    num_identities: int = 100
    groups: tuple = (
        GroupSpec("majority", 0.8, 8, 0.0),
        GroupSpec("minority", 0.2, 4, 0.9, causal_noise=0.25),
    )
    causal_dim: int = 16
    attribute_dim: int = 16
    causal_noise: float = 0.1
    attribute_scale: float = 0.3
    attribute_noise: float = 0.1
    group_separation: float = 1.0
    test_images_per_identity: int = 10
    pairs_per_group: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.groups = tuple(g if isinstance(g, GroupSpec) else GroupSpec(**g) for g in self.groups)
        if not self.groups:
            raise ConfigurationError("at least one group required")
        shares = np.array([g.share for g in self.groups])
        if np.any(shares <= 0) or abs(shares.sum() - 1.0) > 1e-9:
            raise ConfigurationError("group shares must be positive and sum to 1")
        for g in self.groups:
            if g.images_per_identity < 2:
                raise ConfigurationError(f"group {g.name!r}: need at least 2 images per identity")
            if not 0.0 <= g.consistency <= 1.0:
                raise ConfigurationError(f"group {g.name!r}: consistency must lie in [0, 1]")
        if len({g.name for g in self.groups}) != len(self.groups):
            raise ConfigurationError("group names must be unique")
        if self.test_images_per_identity < 2 or self.num_identities < 2:
            raise ConfigurationError("need >= 2 identities and >= 2 test images per identity")
        if self.causal_dim < 1 or self.attribute_dim < 0:
            raise ConfigurationError("invalid feature dimensions")

    @property
    def input_dim(self) -> int:
        return self.causal_dim + self.attribute_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d


@dataclass
class Dataset:
    """Training view: features and identity labels only."""

    x: np.ndarray
    y: np.ndarray
    num_identities: int
    identity_names: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not self.identity_names:
            self.identity_names = [str(i) for i in range(self.num_identities)]
        counts = np.bincount(self.y, minlength=self.num_identities)
        if np.any(counts < 2):
            bad = [self.identity_names[i] for i in np.flatnonzero(counts < 2)]
            raise ConfigurationError(f"identities with fewer than 2 samples: {bad}")

    def __len__(self):
        return len(self.y)


@dataclass
class AttributeSidecar:
    """Ground-truth group per identity; for generation and evaluation only."""

    identity_groups: np.ndarray  # group name per identity

    @property
    def group_names(self) -> list:
        return sorted(set(self.identity_groups.tolist()))

    def group_codes(self) -> np.ndarray:
        names = self.group_names
        return np.array([names.index(g) for g in self.identity_groups])


@dataclass
class SyntheticBenchmark:
    spec: DatasetSpec
    train: Dataset
    test: Dataset
    pairs: PairList
    sidecar: AttributeSidecar


def allocate_identities(num_identities: int, shares) -> np.ndarray:
    """Largest-remainder rounding of ``shares * num_identities``."""
    shares = np.asarray(shares, dtype=np.float64)
    raw = shares * num_identities
    counts = np.floor(raw + 1e-9).astype(np.int64)
    rem = raw - counts
    for i in np.argsort(-rem, kind="stable")[: num_identities - counts.sum()]:
        counts[i] += 1
    if np.any(counts == 0):
        raise ConfigurationError(f"shares {shares.tolist()} leave a group without identities at C={num_identities}")
    return counts


def make_pairs(labels, identity_groups, pairs_per_group: int, rng: np.random.Generator) -> PairList:
    """Equal numbers of genuine and impostor pairs per group, sampled without replacement."""
    labels = np.asarray(labels)
    identity_groups = np.asarray(identity_groups, dtype=object)
    sample_groups = identity_groups[labels]
    first, second, genuine, group = [], [], [], []
    for g in sorted(set(identity_groups.tolist()), key=str):
        idx = np.flatnonzero(sample_groups == g)
        gen, imp = [], []
        for a, b in itertools.combinations(idx, 2):
            (gen if labels[a] == labels[b] else imp).append((a, b))
        n = min(pairs_per_group, len(gen), len(imp))
        for pool, flag in ((gen, True), (imp, False)):
            pick = rng.choice(len(pool), size=n, replace=False) if n else []
            for j in sorted(pick):
                first.append(pool[j][0])
                second.append(pool[j][1])
                genuine.append(flag)
                group.append(g)
    return PairList(first, second, genuine, group)


def generate(spec: DatasetSpec | None = None) -> SyntheticBenchmark:
    spec = spec or DatasetSpec()
    rng = np.random.default_rng(spec.seed)
    counts = allocate_identities(spec.num_identities, [g.share for g in spec.groups])
    group_of = np.repeat(np.arange(len(spec.groups)), counts)
    centers_attr = spec.group_separation * rng.standard_normal((len(spec.groups), spec.attribute_dim))
    causal = rng.standard_normal((spec.num_identities, spec.causal_dim))
    causal /= np.linalg.norm(causal, axis=1, keepdims=True)
    ident_attr = centers_attr[group_of] + rng.standard_normal((spec.num_identities, spec.attribute_dim))

    def draw(y, fresh_attr):
        g = [spec.groups[i] for i in group_of[y]]
        cons = np.array([gg.consistency for gg in g])[:, None]
        cnoise = np.array([spec.causal_noise if gg.causal_noise is None else gg.causal_noise for gg in g])[:, None]
        xc = causal[y] + cnoise * rng.standard_normal((len(y), spec.causal_dim))
        if fresh_attr:
            a = centers_attr[group_of[y]] + rng.standard_normal((len(y), spec.attribute_dim))
        else:
            a = ident_attr[y]
        v = centers_attr[group_of[y]] + rng.standard_normal((len(y), spec.attribute_dim))
        xa = spec.attribute_scale * (cons * a + (1.0 - cons) * v)
        xa = xa + spec.attribute_noise * rng.standard_normal((len(y), spec.attribute_dim))
        return np.hstack([xc, xa])

    per_id = np.array([spec.groups[g].images_per_identity for g in group_of])
    y_train = np.repeat(np.arange(spec.num_identities), per_id)
    y_test = np.repeat(np.arange(spec.num_identities), spec.test_images_per_identity)
    x_train = draw(y_train, fresh_attr=False)
    x_test = draw(y_test, fresh_attr=True)
    names = np.array([spec.groups[g].name for g in group_of], dtype=object)
    pairs = make_pairs(y_test, names, spec.pairs_per_group, rng)
    return SyntheticBenchmark(
        spec,
        Dataset(x_train, y_train, spec.num_identities),
        Dataset(x_test, y_test, spec.num_identities),
        pairs,
        AttributeSidecar(names),
    )


@dataclass
class CueReport:
    group: str
    train_accuracy: float
    test_accuracy: float
    chance: float


def spurious_cue_report(bench: SyntheticBenchmark, group: str) -> CueReport:
    """Nearest identity-centroid accuracy using the attribute channel alone.

    Centroids come from the training images of ``group``. A planted cue shows
    up as accuracy well above chance on training images and near chance on
    test images, whose attribute vectors are redrawn.
    """
    names = bench.sidecar.identity_groups
    ids = np.flatnonzero(names == group)
    if ids.size < 2:
        raise ConfigurationError(f"group {group!r} needs at least two identities")
    lo = bench.spec.causal_dim

    def split(data):
        sel = np.isin(data.y, ids)
        return data.x[sel, lo:], np.searchsorted(ids, data.y[sel])

    xa, ya = split(bench.train)
    centroids = np.stack([xa[ya == i].mean(axis=0) for i in range(ids.size)])

    def accuracy(x, y):
        d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        return float(np.mean(np.argmin(d, axis=1) == y))

    return CueReport(group, accuracy(xa, ya), accuracy(*split(bench.test)), 1.0 / ids.size)


# --- CSV -------------------------------------------------------------------

def groups_path(path) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".groups.csv")


def write_csv(path, dataset: Dataset, sidecar: AttributeSidecar | None = None) -> Path:
    """Write ``id,group,f0..fD`` rows; with a sidecar also write ``<name>.groups.csv``."""
    path = Path(path)
    d = dataset.x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "group", *[f"f{i}" for i in range(d)]])
        for xi, yi in zip(dataset.x, dataset.y):
            g = sidecar.identity_groups[yi] if sidecar is not None else ""
            w.writerow([dataset.identity_names[yi], g, *[repr(float(v)) for v in xi]])
    if sidecar is not None:
        with open(groups_path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "group"])
            for name, g in zip(dataset.identity_names, sidecar.identity_groups):
                w.writerow([name, g])
    return path


def load_csv(path):
    """Parse a dataset file. Returns ``(Dataset, AttributeSidecar or None)``.

    The group column (or a ``.groups.csv`` file next to ``path``) only feeds
    the sidecar.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError("empty file", row=1)
    header = rows[0]
    if header[:2] != ["id", "group"] or len(header) < 3:
        raise IngestionError("header must start with 'id,group,f0'", row=1)
    width = len(header)
    names, index, ys, xs, groups = [], {}, [], [], {}
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise IngestionError(f"expected {width} fields, got {len(row)}", row=r)
        try:
            xs.append([float(v) for v in row[2:]])
        except ValueError:
            raise IngestionError("non-numeric feature value", row=r) from None
        if not np.all(np.isfinite(xs[-1])):
            raise IngestionError("non-finite feature value", row=r)
        ident = row[0]
        if ident not in index:
            index[ident] = len(names)
            names.append(ident)
        ys.append(index[ident])
        if row[1]:
            if groups.setdefault(ident, row[1]) != row[1]:
                raise IngestionError(f"identity {ident!r} listed under two groups", row=r)
    if not ys:
        raise IngestionError("no samples", row=2)
    y = np.array(ys)
    counts = np.bincount(y, minlength=len(names))
    if np.any(counts < 2):
        bad = [names[i] for i in np.flatnonzero(counts < 2)]
        first_row = 2 + int(np.flatnonzero(y == np.flatnonzero(counts < 2)[0])[0])
        raise IngestionError(f"identities with fewer than 2 samples: {bad}", row=first_row)
    side = groups_path(path)
    if side.exists():
        with open(side, newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                if row:
                    groups[row[0]] = row[1]
    sidecar = None
    if groups:
        missing = [n for n in names if n not in groups]
        if missing:
            raise IngestionError(f"identities without group: {missing[:5]}")
        sidecar = AttributeSidecar(np.array([groups[n] for n in names], dtype=object))
    return Dataset(np.array(xs), y, len(names), names), sidecar


# --- planted cones ---------------------------------------------------------

@dataclass
class PlantedCones:
    projections: np.ndarray
    labels: np.ndarray
    planted: np.ndarray  # cone index per identity


def planted_cones(num_identities: int = 10, per_identity: int = 4, dim: int = 8, spread: float = 0.15,
                  noise: float = 0.1, seed: int = 0) -> PlantedCones:
    """Unit projections whose identities sit in two orthogonal cones, half in each.

    Identity centers are the cone axis plus ``spread`` noise; samples add
    ``noise`` around their identity center.
    """
    if num_identities < 2 or per_identity < 2 or dim < 2:
        raise ConfigurationError("need >= 2 identities, >= 2 samples each and dim >= 2")
    rng = np.random.default_rng(seed)
    planted = np.array([0] * (num_identities // 2) + [1] * (num_identities - num_identities // 2))
    rng.shuffle(planted)
    axes = np.eye(dim)[:2]
    centers = axes[planted] + spread * rng.standard_normal((num_identities, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.repeat(np.arange(num_identities), per_identity)
    z = centers[y] + noise * rng.standard_normal((len(y), dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return PlantedCones(z, y, planted)
