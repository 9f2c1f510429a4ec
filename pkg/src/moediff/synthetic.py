"""Synthetic bag generator with an analytic label oracle.

Bags are drawn from isotropic Gaussian clusters: one negative cluster
(class 0) and K positive subtype clusters.  A positive bag of class k
contains a fixed share of instances from cluster k and the rest from
cluster 0, modelling the scarcity of positive instances; a negative bag
contains only cluster-0 instances.  Because the cluster means are known,
the generating label can be re-derived by nearest-mean assignment, which
is the ground-truth oracle used throughout the tests.

The negative cluster is centred at the origin (background instances);
positive subtype k is centred at ``cluster_separation * u_k`` for
orthonormal directions ``u_k``, so the distance from the negative mean to
every positive mean is exactly ``cluster_separation`` (and positive
subtypes sit ``sqrt(2)`` times that apart).  By default the ``u_k`` frame
is a seeded random rotation of the embedding axes rather than the axes
themselves: distances, isotropy and the nearest-mean oracle are
unchanged, but bag statistics are not axis-aligned, so coordinate-wise
pooling baselines cannot read the class off a single coordinate.  Set
``rotate=False`` for the axis-aligned layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import Bag, ConfigError, DatasetManifest, DomainError, ManifestEntry, derive_seed


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic bag distribution.

    ``num_classes`` counts the negative class, i.e. K + 1 for K positive
    subtypes.  ``positive_fraction`` is the share of subtype instances in
    a positive bag; the count is rounded, never below one instance.
    """

    num_classes: int = 3
    embedding_dim: int = 64
    instances_min: int = 12
    instances_max: int = 24
    positive_fraction: float = 0.1
    cluster_separation: float = 8.0
    noise_std: float = 1.0
    seed: int = 0
    rotate: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least one positive subtype (num_classes >= 2)")
        if self.embedding_dim < self.num_classes:
            raise ConfigError("embedding_dim must be at least num_classes")
        if self.instances_min < 2:
            raise ConfigError("instances_min must be >= 2")
        if self.instances_min > self.instances_max:
            raise ConfigError("instances_min > instances_max")
        if not 0.0 < self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must be in (0, 1]")
        if self.cluster_separation < 0:
            raise ConfigError("cluster_separation must be >= 0")
        if self.noise_std <= 0:
            raise ConfigError("noise_std must be > 0")


@lru_cache(maxsize=64)
def cluster_means(spec: SynthSpec) -> np.ndarray:
    """Cluster mean matrix of shape (num_classes, embedding_dim).

    Row 0 (negative class) is the origin; row k > 0 is the k-th positive
    subtype mean at distance ``cluster_separation`` from the origin.
    """
    k, c = spec.num_classes, spec.embedding_dim
    frame = np.zeros((k, c))
    frame[1:, 1:k] = np.eye(k - 1)
    if spec.rotate:
        rng = np.random.default_rng(derive_seed(spec.seed, 0xF0A))
        q, r = np.linalg.qr(rng.standard_normal((c, c)))
        q *= np.sign(np.diag(r))  # fix the sign convention so Q is unique
        frame = frame @ q.T
    means = spec.cluster_separation * frame
    means.setflags(write=False)
    return means


def positive_count(spec: SynthSpec, n: int) -> int:
    """Number of subtype instances in a positive bag of n instances."""
    return max(1, int(round(spec.positive_fraction * n)))


def generate_bag(spec: SynthSpec, label: int, seed: int, bag_id: str | None = None) -> Bag:
    """Draw one bag; identical (spec, label, seed) gives a bit-identical bag."""
    if not 0 <= label < spec.num_classes:
        raise DomainError(f"label {label} out of range for {spec.num_classes} classes")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(spec.instances_min, spec.instances_max + 1))
    assignment = np.zeros(n, dtype=np.intp)
    if label > 0:
        assignment[: positive_count(spec, n)] = label
    assignment = assignment[rng.permutation(n)]
    means = cluster_means(spec)
    instances = means[assignment] + spec.noise_std * rng.standard_normal((n, spec.embedding_dim))
    return Bag(
        instances=instances.astype(np.float32),
        label=label,
        bag_id=bag_id if bag_id is not None else f"bag-{seed:016x}",
    )


def generate_dataset(spec: SynthSpec, bags_per_class: int, seed_offset: int = 0,
                     id_prefix: str = "bag") -> tuple[DatasetManifest, list[Bag]]:
    """Balanced dataset of (num_classes * bags_per_class) bags.

    Per-bag seeds are derived from the spec seed and the bag index by a
    splitmix step, so bags are independent and the whole dataset is
    reproducible from the spec alone.  ``seed_offset`` shifts the index
    stream, which is how a held-out split is drawn from the same
    distribution (same cluster frame) without overlapping the training
    draws.
    """
    if bags_per_class < 1:
        raise ConfigError("bags_per_class must be >= 1")
    bags: list[Bag] = []
    entries: list[ManifestEntry] = []
    index = 0
    for label in range(spec.num_classes):
        for _ in range(bags_per_class):
            bag_id = f"{id_prefix}{index:05d}"
            bag = generate_bag(spec, label, derive_seed(spec.seed, seed_offset + index),
                               bag_id=bag_id)
            bags.append(bag)
            entries.append(ManifestEntry(bag_id=bag_id, path=f"bags/{bag_id}.mexb", label=label))
            index += 1
    manifest = DatasetManifest(
        entries=entries,
        class_count=spec.num_classes,
        embedding_dim=spec.embedding_dim,
        meta={"seed": spec.seed, "bags_per_class": bags_per_class},
    )
    return manifest, bags


def nearest_cluster(bag_instances: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Index of the nearest cluster mean for every instance."""
    means = cluster_means(spec)
    x = np.asarray(bag_instances, dtype=np.float64)
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def oracle_label(bag: Bag, spec: SynthSpec) -> int:
    """Ground-truth label by nearest-mean assignment.

    Returns the subtype of the positive-assigned instance closest to its
    cluster mean, or 0 when no instance is assigned to a positive cluster.
    Reliable when ``cluster_separation >= 6 * noise_std``.
    """
    means = cluster_means(spec)
    x = np.asarray(bag.instances, dtype=np.float64)
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    assigned = d2.argmin(axis=1)
    positive = np.flatnonzero(assigned > 0)
    if positive.size == 0:
        return 0
    best = positive[np.argmin(d2[positive, assigned[positive]])]
    return int(assigned[best])
