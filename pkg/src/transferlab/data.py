"""Seeded synthetic identity galleries and dataset plumbing.

Identities are smooth low-frequency images: each identity owns a prototype
built from the 8 lowest non-constant 2-D cosine basis functions with
identity-specific coefficients, and its samples are the prototype plus
seeded Gaussian pixel noise and a uniform brightness offset. Interpolations
between identities therefore stay smooth images. Pixel values are kept
strictly inside (-1, 1) and rounded through float32 so in-memory data and
serialized data agree bit for bit.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .binio import Reader, TruncatedFileError, write_f32_array, write_magic, write_u32

DATASET_MAGIC = b"EXDS"
DATASET_VERSION = 1

NOISE_SIGMA = 0.05
BRIGHTNESS_RANGE = 0.1
PIXEL_CLAMP = 0.999
NUM_BASIS = 8
PROTO_PEAK = 0.8

# Identities used as attack subjects/victims need this many images.
MIN_POI_SAMPLES = 20


class InsufficientIdentitiesError(ValueError):
    pass


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class LevelSpec:
    name: str
    num_identities: int
    images_per_identity: int

    @property
    def total_images(self) -> int:
        return self.num_identities * self.images_per_identity


# Desk-scale ladder: identity counts step by 4x, mirroring order-of-magnitude
# jumps in training-set size at laptop cost.
LEVELS = {
    "D1": LevelSpec("D1", 40, 20),
    "D2": LevelSpec("D2", 160, 20),
    "D3": LevelSpec("D3", 640, 20),
    "D4": LevelSpec("D4", 1280, 20),
}


@dataclass
class Sample:
    image: np.ndarray
    identity: int


class Dataset:
    """Immutable gallery of flat images with identity labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray,
                 num_identities: int, seed: int = 0, level_tag: str | None = None):
        self.images = np.asarray(images, dtype=float)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_identities = int(num_identities)
        self.seed = seed
        self.level_tag = level_tag
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be (n, dim) aligned with labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= num_identities):
            raise ValueError("identity labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]))

    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    def indices_of(self, identity: int) -> np.ndarray:
        return np.nonzero(self.labels == identity)[0]

    def subset(self, indices: np.ndarray, level_tag: str | None = None) -> "Dataset":
        return Dataset(self.images[indices].copy(), self.labels[indices].copy(),
                       self.num_identities, seed=self.seed,
                       level_tag=level_tag or self.level_tag)


def cosine_basis(image_side: int, num_basis: int = NUM_BASIS) -> np.ndarray:
    """Lowest non-constant 2-D cosine basis functions, flattened to rows.

    The DC term is skipped so the brightness-offset nuisance stays orthogonal
    to identity information.
    """
    freqs = sorted(
        ((p, q) for p in range(image_side) for q in range(image_side)
         if (p, q) != (0, 0)),
        key=lambda pq: (pq[0] + pq[1], pq[0], pq[1]),
    )[:num_basis]
    grid = (np.arange(image_side) + 0.5) / image_side
    rows = []
    for p, q in freqs:
        rows.append(np.outer(np.cos(np.pi * p * grid), np.cos(np.pi * q * grid)).ravel())
    return np.stack(rows)


def _round_f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def gen_synthetic(seed: int, num_identities: int, per_identity: int,
                  image_side: int, level_tag: str | None = None,
                  num_basis: int = NUM_BASIS,
                  proto_peak: float = PROTO_PEAK) -> Dataset:
    """Deterministic synthetic gallery.

    Per identity: a prototype from identity-specific basis coefficients,
    peak-normalized to +-proto_peak; each sample adds N(0, 0.05^2) pixel
    noise and a uniform brightness offset in [-0.1, 0.1], clamped to +-0.999.
    """
    if image_side < 4:
        raise ValueError("image_side must be >= 4")
    rng = np.random.default_rng(seed)
    basis = cosine_basis(image_side, num_basis)
    dim = image_side * image_side
    images = np.empty((num_identities * per_identity, dim))
    labels = np.repeat(np.arange(num_identities), per_identity)
    for ident in range(num_identities):
        coeffs = rng.uniform(-1.0, 1.0, size=basis.shape[0])
        raw = coeffs @ basis
        proto = proto_peak * raw / max(np.abs(raw).max(), 1e-12)
        noise = rng.normal(0.0, NOISE_SIGMA, size=(per_identity, dim))
        brightness = rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE, size=(per_identity, 1))
        block = np.clip(proto + noise + brightness, -PIXEL_CLAMP, PIXEL_CLAMP)
        images[ident * per_identity : (ident + 1) * per_identity] = block
    return Dataset(_round_f32(images), labels, num_identities,
                   seed=seed, level_tag=level_tag)


def gen_level(seed: int, level: str | LevelSpec, image_side: int = 12) -> Dataset:
    spec = LEVELS[level] if isinstance(level, str) else level
    return gen_synthetic(seed, spec.num_identities, spec.images_per_identity,
                         image_side, level_tag=spec.name)


# -- splitting ---------------------------------------------------------------

def split_counts(dataset: Dataset, counts: list[int],
                 poi_ids: set[int] | None = None) -> list[Dataset]:
    """Carve parts with the given non-PoI identity counts.

    Identity sets are pairwise disjoint except the PoIs, which appear (with
    all their samples) in every part. Assignment is deterministic: non-PoI
    identities in sorted order, consumed sequentially.
    """
    poi_ids = set(poi_ids or ())
    pool = [i for i in sorted(np.unique(dataset.labels).tolist()) if i not in poi_ids]
    if any(c < 1 for c in counts):
        raise InsufficientIdentitiesError("every part needs at least one identity")
    if sum(counts) > len(pool):
        raise InsufficientIdentitiesError(
            f"need {sum(counts)} non-PoI identities, dataset has {len(pool)}"
        )
    parts = []
    cursor = 0
    for c in counts:
        ids = set(pool[cursor : cursor + c]) | poi_ids
        cursor += c
        mask = np.isin(dataset.labels, sorted(ids))
        parts.append(dataset.subset(np.nonzero(mask)[0]))
    return parts


def split_disjoint(dataset: Dataset, k_substitutes: int, target_fraction: float,
                   poi_ids: set[int] | None = None) -> tuple[Dataset, list[Dataset]]:
    """Target set plus k substitute sets with disjoint identities (PoIs shared)."""
    poi_ids = set(poi_ids or ())
    n_pool = len([i for i in np.unique(dataset.labels) if i not in poi_ids])
    n_target = int(round(target_fraction * n_pool))
    remaining = n_pool - n_target
    base = remaining // k_substitutes
    counts = [n_target] + [base + (1 if i < remaining % k_substitutes else 0)
                           for i in range(k_substitutes)]
    parts = split_counts(dataset, counts, poi_ids)
    return parts[0], parts[1:]


def relabel_for_training(dataset: Dataset) -> tuple[Dataset, dict[int, int]]:
    """Map the global identities present to a dense local label space.

    Returns the relabeled dataset and the global-to-local mapping (sorted
    global id order, so the mapping is deterministic).
    """
    ids = sorted(np.unique(dataset.labels).tolist())
    mapping = {g: i for i, g in enumerate(ids)}
    local = np.array([mapping[g] for g in dataset.labels.tolist()], dtype=np.int64)
    out = Dataset(dataset.images.copy(), local, len(ids),
                  seed=dataset.seed, level_tag=dataset.level_tag)
    return out, mapping


# -- serialization -----------------------------------------------------------
#
# magic "EXDS", version u32, n_samples u32, dim u32, n_ids u32, then per
# sample: id u32 LE + dim x f32 LE.

def write_dataset(buf, dataset: Dataset) -> None:
    write_magic(buf, DATASET_MAGIC)
    write_u32(buf, DATASET_VERSION)
    write_u32(buf, len(dataset))
    write_u32(buf, dataset.dim)
    write_u32(buf, dataset.num_identities)
    for i in range(len(dataset)):
        write_u32(buf, int(dataset.labels[i]))
        write_f32_array(buf, dataset.images[i])


def save_dataset(dataset: Dataset, path) -> None:
    buf = io.BytesIO()
    write_dataset(buf, dataset)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    return read_dataset(r)


def read_dataset(r: Reader) -> Dataset:
    r.expect_magic(DATASET_MAGIC)
    r.expect_version(DATASET_VERSION)
    n = r.u32()
    dim = r.u32()
    n_ids = r.u32()
    if r.remaining() < n * (4 + 4 * dim):
        raise TruncatedFileError(
            f"{n} samples of dim {dim} declared but only {r.remaining()} bytes remain"
        )
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, dim))
    for i in range(n):
        labels[i] = r.u32()
        images[i] = r.f32_array(dim).astype(float)
    return Dataset(images, labels, n_ids)


# -- attack sets --------------------------------------------------------------

@dataclass
class AttackInstance:
    mode: str                      # "dodge" | "impersonate"
    subject_id: int
    x_subject: np.ndarray
    victim_id: int | None = None
    x_victim: np.ndarray | None = None


def pick_attack_sets(dataset: Dataset, mode: str, count: int, seed: int,
                     subjects: list[int], victims: list[int] | None = None,
                     min_samples: int = MIN_POI_SAMPLES) -> list[AttackInstance]:
    """Seeded selection of attack instances around the PoI identities.

    Dodge mode cycles over the subjects and samples one of their images per
    instance. Impersonate mode pairs subjects[i] with victims[i] and samples
    an image for each endpoint; subject == victim is rejected.
    """
    rng = np.random.default_rng(seed)
    for ident in set(subjects) | set(victims or ()):
        n_have = len(dataset.indices_of(ident))
        if n_have < min_samples:
            raise InsufficientSamplesError(
                f"identity {ident} has {n_have} samples, needs {min_samples}"
            )
    instances = []
    if mode == "dodge":
        for i in range(count):
            o = subjects[i % len(subjects)]
            idx = rng.choice(dataset.indices_of(o))
            instances.append(AttackInstance("dodge", int(o), dataset.images[idx]))
    elif mode == "impersonate":
        if victims is None or len(victims) != len(subjects):
            raise ValueError("impersonation needs one victim per subject")
        if any(o == t for o, t in zip(subjects, victims)):
            raise ValueError("subject and victim must differ")
        for i in range(count):
            o = subjects[i % len(subjects)]
            t = victims[i % len(subjects)]
            oi = rng.choice(dataset.indices_of(o))
            ti = rng.choice(dataset.indices_of(t))
            instances.append(AttackInstance("impersonate", int(o), dataset.images[oi],
                                            int(t), dataset.images[ti]))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return instances
