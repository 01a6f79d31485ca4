"""Subject-oriented interpolation augmentation.

Around a subject-victim identity pair (o, t) -- with t == o meaning a dodge
-- the augmenter builds tuples (x_a, x^(lam), x_b) by blending random image
pairs. Three balance rules hold: total synthesized count tracks the original
dataset size, every selected pair yields exactly m tuples, and lam is drawn
i.i.d. uniform on [0, 1). The blend convention is
x^(lam) = (1 - lam) * x_a + lam * x_b, so lam equals the normalized L2
distance from x_a.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .binio import Reader, write_f64, write_u32
from .data import Dataset, read_dataset, write_dataset


@dataclass(frozen=True)
class PoiPair:
    o: int
    t: int

    @property
    def dodging(self) -> bool:
        return self.o == self.t


@dataclass
class AugTuple:
    x_a: np.ndarray
    x_b: np.ndarray
    lam: float
    x_interp: np.ndarray
    a: int
    b: int
    idx_a: int
    idx_b: int


@dataclass
class AugmentedDataset:
    originals: Dataset
    poi: PoiPair
    tuples: list[AugTuple]
    m: int


def interpolate(x_a: np.ndarray, x_b: np.ndarray, lam: float) -> np.ndarray:
    """Blend two images: (1 - lam) * x_a + lam * x_b."""
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    if x_a.shape != x_b.shape:
        raise ValueError(f"shape mismatch {x_a.shape} vs {x_b.shape}")
    return (1.0 - lam) * x_a + lam * x_b


def augment_dataset(dataset: Dataset, poi: PoiPair, m: int = 10, seed: int = 0,
                    swap_orientation: bool = False,
                    total_tuples: int | None = None) -> AugmentedDataset:
    """Build the interpolation tuple set around a PoI pair.

    With D the original dataset: n = |D| / m pairs are drawn from
    subject-images x victim-images (zero when dodging), the remaining
    |D| - n pairs from (subject+victim images) x (everything else); every
    pair yields m tuples with fresh uniform lam. total_tuples overrides the
    |D|-pairs default while keeping the same A-x-B fraction.
    swap_orientation stores each tuple with the endpoint roles exchanged
    (equivalent to reading lam as the distance from the second endpoint).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    a_idx = dataset.indices_of(poi.o)
    b_idx = dataset.indices_of(poi.t)
    if len(a_idx) == 0 or len(b_idx) == 0:
        raise ValueError("PoI identity has no samples in the dataset")
    ab_mask = (dataset.labels == poi.o) | (dataset.labels == poi.t)
    ab_idx = np.nonzero(ab_mask)[0]
    c_idx = np.nonzero(~ab_mask)[0]
    if len(c_idx) == 0:
        raise ValueError("no non-PoI samples to interpolate against")

    n_pairs = len(dataset) if total_tuples is None else max(1, total_tuples // m)
    n_cross = 0 if poi.dodging else n_pairs // m

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_cross):
        pairs.append((int(rng.choice(a_idx)), int(rng.choice(b_idx))))
    for _ in range(n_pairs - n_cross):
        pairs.append((int(rng.choice(ab_idx)), int(rng.choice(c_idx))))

    tuples = []
    for ia, ib in pairs:
        if swap_orientation:
            ia, ib = ib, ia
        for lam in rng.uniform(0.0, 1.0, size=m):
            x_a = dataset.images[ia]
            x_b = dataset.images[ib]
            tuples.append(AugTuple(
                x_a=x_a, x_b=x_b, lam=float(lam),
                x_interp=interpolate(x_a, x_b, float(lam)),
                a=int(dataset.labels[ia]), b=int(dataset.labels[ib]),
                idx_a=ia, idx_b=ib,
            ))
    return AugmentedDataset(dataset, poi, tuples, m)


# -- serialization: dataset block followed by the tuple table ----------------
#
# After the EXDS payload: subject u32, victim u32, m u32, n_tuples u32,
# then per tuple idx_a u32, idx_b u32, lam f64 LE.

def save_augmented(aug: AugmentedDataset, path) -> None:
    buf = io.BytesIO()
    write_dataset(buf, aug.originals)
    write_u32(buf, aug.poi.o)
    write_u32(buf, aug.poi.t)
    write_u32(buf, aug.m)
    write_u32(buf, len(aug.tuples))
    for t in aug.tuples:
        write_u32(buf, t.idx_a)
        write_u32(buf, t.idx_b)
        write_f64(buf, t.lam)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_augmented(path) -> AugmentedDataset:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    dataset = read_dataset(r)
    poi = PoiPair(r.u32(), r.u32())
    m = r.u32()
    n = r.u32()
    tuples = []
    for _ in range(n):
        ia = r.u32()
        ib = r.u32()
        lam = r.f64()
        x_a = dataset.images[ia]
        x_b = dataset.images[ib]
        tuples.append(AugTuple(
            x_a=x_a, x_b=x_b, lam=lam,
            x_interp=interpolate(x_a, x_b, lam),
            a=int(dataset.labels[ia]), b=int(dataset.labels[ib]),
            idx_a=ia, idx_b=ib,
        ))
    return AugmentedDataset(dataset, poi, tuples, m)
