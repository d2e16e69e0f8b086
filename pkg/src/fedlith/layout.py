"""Synthetic layout clips, block-DCT feature tensors, non-IID partitioning.

Clips are 96x96 binary rasters containing parallel metal bars. Each pattern
family fixes an orientation, a linewidth and a printability threshold; the
critical motif is a bar pair whose spacing is below (hotspot) or safely above
(non-hotspot) the family threshold. Families sharing an orientation but
differing in threshold create genuinely conflicting label rules, which is the
lever that makes client data heterogeneous.

Feature extraction follows the JPEG recipe: split the raster into a GxG grid
of blocks, 2-D orthonormal DCT per block, keep the first C coefficients in
zigzag order as channels.
"""

from dataclasses import dataclass
from functools import lru_cache
import hashlib
import json
import os
import warnings

import numpy as np

from fedlith.errors import ConfigurationError, DataIOError

CLIP_SIZE = 96
GRID = 12
CHANNELS = 32

HOTSPOT = 1
NON_HOTSPOT = 0


@dataclass(frozen=True)
class FamilySpec:
    orientation: str     # 'h' bars run horizontally, 'v' vertically
    linewidth: int
    threshold: int       # spacing below this prints badly
    gap_hot: tuple       # inclusive sampling range for hotspot gaps
    gap_safe: tuple      # inclusive sampling range for safe gaps


# Families 0/2 and 1/3 share orientation but disagree on the threshold, so a
# single shared decision rule cannot be right for both (spacing 8..11 is safe
# for families 0/1 but a hotspot for 2/3).
FAMILIES = (
    FamilySpec("h", 5, 6, (2, 5), (8, 14)),
    FamilySpec("v", 5, 6, (2, 5), (8, 14)),
    FamilySpec("h", 3, 12, (4, 11), (14, 20)),
    FamilySpec("v", 3, 12, (4, 11), (14, 20)),
)


@dataclass
class LayoutClip:
    raster: np.ndarray   # (H, W) uint8 in {0, 1}
    label: int
    family: int


def clip_rng(seed: int, family: int, label: int, index: int) -> np.random.Generator:
    """Counter-based per-sample stream; independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence((seed, family, label, index)))


def _draw_bar(raster, orient, start, lw, lo, hi):
    if orient == "h":
        raster[start:start + lw, lo:hi] = 1
    else:
        raster[lo:hi, start:start + lw] = 1


def gen_clip(family: int, label: int, rng: np.random.Generator,
             size: int = CLIP_SIZE) -> LayoutClip:
    """One synthetic clip. Hotspots carry a sub-threshold bar pair."""
    if not 0 <= family < len(FAMILIES):
        raise ConfigurationError(f"unknown family id {family}")
    spec = FAMILIES[family]
    raster = np.zeros((size, size), dtype=np.uint8)
    lw = spec.linewidth
    gl, gh = spec.gap_hot if label == HOTSPOT else spec.gap_safe
    gap = int(rng.integers(gl, gh + 1))

    # critical pair, centered with jitter; extent jitter varies the spectrum
    span = 2 * lw + gap
    c0 = (size - span) // 2 + int(rng.integers(-4, 5))
    lo = int(rng.integers(6, 15))
    hi = size - int(rng.integers(6, 15))
    _draw_bar(raster, spec.orientation, c0, lw, lo, hi)
    _draw_bar(raster, spec.orientation, c0 + lw + gap, lw, lo, hi)

    # background texture far from the motif: at most one bar per outer slot,
    # slots keep >= 15px clearance so no accidental sub-threshold spacing
    for slot_lo, slot_hi in ((4, 14), (size - 16, size - 6)):
        if rng.random() < 0.75:
            start = int(rng.integers(slot_lo, slot_hi - lw + 1))
            blo = int(rng.integers(4, 20))
            bhi = size - int(rng.integers(4, 20))
            _draw_bar(raster, spec.orientation, start, lw, blo, bhi)
    return LayoutClip(raster, label, family)


def measure_min_spacing(raster: np.ndarray, orientation: str) -> int:
    """Smallest empty gap between bar runs along the packing axis."""
    occ = raster.any(axis=1) if orientation == "h" else raster.any(axis=0)
    idx = np.flatnonzero(occ)
    if idx.size == 0:
        return len(occ)
    steps = np.diff(idx)
    gaps = steps[steps > 1] - 1
    return int(gaps.min()) if gaps.size else len(occ)


@lru_cache(maxsize=8)
def _dct_matrix(b: int) -> np.ndarray:
    x = np.arange(b)
    u = np.arange(b)[:, None]
    t = np.cos(np.pi * (2 * x + 1) * u / (2 * b))
    t *= np.sqrt(2.0 / b)
    t[0] /= np.sqrt(2.0)
    return t


def dct2(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II."""
    block = np.asarray(block, dtype=np.float64)
    b = block.shape[0]
    t = _dct_matrix(b)
    return t @ block @ t.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    t = _dct_matrix(coeffs.shape[0])
    return t.T @ coeffs @ t


@lru_cache(maxsize=8)
def zigzag_order(b: int):
    """JPEG zigzag traversal of a b*b block, as (rank -> (i, j)) tuples."""
    out = []
    for s in range(2 * b - 1):
        rng_ = range(min(s, b - 1), max(0, s - b + 1) - 1, -1) if s % 2 == 0 \
            else range(max(0, s - b + 1), min(s, b - 1) + 1)
        for i in rng_:
            out.append((i, s - i))
    return tuple(out)


def extract_features(clip, grid: int = GRID, channels: int = CHANNELS) -> np.ndarray:
    """(grid, grid, channels) tensor of per-block zigzag DCT coefficients."""
    raster = clip.raster if isinstance(clip, LayoutClip) else clip
    h, w = raster.shape
    if h % grid or w % grid:
        raise ConfigurationError(f"raster {h}x{w} not divisible by grid {grid}")
    bh, bw = h // grid, w // grid
    if bh != bw:
        raise ConfigurationError("blocks must be square")
    if channels > bh * bw:
        raise ConfigurationError(f"channels {channels} exceeds block pixels {bh * bw}")
    t = _dct_matrix(bh)
    blocks = raster.reshape(grid, bh, grid, bw).transpose(0, 2, 1, 3).astype(np.float64)
    coeffs = np.einsum("ux,gbxy,vy->gbuv", t, blocks, t, optimize=True)
    zz = zigzag_order(bh)[:channels]
    rows = np.array([ij[0] for ij in zz])
    cols = np.array([ij[1] for ij in zz])
    return np.ascontiguousarray(coeffs[:, :, rows, cols])


@dataclass
class Dataset:
    """Feature tensors plus labels/families; rasters kept for persistence."""

    features: np.ndarray   # (n, G, G, C)
    labels: np.ndarray     # (n,) int64, 1 = hotspot
    families: np.ndarray   # (n,) int64
    rasters: np.ndarray    # (n, H, W) uint8, may be empty when loaded lazily
    meta: dict

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dataset_id(self) -> str:
        return self.meta["dataset_id"]


@dataclass
class Shard:
    """One client's slice of a dataset."""

    client_id: int
    indices: np.ndarray

    @property
    def n(self) -> int:
        return int(self.indices.size)


def _largest_remainder(total: int, weights: np.ndarray, offset: int = 0) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights`, exact sum.

    `offset` rotates the tie-break among equal remainders so that repeated
    allocations over strata spread the extras instead of piling them on the
    first entry.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    rem = total - base.sum()
    if rem > 0:
        rot = np.roll(np.arange(w.size), -offset)
        order = rot[np.argsort(-(quota - base)[rot], kind="stable")]
        base[order[:rem]] += 1
    return base


def generate_dataset(n_hotspot: int, n_nonhotspot: int, seed: int,
                     n_families: int = 4, grid: int = GRID,
                     channels: int = CHANNELS, size: int = CLIP_SIZE) -> Dataset:
    """Deterministic synthetic corpus; per-clip counter-based rng streams."""
    if not 1 <= n_families <= len(FAMILIES):
        raise ConfigurationError(f"n_families must be in [1, {len(FAMILIES)}]")
    counts = {
        HOTSPOT: _largest_remainder(n_hotspot, np.ones(n_families)),
        NON_HOTSPOT: _largest_remainder(n_nonhotspot, np.ones(n_families)),
    }
    rasters, labels, families = [], [], []
    for fam in range(n_families):
        for label in (HOTSPOT, NON_HOTSPOT):
            for idx in range(int(counts[label][fam])):
                rng = clip_rng(seed, fam, label, idx)
                clip = gen_clip(fam, label, rng, size=size)
                rasters.append(clip.raster)
                labels.append(label)
                families.append(fam)
    rasters = np.stack(rasters)
    labels = np.asarray(labels, dtype=np.int64)
    families = np.asarray(families, dtype=np.int64)
    feats = np.stack([extract_features(r, grid, channels) for r in rasters])
    meta = {
        "n": int(len(labels)),
        "height": size,
        "width": size,
        "grid": grid,
        "channels": channels,
        "n_families": n_families,
        "seed": seed,
        "label_counts": {
            "hotspot": int((labels == HOTSPOT).sum()),
            "non_hotspot": int((labels == NON_HOTSPOT).sum()),
        },
    }
    meta["dataset_id"] = _dataset_id(meta)
    return Dataset(feats, labels, families, rasters, meta)


def _dataset_id(meta: dict) -> str:
    key = {k: meta[k] for k in ("n", "height", "width", "grid", "channels",
                                "n_families", "seed", "label_counts")}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def save_dataset(ds: Dataset, path: str) -> None:
    """manifest.json + packed-bit rasters + flat little-endian feature cache."""
    try:
        os.makedirs(path, exist_ok=True)
        manifest = dict(ds.meta)
        manifest["labels"] = ds.labels.tolist()
        manifest["families"] = ds.families.tolist()
        with open(os.path.join(path, "manifest.json"), "w") as f:
            json.dump(manifest, f, sort_keys=True, indent=1)
        with open(os.path.join(path, "rasters.bin"), "wb") as f:
            f.write(np.packbits(ds.rasters).tobytes())
        feats = np.ascontiguousarray(ds.features, dtype="<f8")
        with open(os.path.join(path, "features.bin"), "wb") as f:
            f.write(feats.tobytes())
        with open(os.path.join(path, "features.json"), "w") as f:
            json.dump({"shape": list(feats.shape), "dtype": "<f8", "order": "C"},
                      f, sort_keys=True)
    except OSError as e:
        raise DataIOError(f"cannot write dataset to {path}: {e}") from e


def load_dataset(path: str) -> Dataset:
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        labels = np.asarray(manifest.pop("labels"), dtype=np.int64)
        families = np.asarray(manifest.pop("families"), dtype=np.int64)
        n, h, w = manifest["n"], manifest["height"], manifest["width"]
        with open(os.path.join(path, "rasters.bin"), "rb") as f:
            bits = np.frombuffer(f.read(), dtype=np.uint8)
        rasters = np.unpackbits(bits, count=n * h * w).reshape(n, h, w)
        with open(os.path.join(path, "features.json")) as f:
            fmeta = json.load(f)
        with open(os.path.join(path, "features.bin"), "rb") as f:
            feats = np.frombuffer(f.read(), dtype=fmeta["dtype"]).reshape(fmeta["shape"])
    except OSError as e:
        raise DataIOError(f"cannot read dataset from {path}: {e}") from e
    return Dataset(np.ascontiguousarray(feats), labels, families, rasters, manifest)


def partition_noniid(ds: Dataset, n_clients: int, skew: float,
                     rng: np.random.Generator):
    """Split a dataset into per-client shards with controllable family skew.

    skew=0 is a uniform random split; skew=1 gives each client a single
    dominant family (>= 90% of the shard); in between, family proportions
    interpolate linearly. Shards are disjoint, exhaustive and label-stratified
    within each family.
    """
    n = len(ds)
    if n_clients < 1:
        raise ConfigurationError("n_clients must be >= 1")
    if n_clients > n:
        raise ConfigurationError(f"cannot split {n} samples across {n_clients} clients")
    if not 0.0 <= skew <= 1.0:
        raise ConfigurationError("skew must be in [0, 1]")
    fams = np.unique(ds.families)
    n_fam = fams.size
    if n_fam == 1 and skew > 0:
        warnings.warn("single pattern family: heterogeneity unachievable", stacklevel=2)
    fam_counts = np.array([(ds.families == f).sum() for f in fams], dtype=np.float64)
    p_global = fam_counts / n

    dominant = 0.94
    targets = np.empty((n_clients, n_fam))
    for k in range(n_clients):
        d = np.full(n_fam, (1.0 - dominant) / max(n_fam - 1, 1))
        d[k % n_fam] = dominant if n_fam > 1 else 1.0
        targets[k] = (1.0 - skew) * p_global + skew * d
    # per-client demand, reconciled against per-family supply
    share = _largest_remainder(n, np.ones(n_clients)).astype(np.float64)
    demand = targets * share[:, None]
    alloc = np.zeros((n_clients, n_fam), dtype=np.int64)
    for j, f in enumerate(fams):
        alloc[:, j] = _largest_remainder(int(fam_counts[j]), demand[:, j], offset=j)

    per_client = [[] for _ in range(n_clients)]
    for j, f in enumerate(fams):
        fam_idx = np.flatnonzero(ds.families == f)
        labels_f = ds.labels[fam_idx]
        for label in (HOTSPOT, NON_HOTSPOT):
            pool = fam_idx[labels_f == label]
            if pool.size == 0:
                continue
            pool = rng.permutation(pool)
            lab_alloc = _largest_remainder(pool.size, alloc[:, j].astype(np.float64),
                                           offset=2 * j + label)
            pos = 0
            for k in range(n_clients):
                take = int(lab_alloc[k])
                per_client[k].extend(pool[pos:pos + take].tolist())
                pos += take
    # guarantee nonempty shards
    sizes = np.array([len(c) for c in per_client])
    for k in np.flatnonzero(sizes == 0):
        donor = int(np.argmax([len(c) for c in per_client]))
        per_client[k].append(per_client[donor].pop())
    shards = [Shard(k, np.sort(np.asarray(c, dtype=np.int64)))
              for k, c in enumerate(per_client)]
    assert sum(s.n for s in shards) == n
    return shards
