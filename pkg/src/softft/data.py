"""Synthetic domains with controllable transform ranges.

Two generators are provided:

* ``shapes16`` renders one of 32 fixed 16x16 binary prototypes per class under
  a random rotation / translation / scale, adds Gaussian pixel noise and clips
  to [0, 1].
* ``gauss`` draws vectors around fixed class means and applies the same
  transform parameters (rotation acts on consecutive coordinate pairs).

Every sample has its own counter-derived random stream, so generation is a
pure function of the :class:`DatasetSpec`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, FormatError, RangeError, TruncatedFileError
from .seeding import rng_for

SIDE = 16
NUM_PROTOTYPES = 32
TRANSFORM_FIELDS = ("rotation", "translation", "scale", "noise")
DOMAINS = ("source", "target", "target2")
MODES = ("shapes16", "gauss")
DATA_MAGIC = b"SFTDATA1"


# --- prototypes --------------------------------------------------------------

def _rect(r0, c0, r1, c1):
    return ("rect", r0, c0, r1, c1)


def _line(r0, c0, r1, c1, width=2.0):
    return ("line", r0, c0, r1, c1, width)


def _disk(r, c, rad):
    return ("disk", r, c, rad)


def _ring(r, c, outer, inner):
    return ("ring", r, c, outer, inner)


def _poly(*pts):
    return ("poly", pts)


def _cut(prim):
    return ("cut", prim)


# bars, crosses, blobs, corners and letter-like strokes; all fit in rows/cols 2..13
_PROTOTYPE_SHAPES = [
    [_rect(7, 2, 8, 13)],  # 0 horizontal bar
    [_rect(2, 7, 13, 8)],  # 1 vertical bar
    [_line(3, 3, 12, 12)],  # 2 diagonal
    [_line(3, 12, 12, 3)],  # 3 anti-diagonal
    [_rect(7, 2, 8, 13), _rect(2, 7, 13, 8)],  # 4 plus
    [_line(3, 3, 12, 12), _line(3, 12, 12, 3)],  # 5 X
    [_rect(3, 3, 12, 4), _rect(11, 3, 12, 12)],  # 6 L
    [_rect(3, 11, 12, 12), _rect(11, 3, 12, 12)],  # 7 mirrored L
    [_rect(3, 3, 4, 12), _rect(3, 7, 12, 8)],  # 8 T
    [_rect(11, 3, 12, 12), _rect(3, 7, 12, 8)],  # 9 inverted T
    [_disk(7.5, 7.5, 4.2)],  # 10 disk
    [_ring(7.5, 7.5, 5.6, 3.4)],  # 11 ring
    [_rect(3, 3, 12, 12), _cut(_rect(5, 5, 10, 10))],  # 12 square frame
    [_rect(5, 5, 10, 10)],  # 13 block
    [_poly((3, 7.5), (12, 2.5), (12, 12.5))],  # 14 triangle up
    [_poly((12, 7.5), (3, 2.5), (3, 12.5))],  # 15 triangle down
    [_rect(7, 2, 8, 9), _poly((3, 9), (12, 9), (7.5, 13.5))],  # 16 arrow right
    [_disk(7.5, 4, 2.2), _disk(7.5, 11, 2.2)],  # 17 two dots across
    [_disk(4, 7.5, 2.2), _disk(11, 7.5, 2.2)],  # 18 two dots down
    [_disk(3.5, 3.5, 1.8), _disk(7.5, 7.5, 1.8), _disk(11.5, 11.5, 1.8)],  # 19 dotted diagonal
    [_rect(2, 3, 13, 4), _rect(2, 3, 3, 12), _rect(7, 3, 8, 10), _rect(12, 3, 13, 12)],  # 20 E
    [_rect(2, 3, 13, 4), _rect(2, 11, 13, 12), _rect(12, 3, 13, 12)],  # 21 U
    [_rect(2, 3, 3, 12), _line(3, 12, 12, 3), _rect(12, 3, 13, 12)],  # 22 Z
    [_rect(3, 3, 7, 7), _rect(8, 8, 12, 12)],  # 23 checker pair
    [_disk(9, 7.5, 5.0), _cut(_rect(9, 0, 15, 15))],  # 24 half disk
    [_ring(7.5, 7.5, 5.6, 3.4), _cut(_rect(5, 9, 10, 15))],  # 25 C
    [_rect(2, 3, 13, 4), _rect(2, 11, 13, 12), _rect(7, 3, 8, 12)],  # 26 H
    [_disk(4.5, 4.5, 2.8), _rect(11, 3, 12, 12)],  # 27 blob over bar
    [_rect(3, 3, 5, 5), _rect(3, 10, 5, 12), _rect(10, 3, 12, 5)],  # 28 three corners
    [_poly((3, 7.5), (12, 2.5), (12, 12.5)), _cut(_poly((6.5, 7.5), (10.5, 5), (10.5, 10)))],  # 29 hollow triangle
    [_rect(6, 7, 13, 8), _poly((2, 7.5), (7, 3), (7, 12))],  # 30 arrow up
    [_rect(2, 3, 13, 4), _rect(2, 3, 3, 12), _rect(7, 3, 8, 9)],  # 31 F
]


def _rasterize(prim, rr, cc) -> np.ndarray:
    kind = prim[0]
    if kind == "rect":
        _, r0, c0, r1, c1 = prim
        return (rr >= r0) & (rr <= r1) & (cc >= c0) & (cc <= c1)
    if kind == "disk":
        _, r, c, rad = prim
        return (rr - r) ** 2 + (cc - c) ** 2 <= rad**2
    if kind == "ring":
        _, r, c, outer, inner = prim
        d2 = (rr - r) ** 2 + (cc - c) ** 2
        return (d2 <= outer**2) & (d2 >= inner**2)
    if kind == "line":
        _, r0, c0, r1, c1, width = prim
        dr, dc = r1 - r0, c1 - c0
        t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / (dr * dr + dc * dc), 0.0, 1.0)
        d2 = (rr - r0 - t * dr) ** 2 + (cc - c0 - t * dc) ** 2
        return d2 <= (width / 2.0) ** 2 + 0.25
    if kind == "poly":
        pts = prim[1]
        inside = np.zeros(rr.shape, dtype=bool)
        n = len(pts)
        for i in range(n):
            (ra, ca), (rb, cb) = pts[i], pts[(i + 1) % n]
            crosses = (ra > rr) != (rb > rr)
            with np.errstate(divide="ignore", invalid="ignore"):
                cx = ca + (rr - ra) * (cb - ca) / (rb - ra)
            inside ^= crosses & (cc < cx)
        return inside
    raise ValueError(kind)


def _build_prototypes() -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(SIDE, dtype=float), np.arange(SIDE, dtype=float), indexing="ij")
    out = np.zeros((NUM_PROTOTYPES, SIDE, SIDE))
    for k, prims in enumerate(_PROTOTYPE_SHAPES):
        mask = np.zeros((SIDE, SIDE), dtype=bool)
        for prim in prims:
            if prim[0] == "cut":
                mask &= ~_rasterize(prim[1], rr, cc)
            else:
                mask |= _rasterize(prim, rr, cc)
        out[k] = mask
    return out


PROTOTYPES = _build_prototypes()


def dump_prototypes(directory) -> list[Path]:
    """Write every prototype as a plain-text PGM (P2) image for inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, proto in enumerate(PROTOTYPES):
        rows = [" ".join(str(int(v) * 255) for v in row) for row in proto]
        path = directory / f"prototype_{k:02d}.pgm"
        path.write_text(f"P2\n{SIDE} {SIDE}\n255\n" + "\n".join(rows) + "\n", encoding="ascii")
        paths.append(path)
    return paths


# --- specs and datasets ------------------------------------------------------

class TransformParams(NamedTuple):
    rotation: float  # degrees
    dx: float
    dy: float
    scale: float
    noise_std: float


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate a dataset bit-exactly.

    ``class_offset`` selects which prototypes (or gauss class means) the
    ``num_classes`` labels map to, so held-out target shapes can be drawn
    disjoint from the source shapes.  Each transform range is ``(lo, hi)``;
    ``translation`` applies to both axes.
    """

    mode: str = "shapes16"
    num_classes: int = 10
    samples_per_class: int = 10
    rotation: tuple[float, float] = (-180.0, 180.0)
    translation: tuple[float, float] = (-1.5, 1.5)
    scale: tuple[float, float] = (0.9, 1.1)
    noise: tuple[float, float] = (0.05, 0.15)
    seed: int = 0
    domain: str = "source"
    class_offset: int = 0
    dim: int = 8

    def __post_init__(self):
        for name in TRANSFORM_FIELDS:
            lo, hi = (float(v) for v in getattr(self, name))
            object.__setattr__(self, name, (lo, hi))
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown dataset mode {self.mode!r}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.samples_per_class < 0:
            raise ConfigError("samples_per_class must be non-negative")
        if self.class_offset < 0:
            raise ConfigError("class_offset must be non-negative")
        if self.mode == "shapes16" and self.class_offset + self.num_classes > NUM_PROTOTYPES:
            raise ConfigError(
                f"classes {self.class_offset}..{self.class_offset + self.num_classes - 1} "
                f"exceed the {NUM_PROTOTYPES} available prototypes"
            )
        if self.mode == "gauss" and (self.dim < 2 or self.dim % 2):
            raise ConfigError(f"gauss dim must be even and >= 2, got {self.dim}")
        for name in TRANSFORM_FIELDS:
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"{name} range must satisfy lo <= hi, got ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ConfigError("scale range must be positive")
        if self.noise[0] < 0:
            raise ConfigError("noise range must be non-negative")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return (1, SIDE, SIDE) if self.mode == "shapes16" else (self.dim,)


class Sample(NamedTuple):
    data: np.ndarray
    label: int
    domain_tag: str
    params: TransformParams


@dataclass
class Dataset:
    spec: DatasetSpec
    data: np.ndarray  # N × sample_shape
    labels: np.ndarray  # int64, dense 0..num_classes-1
    params: np.ndarray  # N × 5, columns as TransformParams
    label_map: tuple[int, ...] = field(default=())  # dense label -> generator class index

    def __post_init__(self):
        if not self.label_map:
            self.label_map = tuple(range(self.spec.num_classes))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.data[i], int(self.labels[i]), self.spec.domain, TransformParams(*self.params[i]))

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    @property
    def domain_tag(self) -> str:
        return self.spec.domain

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def select(self, idx, label_map=None, labels=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.spec,
            self.data[idx],
            self.labels[idx] if labels is None else labels,
            self.params[idx],
            self.label_map if label_map is None else tuple(label_map),
        )

    def original_labels(self) -> np.ndarray:
        """Labels as generator class indices (undoing any category re-indexing)."""
        return np.asarray(self.label_map, dtype=np.int64)[self.labels]


def _draw_params(rng: np.random.Generator, spec: DatasetSpec) -> TransformParams:
    u = rng.random(5)

    def pick(rng_range, x):
        lo, hi = rng_range
        return lo + (hi - lo) * x

    return TransformParams(
        pick(spec.rotation, u[0]),
        pick(spec.translation, u[1]),
        pick(spec.translation, u[2]),
        pick(spec.scale, u[3]),
        pick(spec.noise, u[4]),
    )


_CENTER = (SIDE - 1) / 2.0
_GRID_R, _GRID_C = np.meshgrid(np.arange(SIDE, dtype=float), np.arange(SIDE, dtype=float), indexing="ij")


def render_shape(proto: np.ndarray, p: TransformParams, noise: np.ndarray | None = None) -> np.ndarray:
    """Rotate/scale/translate ``proto`` by inverse bilinear sampling, add noise, clip."""
    theta = math.radians(p.rotation)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yr = _GRID_R - _CENTER - p.dy
    xc = _GRID_C - _CENTER - p.dx
    # inverse rotation then inverse scale
    src_c = (cos_t * xc + sin_t * yr) / p.scale + _CENTER
    src_r = (-sin_t * xc + cos_t * yr) / p.scale + _CENTER
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    padded = np.zeros((SIDE + 2, SIDE + 2))
    padded[1:-1, 1:-1] = proto

    def at(r, c):
        inside = (r >= -1) & (r <= SIDE) & (c >= -1) & (c <= SIDE)
        return np.where(inside, padded[np.clip(r + 1, 0, SIDE + 1), np.clip(c + 1, 0, SIDE + 1)], 0.0)

    img = (
        at(r0, c0) * (1 - fr) * (1 - fc)
        + at(r0, c0 + 1) * (1 - fr) * fc
        + at(r0 + 1, c0) * fr * (1 - fc)
        + at(r0 + 1, c0 + 1) * fr * fc
    )
    if noise is not None:
        img = img + p.noise_std * noise
    return np.clip(img, 0.0, 1.0)


def gauss_class_mean(class_index: int, dim: int) -> np.ndarray:
    return 2.0 * rng_for("gauss-mean", dim, class_index).standard_normal(dim)


def _gauss_sample(mean: np.ndarray, p: TransformParams, z: np.ndarray) -> np.ndarray:
    x = mean + p.noise_std * z
    theta = math.radians(p.rotation)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    a, b = x[0::2].copy(), x[1::2].copy()
    out = np.empty_like(x)
    out[0::2] = p.scale * (cos_t * a - sin_t * b) + p.dx
    out[1::2] = p.scale * (sin_t * a + cos_t * b) + p.dy
    return out


def gen_dataset(spec: DatasetSpec) -> Dataset:
    """Generate ``samples_per_class`` samples for each class, class-major order."""
    spec.validate()
    n = spec.num_classes * spec.samples_per_class
    data = np.zeros((n, *spec.sample_shape))
    labels = np.zeros(n, dtype=np.int64)
    params = np.zeros((n, 5))
    i = 0
    for k in range(spec.num_classes):
        cls = spec.class_offset + k
        mean = gauss_class_mean(cls, spec.dim) if spec.mode == "gauss" else None
        for j in range(spec.samples_per_class):
            rng = rng_for(spec.seed, "sample", k, j)
            p = _draw_params(rng, spec)
            if spec.mode == "shapes16":
                data[i, 0] = render_shape(PROTOTYPES[cls], p, rng.standard_normal((SIDE, SIDE)))
            else:
                data[i] = _gauss_sample(mean, p, rng.standard_normal(spec.dim))
            labels[i] = k
            params[i] = p
            i += 1
    return Dataset(spec, data, labels, params)


def restrict_bias(spec: DatasetSpec, field_name: str, new_range) -> DatasetSpec:
    """Narrow one transform range; the new range must lie inside the old one."""
    if field_name not in TRANSFORM_FIELDS:
        raise ConfigError(f"unknown transform field {field_name!r}; expected one of {TRANSFORM_FIELDS}")
    lo, hi = (float(v) for v in new_range)
    old_lo, old_hi = getattr(spec, field_name)
    if lo > hi or lo < old_lo or hi > old_hi:
        raise RangeError(f"{field_name} range ({lo}, {hi}) is not inside ({old_lo}, {old_hi})")
    return replace(spec, **{field_name: (lo, hi)})


def _keep_count(fraction: float, n: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    # rounding guards against 0.1 * 30 = 3.0000000000000004
    return math.ceil(round(fraction * n, 9))


def subsample_categories(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep a seeded random subset of classes with all their samples; re-index densely."""
    keep = _keep_count(fraction, ds.num_classes)
    if keep < 2:
        raise ConfigError(f"keeping {keep} of {ds.num_classes} classes leaves fewer than 2")
    chosen = np.sort(rng_for(seed, "categories").choice(ds.num_classes, size=keep, replace=False))
    remap = np.full(ds.num_classes, -1, dtype=np.int64)
    remap[chosen] = np.arange(keep)
    idx = np.flatnonzero(remap[ds.labels] >= 0)
    return ds.select(idx, label_map=[ds.label_map[c] for c in chosen], labels=remap[ds.labels[idx]])


def subsample_images(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ``ceil(fraction * n_k)`` samples of every class.

    Each class uses its own seeded permutation and keeps a prefix of it, so a
    smaller fraction always selects a subset of a larger one.
    """
    keep_idx = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        if len(members) == 0:
            continue
        m = _keep_count(fraction, len(members))
        perm = rng_for(seed, "images", ds.label_map[k]).permutation(len(members))
        keep_idx.append(members[perm[:m]])
    idx = np.sort(np.concatenate(keep_idx)) if keep_idx else np.zeros(0, dtype=np.int64)
    return ds.select(idx)


# --- batching ----------------------------------------------------------------

class Batch(NamedTuple):
    indices: np.ndarray
    data: np.ndarray
    labels: np.ndarray


def _batch(ds: Dataset, idx: np.ndarray) -> Batch:
    return Batch(idx, ds.data[idx], ds.labels[idx])


def _epoch_order(n: int, seed: int, epoch: int, stream: str) -> np.ndarray:
    return rng_for(seed, stream, epoch).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """One seeded shuffle pass over ``ds`` in full batches (the last partial batch is dropped)."""
    if len(ds) == 0:
        raise ConfigError("cannot iterate over an empty dataset")
    if not 1 <= batch_size <= len(ds):
        raise ConfigError(f"batch size {batch_size} must lie in [1, {len(ds)}]")
    order = _epoch_order(len(ds), seed, epoch, "primary")
    for b in range(batches_per_epoch(len(ds), batch_size)):
        yield _batch(ds, order[b * batch_size : (b + 1) * batch_size])


def _source_indices(n: int, seed: int, start: int, count: int) -> np.ndarray:
    # position t of the endless stream is element t % n of shuffle number t // n
    out = np.empty(count, dtype=np.int64)
    t = start
    filled = 0
    while filled < count:
        cycle, pos = divmod(t, n)
        perm = rng_for(seed, "secondary", cycle).permutation(n)
        take = min(n - pos, count - filled)
        out[filled : filled + take] = perm[pos : pos + take]
        filled += take
        t += take
    return out


def cycled_batch(ds: Dataset, batch_size: int, seed: int, position: int) -> Batch:
    """``batch_size`` samples starting at ``position`` of the endless shuffled stream over ``ds``."""
    if len(ds) == 0:
        raise ConfigError("cannot draw from an empty dataset")
    return _batch(ds, _source_indices(len(ds), seed, position, batch_size))


def dual_batch_iter(src: Dataset, tar: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[Batch, Batch]]:
    """Paired (source, target) batches for one target-defined epoch.

    The target side is exactly ``batch_iter(tar, ...)``.  Source samples are
    read from an endless stream of seeded shuffles of ``src``; the stream
    position at the start of ``epoch`` is ``epoch * batches * batch_size``, so
    any epoch can be produced without replaying earlier ones.
    """
    if len(src) == 0 or len(tar) == 0:
        raise ConfigError("dual batching needs non-empty source and target datasets")
    per_epoch = batches_per_epoch(len(tar), batch_size) if batch_size >= 1 else 0
    start = epoch * per_epoch * batch_size
    for b, tar_batch in enumerate(batch_iter(tar, batch_size, seed, epoch)):
        yield cycled_batch(src, batch_size, seed, start + b * batch_size), tar_batch


# --- file format -------------------------------------------------------------
#
# magic "SFTDATA1"
# spec block:  u8 mode | u8 domain | u32 num_classes | u32 samples_per_class
#              | u32 class_offset | u32 dim | 8 x f64 ranges | u64 seed
#              | u32 label_map length L | L x u32 label_map
#              | u32 sample rank R | R x u32 sample dims | u64 sample count N
# samples:     u32 label | u8 domain | 5 x f64 params | prod(dims) x f64 data

_SPEC_HEAD = struct.Struct("<BBIIII8dQ")


def dataset_file_size(ds: Dataset) -> int:
    rank = len(ds.spec.sample_shape)
    numel = int(np.prod(ds.spec.sample_shape))
    header = 8 + _SPEC_HEAD.size + 4 + 4 * ds.num_classes + 4 + 4 * rank + 8
    return header + len(ds) * (4 + 1 + 8 * 5 + 8 * numel)


def write_dataset(ds: Dataset, path) -> None:
    s = ds.spec
    shape = s.sample_shape
    parts = [
        DATA_MAGIC,
        _SPEC_HEAD.pack(
            MODES.index(s.mode),
            DOMAINS.index(s.domain),
            s.num_classes,
            s.samples_per_class,
            s.class_offset,
            s.dim,
            *s.rotation,
            *s.translation,
            *s.scale,
            *s.noise,
            s.seed,
        ),
        struct.pack(f"<I{ds.num_classes}I", ds.num_classes, *ds.label_map),
        struct.pack(f"<I{len(shape)}I", len(shape), *shape),
        struct.pack("<Q", len(ds)),
    ]
    tag = DOMAINS.index(s.domain)
    flat = ds.data.reshape(len(ds), int(np.prod(shape))).astype("<f8")
    prm = ds.params.astype("<f8")
    for i in range(len(ds)):
        parts.append(struct.pack("<IB", int(ds.labels[i]), tag))
        parts.append(prm[i].tobytes())
        parts.append(flat[i].tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFileError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    head = _SPEC_HEAD.unpack(take(_SPEC_HEAD.size))
    mode_i, dom_i, k, spc, offset, dim = head[:6]
    r = head[6:14]
    seed = head[14]
    if mode_i >= len(MODES) or dom_i >= len(DOMAINS):
        raise FormatError(f"{path}: bad mode/domain code")
    spec = DatasetSpec(
        mode=MODES[mode_i],
        num_classes=k,
        samples_per_class=spc,
        rotation=(r[0], r[1]),
        translation=(r[2], r[3]),
        scale=(r[4], r[5]),
        noise=(r[6], r[7]),
        seed=seed,
        domain=DOMAINS[dom_i],
        class_offset=offset,
        dim=dim,
    )
    (nmap,) = struct.unpack("<I", take(4))
    label_map = struct.unpack(f"<{nmap}I", take(4 * nmap))
    (rank,) = struct.unpack("<I", take(4))
    shape = struct.unpack(f"<{rank}I", take(4 * rank))
    if tuple(shape) != spec.sample_shape:
        raise FormatError(f"{path}: sample shape {shape} does not match mode {spec.mode}")
    (n,) = struct.unpack("<Q", take(8))
    numel = int(np.prod(shape))
    rec = struct.Struct(f"<IB5d{numel}d")
    labels = np.zeros(n, dtype=np.int64)
    params = np.zeros((n, 5))
    data = np.zeros((n, numel))
    for i in range(n):
        vals = rec.unpack(take(rec.size))
        labels[i] = vals[0]
        if vals[1] != dom_i:
            raise FormatError(f"{path}: sample {i} domain tag {vals[1]} differs from dataset domain")
        params[i] = vals[2:7]
        data[i] = vals[7:]
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    if n and labels.max() >= nmap:
        raise FormatError(f"{path}: label out of range")
    return Dataset(spec, data.reshape(n, *shape), labels, params, tuple(label_map))
