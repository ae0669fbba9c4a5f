"""Hierarchical training-example sampling.

CMD draws class -> modality -> dataset -> image, MDC draws modality ->
dataset -> class -> image, RANDOM draws an image and a location uniformly.
Every level is uniform over its nonempty options.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .labels import AnnotatedVolume, restrict

EMPTY = 0  # class_id marker for the empty-annotation bucket and RANDOM draws


class UnsampleableCorpusError(RuntimeError):
    pass


class BoundsError(ValueError):
    pass


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    dataset_id: str
    modality_id: str
    shape: tuple[int, ...]


@dataclass
class CorpusIndex:
    images: list[ImageEntry]
    # class id -> positions into ``images``
    candidates: dict[int, list[int]]
    # (image position, class id) -> (n_voxels, ndim) coordinates of annotated voxels
    locations: dict[tuple[int, int], np.ndarray]
    empty_images: list[int]
    n_structures: int

    @property
    def empty_classes(self) -> list[int]:
        return [c for c in range(1, self.n_structures + 1) if not self.candidates[c]]

    @property
    def sampleable_classes(self) -> list[int]:
        return [c for c in range(1, self.n_structures + 1) if self.candidates[c]]


def build_index(volumes: Sequence[AnnotatedVolume], manifest_ids: Sequence[str] | None = None
                ) -> CorpusIndex:
    """Index annotated voxel locations per (image, class).

    An image enters a class list when that class is annotated in it and has
    at least one labeled voxel. Images without any labeled voxel go to the
    empty-annotation bucket.
    """
    if manifest_ids is not None:
        have = {v.image_id for v in volumes}
        for mid in manifest_ids:
            if mid not in have:
                raise FileNotFoundError(f"no volume loaded for manifest image {mid!r}")
    if not volumes:
        raise UnsampleableCorpusError("empty corpus")
    n = volumes[0].classes.n_structures
    images, locations, empty = [], {}, []
    candidates: dict[int, list[int]] = {c: [] for c in range(1, n + 1)}
    for i, v in enumerate(volumes):
        images.append(ImageEntry(v.image_id, v.dataset_id, v.modality_id, v.shape))
        present = False
        for c in range(1, n + 1):
            coords = np.argwhere(v.labels == c)
            if len(coords):
                candidates[c].append(i)
                locations[(i, c)] = coords
                present = True
        if not present:
            empty.append(i)
    return CorpusIndex(images, candidates, locations, empty, n)


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "CMD"
    patch_shape: tuple[int, ...] = (48, 48)
    jitter: int = 0
    # None -> 1/(N+1)
    empty_bucket_prob: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("CMD", "MDC", "RANDOM"):
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if any(s <= 0 for s in self.patch_shape):
            raise ValueError("patch_shape must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.empty_bucket_prob is not None and not 0 <= self.empty_bucket_prob <= 1:
            raise ValueError("empty_bucket_prob must lie in [0, 1]")


@dataclass(frozen=True)
class SampleKey:
    class_id: int
    modality_id: str
    dataset_id: str
    image_id: str
    image_pos: int
    patch_center: tuple[int, ...]
    anchor: tuple[int, ...] | None = None


def _choice(rng, options):
    return options[int(rng.integers(len(options)))]


def patch_start(center, patch_shape, image_shape):
    """Start corner of the patch around ``center``, clamped so it fits."""
    start = []
    for c, p, s in zip(center, patch_shape, image_shape):
        if p > s:
            raise BoundsError(f"patch {tuple(patch_shape)} larger than image {tuple(image_shape)}")
        start.append(int(min(max(c - p // 2, 0), s - p)))
    return tuple(start)


def _center_from(anchor, cfg, shape, rng):
    a = np.asarray(anchor, dtype=np.int64)
    if cfg.jitter:
        a = a + rng.integers(-cfg.jitter, cfg.jitter + 1, size=a.shape)
    start = patch_start(a, cfg.patch_shape, shape)
    return tuple(int(s + p // 2) for s, p in zip(start, cfg.patch_shape))


def _empty_prob(idx: CorpusIndex, cfg: SamplerConfig) -> float:
    if not idx.empty_images:
        return 0.0
    if not idx.sampleable_classes:
        return 1.0
    if cfg.empty_bucket_prob is None:
        return 1.0 / (idx.n_structures + 1)
    return cfg.empty_bucket_prob


def _draw_empty(idx, cfg, rng):
    pos = _choice(rng, idx.empty_images)
    e = idx.images[pos]
    center = tuple(int(rng.integers(p // 2, s - p + p // 2 + 1))
                   for p, s in zip(cfg.patch_shape, e.shape))
    patch_start(center, cfg.patch_shape, e.shape)
    return SampleKey(EMPTY, e.modality_id, e.dataset_id, e.image_id, pos, center)


def _keyed(idx, cfg, rng, c, pos):
    e = idx.images[pos]
    coords = idx.locations[(pos, c)]
    anchor = tuple(int(x) for x in coords[int(rng.integers(len(coords)))])
    center = _center_from(anchor, cfg, e.shape, rng)
    return SampleKey(c, e.modality_id, e.dataset_id, e.image_id, pos, center, anchor)


def _check_sampleable(idx):
    if not idx.sampleable_classes and not idx.empty_images:
        raise UnsampleableCorpusError("no class has candidates and the empty bucket is empty")


def sample_cmd(idx: CorpusIndex, cfg: SamplerConfig, rng) -> SampleKey:
    _check_sampleable(idx)
    if rng.random() < _empty_prob(idx, cfg):
        return _draw_empty(idx, cfg, rng)
    c = _choice(rng, idx.sampleable_classes)
    pool = idx.candidates[c]
    modality = _choice(rng, sorted({idx.images[i].modality_id for i in pool}))
    pool = [i for i in pool if idx.images[i].modality_id == modality]
    dataset = _choice(rng, sorted({idx.images[i].dataset_id for i in pool}))
    pool = [i for i in pool if idx.images[i].dataset_id == dataset]
    return _keyed(idx, cfg, rng, c, _choice(rng, pool))


def sample_mdc(idx: CorpusIndex, cfg: SamplerConfig, rng) -> SampleKey:
    _check_sampleable(idx)
    if rng.random() < _empty_prob(idx, cfg):
        return _draw_empty(idx, cfg, rng)
    annotated = sorted({i for c in idx.sampleable_classes for i in idx.candidates[c]})
    modality = _choice(rng, sorted({idx.images[i].modality_id for i in annotated}))
    pool = [i for i in annotated if idx.images[i].modality_id == modality]
    dataset = _choice(rng, sorted({idx.images[i].dataset_id for i in pool}))
    pool = [i for i in pool if idx.images[i].dataset_id == dataset]
    classes = [c for c in idx.sampleable_classes if any((i, c) in idx.locations for i in pool)]
    c = _choice(rng, classes)
    pool = [i for i in pool if (i, c) in idx.locations]
    return _keyed(idx, cfg, rng, c, _choice(rng, pool))


def sample_random(idx: CorpusIndex, cfg: SamplerConfig, rng) -> SampleKey:
    if not idx.images:
        raise UnsampleableCorpusError("empty corpus")
    pos = int(rng.integers(len(idx.images)))
    e = idx.images[pos]
    center = []
    for p, s in zip(cfg.patch_shape, e.shape):
        if p > s:
            raise BoundsError(f"patch {cfg.patch_shape} larger than image {e.shape}")
        center.append(int(rng.integers(p // 2, s - p + p // 2 + 1)))
    return SampleKey(EMPTY, e.modality_id, e.dataset_id, e.image_id, pos, tuple(center))


SAMPLERS = {"CMD": sample_cmd, "MDC": sample_mdc, "RANDOM": sample_random}


class Sampler:
    """A seeded stream of sample keys over one index."""

    def __init__(self, idx: CorpusIndex, cfg: SamplerConfig, rng=None):
        self.idx = idx
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self._draw = SAMPLERS[cfg.strategy]

    def __call__(self) -> SampleKey:
        return self._draw(self.idx, self.cfg, self.rng)

    def take(self, n: int) -> list[SampleKey]:
        return [self() for _ in range(n)]


def extract_patch(v: AnnotatedVolume, key: SampleKey, cfg: SamplerConfig) -> AnnotatedVolume:
    """Copy the patch centred at ``key.patch_center`` as a new volume.

    Sparse slice records are restricted to slices inside the patch and
    renumbered in patch coordinates.
    """
    shape = v.shape
    if len(key.patch_center) != len(shape):
        raise BoundsError(f"center {key.patch_center} does not match image rank {len(shape)}")
    start = []
    for c, p, s in zip(key.patch_center, cfg.patch_shape, shape):
        lo = c - p // 2
        if lo < 0 or lo + p > s:
            raise BoundsError(
                f"patch {cfg.patch_shape} at {key.patch_center} exceeds image {shape}")
        start.append(lo)
    sl = tuple(slice(a, a + p) for a, p in zip(start, cfg.patch_shape))
    maps = {ax: np.arange(a, a + p) for ax, (a, p) in enumerate(zip(start, cfg.patch_shape))}
    return restrict(v, maps, v.intensities[sl].copy(), v.labels[sl].copy())


# auditing -------------------------------------------------------------------

@dataclass
class AuditRow:
    level: str
    option: str
    count: int
    expected: float
    contribution: float
    p_value: float


@dataclass
class AuditReport:
    rows: list[AuditRow] = field(default_factory=list)
    alpha: float = 0.01

    @property
    def groups(self) -> dict[str, float]:
        return {r.level: r.p_value for r in self.rows}

    @property
    def passed(self) -> bool:
        return all(p > self.alpha for p in self.groups.values())

    def to_text(self) -> str:
        lines = ["level\toption\tcount\texpected\tchi2_contribution\tp_value\tstatus"]
        for r in self.rows:
            status = "PASS" if r.p_value > self.alpha else "FAIL"
            lines.append(f"{r.level}\t{r.option}\t{r.count}\t{r.expected:.2f}\t"
                         f"{r.contribution:.4f}\t{r.p_value:.4f}\t{status}")
        return "\n".join(lines)


def _uniform_group(report, level, counter: Counter, options):
    counts = np.array([counter.get(o, 0) for o in options], dtype=float)
    total = counts.sum()
    if total == 0 or len(options) < 2:
        p = 1.0
        expected = np.full(len(options), total / max(len(options), 1))
    else:
        expected = np.full(len(options), total / len(options))
        p = float(stats.chisquare(counts, expected).pvalue)
    for o, n, e in zip(options, counts, expected):
        contrib = (n - e) ** 2 / e if e > 0 else 0.0
        report.rows.append(AuditRow(level, str(o), int(n), float(e), float(contrib), p))


def audit_cmd(idx: CorpusIndex, keys: Sequence[SampleKey], alpha=0.01) -> AuditReport:
    """Chi-square check that every CMD level is uniform given its prefix."""
    report = AuditReport(alpha=alpha)
    keys = [k for k in keys if k.class_id != EMPTY]
    _uniform_group(report, "class", Counter(k.class_id for k in keys), idx.sampleable_classes)
    by_class = defaultdict(list)
    for k in keys:
        by_class[k.class_id].append(k)
    for c in idx.sampleable_classes:
        pool = idx.candidates[c]
        mods = sorted({idx.images[i].modality_id for i in pool})
        ks = by_class[c]
        _uniform_group(report, f"modality|class={c}", Counter(k.modality_id for k in ks), mods)
        for m in mods:
            mpool = [i for i in pool if idx.images[i].modality_id == m]
            dsets = sorted({idx.images[i].dataset_id for i in mpool})
            km = [k for k in ks if k.modality_id == m]
            _uniform_group(report, f"dataset|class={c},modality={m}",
                           Counter(k.dataset_id for k in km), dsets)
            for d in dsets:
                ipool = [idx.images[i].image_id for i in mpool if idx.images[i].dataset_id == d]
                kd = [k for k in km if k.dataset_id == d]
                _uniform_group(report, f"image|class={c},modality={m},dataset={d}",
                               Counter(k.image_id for k in kd), ipool)
    return report


def audit_mdc(idx: CorpusIndex, keys: Sequence[SampleKey], alpha=0.01) -> AuditReport:
    """Chi-square check of the modality -> dataset -> class -> image levels."""
    report = AuditReport(alpha=alpha)
    keys = [k for k in keys if k.class_id != EMPTY]
    annotated = sorted({i for c in idx.sampleable_classes for i in idx.candidates[c]})
    mods = sorted({idx.images[i].modality_id for i in annotated})
    _uniform_group(report, "modality", Counter(k.modality_id for k in keys), mods)
    for m in mods:
        mpool = [i for i in annotated if idx.images[i].modality_id == m]
        km = [k for k in keys if k.modality_id == m]
        dsets = sorted({idx.images[i].dataset_id for i in mpool})
        _uniform_group(report, f"dataset|modality={m}", Counter(k.dataset_id for k in km), dsets)
        for d in dsets:
            dpool = [i for i in mpool if idx.images[i].dataset_id == d]
            kd = [k for k in km if k.dataset_id == d]
            cls = [c for c in idx.sampleable_classes if any((i, c) in idx.locations for i in dpool)]
            _uniform_group(report, f"class|modality={m},dataset={d}",
                           Counter(k.class_id for k in kd), cls)
            for c in cls:
                ipool = [idx.images[i].image_id for i in dpool if (i, c) in idx.locations]
                kc = [k for k in kd if k.class_id == c]
                _uniform_group(report, f"image|modality={m},dataset={d},class={c}",
                               Counter(k.image_id for k in kc), ipool)
    return report


def audit_random(idx: CorpusIndex, keys: Sequence[SampleKey], alpha=0.01) -> AuditReport:
    report = AuditReport(alpha=alpha)
    _uniform_group(report, "image", Counter(k.image_id for k in keys),
                   [e.image_id for e in idx.images])
    return report


def class_exposure(volumes: Sequence[AnnotatedVolume], keys: Sequence[SampleKey],
                   cfg: SamplerConfig, n_structures: int) -> np.ndarray:
    """Fraction of sampled patches containing at least one voxel of each class.

    ``volumes`` should carry the labels exposure is measured against (released
    or full labels).
    """
    hits = np.zeros(n_structures + 1)
    for k in keys:
        v = volumes[k.image_pos]
        sl = tuple(slice(c - p // 2, c - p // 2 + p) for c, p in zip(k.patch_center, cfg.patch_shape))
        present = np.unique(v.labels[sl])
        hits[present] += 1
    return hits[1:] / max(len(keys), 1)
