"""Synthetic multi-source corpora with partial and sparse annotation.

Each image holds one superellipse blob per structure on a flat background.
A dataset releases labels only for its annotated subset (partial labels);
sparse datasets additionally release only an evenly spaced fraction of
slices along one axis.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .labels import AnnotatedSubset, AnnotatedVolume, ClassSet

_TOKEN = re.compile(r"^[a-z0-9_]+$")


class GenerationError(RuntimeError):
    pass


class NamingError(ValueError):
    pass


def name_image(dataset_id: str, modality_id: str, base: str) -> str:
    """``<dataset>_<modality>_<base>``, the prefix convention used for sampling."""
    for what, tok in (("dataset", dataset_id), ("modality", modality_id), ("base", base)):
        if not tok or not _TOKEN.match(tok):
            raise NamingError(f"invalid {what} token {tok!r}: use lowercase alphanumerics/_")
    return f"{dataset_id}_{modality_id}_{base}"


def normalize_intensity(raw, lo_clip: float, hi_clip: float):
    """Clip to ``[lo_clip, hi_clip]`` and map affinely onto ``[0, 1]``."""
    if not hi_clip > lo_clip:
        raise ValueError(f"degenerate clip range ({lo_clip}, {hi_clip})")
    raw = np.asarray(raw, dtype=np.float64)
    return (np.clip(raw, lo_clip, hi_clip) - lo_clip) / (hi_clip - lo_clip)


def sparse_slices(n_slices: int, fraction: float) -> list[int]:
    """Evenly spaced slice indices starting at 0."""
    if not 0 < fraction <= 1:
        raise ValueError(f"sparse fraction must lie in (0, 1], got {fraction}")
    n = max(1, min(n_slices, int(round(fraction * n_slices))))
    return [k * n_slices // n for k in range(n)]


@dataclass
class DatasetSpec:
    name: str
    modality: str = "ct"
    subset: tuple[int, ...] = ()
    n_images: int = 8
    n_test: int = 2
    # intensity transform: raw = bias + contrast * level**gamma + noise
    contrast: float = 800.0
    bias: float = -400.0
    gamma: float = 1.0
    noise: float = 30.0
    # None -> clip at the transformed level range; "percentile" -> 1st/99th
    clip: str | None = None
    labeling: str = "partial"
    sparse_fraction: float = 1.0
    sparse_axis: int = 0


@dataclass
class GenSpec:
    image_shape: tuple[int, ...] = (48, 48)
    n_structures: int = 4
    datasets: list[DatasetSpec] = field(default_factory=list)
    radius_range: tuple[float, float] = (4.0, 8.0)
    seed: int = 0
    allow_uncovered: bool = False

    def __post_init__(self):
        classes = ClassSet(self.n_structures)
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dataset names {names}")
        covered: set[int] = set()
        for d in self.datasets:
            AnnotatedSubset(d.subset).check_within(classes)
            covered.update(d.subset)
            name_image(d.name, d.modality, "x")
            if d.labeling not in ("partial", "sparse"):
                raise ValueError(f"{d.name}: labeling must be partial or sparse")
            if not 0 <= d.sparse_axis < len(self.image_shape):
                raise ValueError(f"{d.name}: sparse axis {d.sparse_axis} out of range")
        if not self.allow_uncovered and covered != set(classes.members):
            missing = sorted(set(classes.members) - covered)
            raise ValueError(f"structures {missing} are not annotated by any dataset")

    @property
    def n_datasets(self) -> int:
        return len(self.datasets)


@dataclass(frozen=True)
class GroundTruthVolume:
    volume: AnnotatedVolume
    full_labels: np.ndarray
    split: str = "train"


def class_levels(n_structures: int) -> np.ndarray:
    """Base intensity level per class id, background included."""
    return np.linspace(0.1, 0.9, n_structures + 1)


def _blob_mask(shape, rng, rmin, rmax):
    ndim = len(shape)
    radii = rng.uniform(rmin, rmax, size=ndim)
    center = np.array([rng.uniform(r + 1, s - r - 2) for r, s in zip(radii, shape)])
    exponent = rng.uniform(1.6, 3.0)
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    coords = np.stack([g - c for g, c in zip(grids, center)])
    if ndim >= 2:
        theta = rng.uniform(0, np.pi)
        rot = np.eye(ndim)
        rot[0, 0] = rot[1, 1] = np.cos(theta)
        rot[0, 1], rot[1, 0] = -np.sin(theta), np.sin(theta)
        coords = np.tensordot(rot, coords, axes=1)
    r = sum(np.abs(coords[i] / radii[i]) ** exponent for i in range(ndim))
    return r <= 1.0


def place_blobs(shape, n_structures, rng, radius_range=(4.0, 8.0), max_tries=200):
    """Label map with one non-overlapping blob per structure id."""
    labels = np.zeros(shape, dtype=np.int32)
    for c in range(1, n_structures + 1):
        for _ in range(max_tries):
            mask = _blob_mask(shape, rng, *radius_range)
            # keep a one-voxel gap between structures
            grown = mask.copy()
            for ax in range(len(shape)):
                grown |= np.roll(mask, 1, ax) | np.roll(mask, -1, ax)
            if mask.any() and not (labels[grown] > 0).any():
                labels[mask] = c
                break
        else:
            raise GenerationError(
                f"could not place structure {c} without overlap after {max_tries} tries")
    return labels


def render(full_labels, d: DatasetSpec, n_structures: int, rng) -> np.ndarray:
    levels = class_levels(n_structures) ** d.gamma
    raw = d.bias + d.contrast * levels[full_labels]
    raw = raw + rng.normal(0.0, d.noise, size=full_labels.shape)
    if d.clip == "percentile":
        lo, hi = np.percentile(raw, [1, 99])
    else:
        lo, hi = d.bias, d.bias + d.contrast
    return normalize_intensity(raw, lo, hi).astype(np.float32)


def release(full_labels, d: DatasetSpec, classes: ClassSet):
    """Apply the dataset's partial/sparse annotation policy."""
    keep = np.isin(full_labels, d.subset)
    labels = np.where(keep, full_labels, 0).astype(np.int32)
    if d.labeling == "partial":
        return labels, AnnotatedSubset(d.subset)
    idx = sparse_slices(full_labels.shape[d.sparse_axis], d.sparse_fraction)
    moved = np.moveaxis(labels, d.sparse_axis, 0)
    off = np.ones(moved.shape[0], dtype=bool)
    off[idx] = False
    moved[off] = 0
    ann = tuple(AnnotatedSubset(d.subset, d.sparse_axis, i) for i in idx)
    return labels, ann


def generate(spec: GenSpec, rng=None) -> tuple[list[GroundTruthVolume], list[dict]]:
    """Generate train and held-out test images for every dataset.

    Each image draws from its own generator seeded by ``(seed, dataset, index)``
    so images are independent of generation order. Held-out images carry full
    annotation. Returns the volumes and one manifest record per volume.
    """
    classes = ClassSet(spec.n_structures)
    base_seed = spec.seed if rng is None else int(rng.integers(2 ** 63))
    corpus: list[GroundTruthVolume] = []
    records = []
    for di, d in enumerate(spec.datasets):
        for split, count in (("train", d.n_images), ("test", d.n_test)):
            for k in range(count):
                img_rng = np.random.default_rng(
                    [base_seed, di, k, 0 if split == "train" else 1])
                full = place_blobs(spec.image_shape, spec.n_structures, img_rng,
                                   spec.radius_range)
                inten = render(full, d, spec.n_structures, img_rng)
                if split == "train":
                    labels, ann = release(full, d, classes)
                else:
                    labels, ann = full.copy(), AnnotatedSubset(classes.members)
                base = f"{split}_{k:04d}"
                image_id = name_image(d.name, d.modality, base)
                vol = AnnotatedVolume(inten, labels, ann, classes, d.name, d.modality, image_id)
                corpus.append(GroundTruthVolume(vol, full, split))
                records.append({"image_id": image_id, "dataset_id": d.name,
                                "modality_id": d.modality, "split": split,
                                "labeling": d.labeling if split == "train" else "partial"})
    return corpus, records


def availability_matrix(spec: GenSpec) -> str:
    """Per-dataset class availability table, one row per dataset."""
    n = spec.n_structures
    head = "dataset\tmodality\tlabeling\t" + "\t".join(str(c) for c in range(1, n + 1))
    rows = [head]
    for d in spec.datasets:
        marks = ["x" if c in d.subset else "." for c in range(1, n + 1)]
        kind = d.labeling if d.labeling == "partial" else \
            f"sparse({d.sparse_fraction:g},axis={d.sparse_axis})"
        rows.append(f"{d.name}\t{d.modality}\t{kind}\t" + "\t".join(marks))
    full = [d.name for d in spec.datasets if len(d.subset) == n]
    rows.append("fully annotated sources: " + (", ".join(full) if full else "none"))
    return "\n".join(rows)


def default_spec(seed: int = 0) -> GenSpec:
    """Three sources with disjoint annotated subsets over four structures."""
    return GenSpec(
        image_shape=(48, 48), n_structures=4, seed=seed,
        datasets=[
            DatasetSpec("alpha", "ct", (1, 2), n_images=12, n_test=4),
            DatasetSpec("beta", "ct", (3,), n_images=12, n_test=4,
                        contrast=760.0, bias=-380.0, noise=35.0),
            DatasetSpec("gamma", "mr", (4,), n_images=12, n_test=4,
                        contrast=1000.0, bias=0.0, gamma=1.15, noise=40.0,
                        clip="percentile"),
        ])
