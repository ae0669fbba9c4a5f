"""Label universe, annotation records and merged-background mapping.

Label 0 in a released label map means "unannotated", never confirmed
background. Losses therefore pool channel 0 together with every structure
that was not annotated in a view into a single merged background channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np


class InvalidAnnotationError(ValueError):
    """Raised when an annotation record or label map violates its invariants."""


@dataclass(frozen=True)
class ClassSet:
    """The universe of structure ids ``{1..N}``. Background 0 is implicit."""

    n_structures: int

    def __post_init__(self):
        if int(self.n_structures) < 1:
            raise InvalidAnnotationError(
                f"n_structures must be positive, got {self.n_structures}")

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_structures + 1))

    @property
    def n_channels(self) -> int:
        return self.n_structures + 1

    def __contains__(self, c) -> bool:
        return 1 <= int(c) <= self.n_structures


@dataclass(frozen=True)
class AnnotatedSubset:
    """Annotated structures governing a whole volume or one slice.

    ``axis``/``index`` are None for volume scope.
    """

    members: tuple[int, ...] = ()
    axis: int | None = None
    index: int | None = None

    def __post_init__(self):
        ids = tuple(sorted(int(m) for m in self.members))
        if len(set(ids)) != len(ids):
            raise InvalidAnnotationError(f"duplicate ids in subset {ids}")
        if any(m < 1 for m in ids):
            raise InvalidAnnotationError(f"subset ids must be >= 1, got {ids}")
        if (self.axis is None) != (self.index is None):
            raise InvalidAnnotationError("slice scope needs both axis and index")
        object.__setattr__(self, "members", ids)

    @property
    def is_slice(self) -> bool:
        return self.axis is not None

    @property
    def is_empty(self) -> bool:
        return not self.members

    def check_within(self, classes: ClassSet):
        bad = [m for m in self.members if m not in classes]
        if bad:
            raise InvalidAnnotationError(
                f"ids {bad} outside class set 1..{classes.n_structures}")

    def complement(self, classes: ClassSet) -> tuple[int, ...]:
        """Structures of the universe not annotated here."""
        return tuple(c for c in classes.members if c not in self.members)


def _as_subset(phi_m) -> AnnotatedSubset:
    if isinstance(phi_m, AnnotatedSubset):
        return phi_m
    return AnnotatedSubset(tuple(phi_m))


def member_mask(phi_m, classes: ClassSet) -> np.ndarray:
    """Boolean mask over the N+1 channels; True for 0 and for members."""
    sub = _as_subset(phi_m)
    sub.check_within(classes)
    mask = np.zeros(classes.n_channels, dtype=bool)
    mask[0] = True
    mask[list(sub.members)] = True
    return mask


def merge_probs(p, phi_m, classes: ClassSet) -> np.ndarray:
    """Pool the probability of every non-annotated channel into channel 0.

    ``p`` has channels on axis 0. Output channels are ``[0, *sorted(phi_m)]``.
    """
    sub = _as_subset(phi_m)
    sub.check_within(classes)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] != classes.n_channels:
        raise InvalidAnnotationError(
            f"expected {classes.n_channels} channels, got {p.shape[0]}")
    outside = [0] + list(sub.complement(classes))
    merged = np.empty((1 + len(sub.members),) + p.shape[1:])
    merged[0] = p[outside].sum(axis=0)
    merged[1:] = p[list(sub.members)]
    return merged


def merge_targets(y, phi_m, classes: ClassSet) -> np.ndarray:
    """Merged one-hot targets. ``y`` is either an integer label map or a
    boolean/float one-hot field with channels on axis 0."""
    sub = _as_subset(phi_m)
    sub.check_within(classes)
    y = np.asarray(y)
    if np.issubdtype(y.dtype, np.integer):
        y = one_hot(y, classes.n_channels)
    merged = merge_probs(y, sub, classes)
    return merged.astype(np.int8)


def one_hot(labels, n_channels: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((n_channels,) + labels.shape, dtype=bool)
    np.put_along_axis(out, labels[None].astype(np.intp), True, axis=0)
    return out


@dataclass(frozen=True)
class AnnotatedVolume:
    """Image intensities, released labels and the annotation record.

    ``annotation`` is a single volume-scope subset (partial labeling) or a
    sequence of slice-scope subsets along one axis (sparse labeling).
    Slices without a record are unannotated.
    """

    intensities: np.ndarray
    labels: np.ndarray
    annotation: AnnotatedSubset | tuple[AnnotatedSubset, ...]
    classes: ClassSet
    dataset_id: str = "d"
    modality_id: str = "m"
    image_id: str = "d_m_0"

    def __post_init__(self):
        if not isinstance(self.annotation, AnnotatedSubset):
            object.__setattr__(self, "annotation", tuple(self.annotation))
        self.validate()

    @property
    def is_sparse(self) -> bool:
        return not isinstance(self.annotation, AnnotatedSubset)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    @property
    def sparse_axis(self) -> int | None:
        if not self.is_sparse:
            return None
        if self.annotation:
            return self.annotation[0].axis
        return 0

    def slice_subsets(self) -> dict[int, AnnotatedSubset]:
        if not self.is_sparse:
            raise InvalidAnnotationError("partial volume has no slice records")
        return {s.index: s for s in self.annotation}

    def validate(self):
        lab = np.asarray(self.labels)
        img = np.asarray(self.intensities)
        where = f"image {self.image_id!r}"
        if lab.shape != img.shape:
            raise InvalidAnnotationError(
                f"{where}: labels {lab.shape} vs intensities {img.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise InvalidAnnotationError(f"{where}: labels must be integers")
        n = self.classes.n_structures
        bad = int(np.count_nonzero((lab < 0) | (lab > n)))
        if bad:
            raise InvalidAnnotationError(
                f"{where}: {bad} voxels carry labels outside [0, {n}]")
        if not self.is_sparse:
            self.annotation.check_within(self.classes)
            if self.annotation.is_slice:
                raise InvalidAnnotationError(
                    f"{where}: partial annotation must be volume scope")
            allowed = member_mask(self.annotation, self.classes)
            _check_labels(lab, allowed, where)
            return
        axes = {s.axis for s in self.annotation}
        if len(axes) > 1:
            raise InvalidAnnotationError(
                f"{where}: mixed sparse axes {sorted(axes)} are not supported")
        seen = set()
        for s in self.annotation:
            if not s.is_slice:
                raise InvalidAnnotationError(
                    f"{where}: sparse records must be slice scope")
            s.check_within(self.classes)
            if not 0 <= s.axis < lab.ndim or not 0 <= s.index < lab.shape[s.axis]:
                raise InvalidAnnotationError(
                    f"{where}: slice ({s.axis}, {s.index}) out of bounds")
            if s.index in seen:
                raise InvalidAnnotationError(
                    f"{where}: slice {s.index} annotated twice")
            seen.add(s.index)
        axis = self.sparse_axis
        by_index = self.slice_subsets()
        moved = np.moveaxis(lab, axis, 0)
        for i in range(moved.shape[0]):
            sub = by_index.get(i, AnnotatedSubset())
            _check_labels(moved[i], member_mask(sub, self.classes),
                          f"{where} slice {i}")


def _check_labels(lab: np.ndarray, allowed: np.ndarray, where: str):
    bad = int(np.count_nonzero(~allowed[lab]))
    if bad:
        found = sorted(set(np.unique(lab[~allowed[lab]]).tolist()))
        raise InvalidAnnotationError(
            f"{where}: {bad} voxels labeled {found} outside the annotated subset")


@dataclass(frozen=True)
class View:
    intensities: np.ndarray
    labels: np.ndarray
    subset: AnnotatedSubset
    # where this view sits in the volume: (axis, index) or None for the whole volume
    position: tuple[int, int] | None = field(default=None)


def slice_views(v: AnnotatedVolume) -> Iterator[View]:
    """One view per slice for sparse labels, one whole-volume view otherwise."""
    if not v.is_sparse:
        yield View(v.intensities, v.labels, v.annotation)
        return
    axis = v.sparse_axis
    by_index = v.slice_subsets()
    img = np.moveaxis(v.intensities, axis, 0)
    lab = np.moveaxis(v.labels, axis, 0)
    for i in range(lab.shape[0]):
        sub = by_index.get(i, AnnotatedSubset((), axis, i))
        yield View(img[i], lab[i], sub, (axis, i))


def view_layout(v: AnnotatedVolume) -> tuple[int | None, np.ndarray]:
    """Return ``(axis, mask)`` where ``mask[k]`` is the channel mask of view k.

    ``axis`` is None for a single whole-volume view.
    """
    if not v.is_sparse:
        return None, member_mask(v.annotation, v.classes)[None]
    axis = v.sparse_axis
    masks = np.zeros((v.shape[axis], v.classes.n_channels), dtype=bool)
    masks[:, 0] = True
    for s in v.annotation:
        masks[s.index, list(s.members)] = True
    return axis, masks


def subsets_union(subsets: Sequence[AnnotatedSubset]) -> tuple[int, ...]:
    out: set[int] = set()
    for s in subsets:
        out.update(s.members)
    return tuple(sorted(out))


def annotated_classes(v: AnnotatedVolume) -> tuple[int, ...]:
    if v.is_sparse:
        return subsets_union(v.annotation)
    return v.annotation.members


def with_full_annotation(v: AnnotatedVolume) -> AnnotatedVolume:
    """Reinterpret every label-0 voxel as confirmed background.

    This is the naive baseline: all structures count as annotated everywhere.
    """
    full = AnnotatedSubset(v.classes.members)
    return AnnotatedVolume(v.intensities, v.labels, full, v.classes,
                           v.dataset_id, v.modality_id, v.image_id)


def restrict(v: AnnotatedVolume, index_maps: Mapping[int, np.ndarray],
             intensities: np.ndarray, labels: np.ndarray) -> AnnotatedVolume:
    """Build a derived volume whose axis ``a`` position ``k`` came from source
    position ``index_maps[a][k]``. Used for patches and augmentation."""
    if not v.is_sparse:
        ann = v.annotation
    else:
        axis = v.sparse_axis
        src = index_maps[axis]
        by_index = v.slice_subsets()
        ann = tuple(AnnotatedSubset(by_index[int(s)].members, axis, k)
                    for k, s in enumerate(src) if int(s) in by_index)
    return AnnotatedVolume(intensities, labels, ann, v.classes,
                           v.dataset_id, v.modality_id, v.image_id)
