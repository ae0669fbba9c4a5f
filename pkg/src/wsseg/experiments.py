"""Desk-scale experiment corpora and runners.

Each runner trains TinyNet on a synthetic corpus and scores it on held-out,
fully labeled images from every source.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .labels import AnnotatedSubset, AnnotatedVolume, ClassSet
from .sampler import Sampler, SamplerConfig, audit_cmd, build_index, class_exposure
from .synthdata import DatasetSpec, GenSpec, default_spec, generate
from .train import TrainConfig, evaluate, train, unannotated_entropy


@dataclass
class RunSummary:
    label: str
    dsc: float
    per_class: dict[int, float]
    seconds: float
    entropy: float | None = None

    def line(self) -> str:
        cls = " ".join(f"{c}:{v:.3f}" for c, v in self.per_class.items())
        ent = "" if self.entropy is None else f" unannotated_entropy={self.entropy:.4f}"
        return f"{self.label}: dsc={self.dsc:.4f} [{cls}]{ent} ({self.seconds:.0f}s)"


def split(corpus):
    train_vols = [g.volume for g in corpus if g.split == "train"]
    test = [g for g in corpus if g.split == "test"]
    return train_vols, test


def run(spec: GenSpec, cfg: TrainConfig, label: str, entropy: bool = False) -> RunSummary:
    corpus, _ = generate(spec)
    vols, test = split(corpus)
    t0 = time.perf_counter()
    res = train(vols, cfg)
    report = evaluate(res.net, test, spec.n_structures)
    per, grand = report.per_structure
    ent = unannotated_entropy(res.net, vols) if entropy else None
    return RunSummary(label, grand, {c: s.mean for c, s in per.items()},
                      time.perf_counter() - t0, ent)


def sparse_spec(fraction: float, axis: int, seed: int = 0) -> GenSpec:
    """The default three sources with labels released on a fraction of slices."""
    spec = default_spec(seed)
    spec.datasets = [dataclasses.replace(d, labeling="sparse", sparse_fraction=fraction,
                                         sparse_axis=axis) for d in spec.datasets]
    return spec


def hybrid_spec(with_sparse: bool, seed: int = 0) -> GenSpec:
    """Partially labeled CT/MR sources, optionally joined by two sparsely
    labeled sources from a scanner with a strongly nonlinear contrast.

    Held-out images of the new scanner are always part of the test set; the
    partial-only corpus simply releases none of its training labels.
    """
    spec = default_spec(seed)
    new = dict(modality="mr", n_images=12, n_test=4, contrast=1000.0, bias=0.0,
               gamma=2.0, noise=30.0, clip="percentile", labeling="sparse",
               sparse_fraction=0.2, sparse_axis=0)
    extra = [DatasetSpec("delta", subset=(1, 2), **new),
             DatasetSpec("epsilon", subset=(3, 4), **new)]
    if not with_sparse:
        extra = [dataclasses.replace(d, n_images=0) for d in extra]
    spec.datasets = spec.datasets + extra
    return spec


@dataclass
class Comparison:
    runs: dict[str, RunSummary] = field(default_factory=dict)

    def __getitem__(self, k) -> RunSummary:
        return self.runs[k]

    def text(self) -> str:
        return "\n".join(r.line() for r in self.runs.values())


def self_disambiguation(cfg: TrainConfig = TrainConfig(), seed: int = 0) -> Comparison:
    spec = default_spec(seed)
    out = Comparison()
    out.runs["ambiguity"] = run(spec, cfg, "ambiguity-aware")
    naive = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, mode="naive"))
    out.runs["naive"] = run(spec, naive, "label-0-is-background")
    return out


def sparse_labels(cfg: TrainConfig = TrainConfig(), axes=(0, 1), fraction: float = 0.2,
                  seed: int = 0) -> Comparison:
    out = Comparison()
    for ax in axes:
        out.runs[f"full_{ax}"] = run(sparse_spec(1.0, ax, seed), cfg, f"100% slices, axis {ax}")
        out.runs[f"sparse_{ax}"] = run(sparse_spec(fraction, ax, seed), cfg,
                                       f"{fraction:.0%} slices, axis {ax}")
    return out


def hybrid(cfg: TrainConfig = TrainConfig(), seed: int = 0) -> Comparison:
    out = Comparison()
    out.runs["partial"] = run(hybrid_spec(False, seed), cfg, "partial sources only")
    out.runs["hybrid"] = run(hybrid_spec(True, seed), cfg, "partial + sparse sources")
    return out


def regularizer(cfg: TrainConfig = TrainConfig(), seed: int = 0) -> Comparison:
    spec = default_spec(seed)
    out = Comparison()
    out.runs["reg"] = run(spec, cfg, "with regularizer", entropy=True)
    off = dataclasses.replace(cfg, loss=dataclasses.replace(
        cfg.loss, lambda_annotated=0.0, lambda_unannotated=0.0))
    out.runs["noreg"] = run(spec, off, "without regularizer", entropy=True)
    return out


# sampler corpora ------------------------------------------------------------

def symmetric_volumes(n_images: int = 3, shape=(16, 16)) -> list[AnnotatedVolume]:
    """2 classes x 2 modalities x 2 datasets, every leaf equally populated."""
    classes = ClassSet(2)
    vols = []
    for mod in ("ct", "mr"):
        for ds in ("d1", "d2"):
            for k in range(n_images):
                lab = np.zeros(shape, np.int32)
                lab[2:5, 2:5] = 1
                lab[9:12, 9:12] = 2
                vols.append(AnnotatedVolume(np.zeros(shape, np.float32), lab,
                                            AnnotatedSubset((1, 2)), classes, ds, mod,
                                            f"{ds}_{mod}_{k:04d}"))
    return vols


def imbalanced_volumes(n_images: int = 12, shape=(64, 64), seed: int = 0
                       ) -> list[AnnotatedVolume]:
    """Fully labeled images where class 1 is a large organ and class 3 a
    2x2 structure far from everything else."""
    rng = np.random.default_rng(seed)
    classes = ClassSet(3)
    vols = []
    for k in range(n_images):
        lab = np.zeros(shape, np.int32)
        r0, c0 = rng.integers(2, 8, size=2)
        lab[r0:r0 + 20, c0:c0 + 20] = 1
        r1, c1 = rng.integers(40, 46, size=2)
        lab[r1:r1 + 8, c1:c1 + 8] = 2
        r2, c2 = rng.integers(4, 10), rng.integers(52, 60)
        lab[r2:r2 + 2, c2:c2 + 2] = 3
        vols.append(AnnotatedVolume(np.zeros(shape, np.float32), lab,
                                    AnnotatedSubset((1, 2, 3)), classes, "organs", "ct",
                                    f"organs_ct_{k:04d}"))
    return vols


def sampler_audit(n_draws: int = 100_000, seed: int = 0):
    """CMD chi-square report on the symmetric corpus."""
    vols = symmetric_volumes()
    idx = build_index(vols)
    cfg = SamplerConfig("CMD", (8, 8), seed=seed)
    keys = Sampler(idx, cfg).take(n_draws)
    return audit_cmd(idx, keys)


def exposure(strategy: str, n_draws: int = 20_000, patch=(12, 12), seed: int = 0) -> np.ndarray:
    """Per-class patch exposure on the imbalanced corpus."""
    vols = imbalanced_volumes(seed=seed)
    idx = build_index(vols)
    cfg = SamplerConfig(strategy, patch, seed=seed)
    keys = Sampler(idx, cfg).take(n_draws)
    return class_exposure(vols, keys, cfg, 3)
