"""Dice similarity coefficient and the three aggregation protocols."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


def dsc(pred, true, class_id: int, score_empty: bool = False) -> float | None:
    """``2|P & T| / (|P| + |T|)`` for one class.

    Returns None when both masks are empty, unless ``score_empty`` is set,
    in which case the pair scores 1.
    """
    p = np.asarray(pred) == class_id
    t = np.asarray(true) == class_id
    if p.shape != t.shape:
        raise EvaluationError(f"prediction {p.shape} vs truth {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0 if score_empty else None
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


@dataclass(frozen=True)
class PairScore:
    image_id: str
    dataset_id: str
    class_id: int
    value: float


@dataclass
class Summary:
    mean: float
    sd: float
    n: int


def _summ(values) -> Summary:
    a = np.asarray(list(values), dtype=np.float64)
    if a.size == 0:
        raise EvaluationError("nothing to aggregate")
    return Summary(float(a.mean()), float(a.std()), int(a.size))


def score_image(pred, true, image_id: str, dataset_id: str,
                classes: Iterable[int] | None = None, n_structures: int | None = None
                ) -> list[PairScore]:
    """Score every structure present in ``true`` (or the given classes)."""
    true = np.asarray(true)
    if classes is None:
        classes = [int(c) for c in np.unique(true) if c > 0]
    out = []
    for c in classes:
        if c < 1 or (n_structures is not None and c > n_structures):
            raise EvaluationError(f"unknown class id {c}")
        v = dsc(pred, true, c)
        if v is not None:
            out.append(PairScore(image_id, dataset_id, int(c), v))
    return out


def _subject_means(scores: Sequence[PairScore]) -> dict[str, tuple[str, float]]:
    by_img = defaultdict(list)
    ds = {}
    for s in scores:
        by_img[s.image_id].append(s.value)
        ds[s.image_id] = s.dataset_id
    return {k: (ds[k], float(np.mean(v))) for k, v in sorted(by_img.items())}


def aggregate_per_subject(scores: Sequence[PairScore]) -> Summary:
    """Mean DSC per subject over its classes, then mean and sd across subjects."""
    if not scores:
        raise EvaluationError("empty evaluation set")
    return _summ(m for _, m in _subject_means(scores).values())


def aggregate_per_structure(scores: Sequence[PairScore]) -> tuple[dict[int, Summary], float]:
    """Per-class mean and sd over images; grand average of the class means."""
    if not scores:
        raise EvaluationError("empty evaluation set")
    by_class = defaultdict(list)
    for s in scores:
        by_class[s.class_id].append(s.value)
    per = {c: _summ(v) for c, v in sorted(by_class.items())}
    return per, float(np.mean([s.mean for s in per.values()]))


def aggregate_per_dataset(scores: Sequence[PairScore], datasets: Sequence[str] | None = None
                          ) -> dict[str, Summary]:
    """Subject means grouped by dataset."""
    if not scores:
        raise EvaluationError("empty evaluation set")
    groups = defaultdict(list)
    for d, m in _subject_means(scores).values():
        groups[d].append(m)
    if datasets is not None:
        unknown = [d for d in datasets if d not in groups]
        if unknown:
            raise EvaluationError(f"unknown dataset ids {unknown}")
        return {d: _summ(groups[d]) for d in datasets}
    return {d: _summ(v) for d, v in sorted(groups.items())}


@dataclass
class EvalReport:
    scores: list[PairScore] = field(default_factory=list)

    @property
    def per_subject(self) -> Summary:
        return aggregate_per_subject(self.scores)

    @property
    def per_structure(self) -> tuple[dict[int, Summary], float]:
        return aggregate_per_structure(self.scores)

    @property
    def per_dataset(self) -> dict[str, Summary]:
        return aggregate_per_dataset(self.scores)

    @property
    def mean_structure_dsc(self) -> float:
        return self.per_structure[1]

    def to_text(self) -> str:
        pct = lambda x: f"{100 * x:.1f}"  # noqa: E731
        subj = self.per_subject
        per_cls, grand = self.per_structure
        lines = ["section\tkey\tmean\tsd\tn",
                 f"subject\tall\t{pct(subj.mean)}\t{pct(subj.sd)}\t{subj.n}"]
        for c, s in per_cls.items():
            lines.append(f"structure\t{c}\t{pct(s.mean)}\t{pct(s.sd)}\t{s.n}")
        lines.append(f"structure\taverage\t{pct(grand)}\t-\t{len(per_cls)}")
        for d, s in self.per_dataset.items():
            lines.append(f"dataset\t{d}\t{pct(s.mean)}\t{pct(s.sd)}\t{s.n}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        subj = self.per_subject
        per_cls, grand = self.per_structure
        return {
            "per_subject": {"mean": subj.mean, "sd": subj.sd, "n": subj.n},
            "per_structure": {str(c): {"mean": s.mean, "sd": s.sd, "n": s.n}
                              for c, s in per_cls.items()},
            "structure_average": grand,
            "per_dataset": {d: {"mean": s.mean, "sd": s.sd, "n": s.n}
                            for d, s in self.per_dataset.items()},
            "pairs": [{"image_id": s.image_id, "dataset_id": s.dataset_id,
                       "class_id": s.class_id, "dsc": s.value} for s in self.scores],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)
