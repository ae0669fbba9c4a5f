"""Training loop: sampler -> patches -> TinyNet -> losses -> AdamW."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import dataio
from .labels import AnnotatedSubset, AnnotatedVolume
from .losses import LossConfig, batch_total_loss
from .metrics import EvalReport, score_image
from .model import TinyNet
from .optim import OptimState, adamw_step, poly_lr
from .sampler import Sampler, SamplerConfig, build_index, extract_patch

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    patch_shape: tuple[int, ...] = (48, 48)
    seed: int = 0
    strategy: str = "CMD"
    jitter: int = 0
    empty_bucket_prob: float | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    base_lr: float = 1e-3
    weight_decay: float = 1e-2
    hidden: int = 16
    kernel: int = 3
    # initial probability of each structure channel; None -> uniform softmax
    fg_prior: float | None = 0.01
    eval_every: int = 200
    augment: bool = False
    checkpoint: str | None = None

    def __post_init__(self):
        for name in ("iterations", "batch_size", "hidden", "kernel", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(p <= 0 for p in self.patch_shape):
            raise ValueError("patch_shape must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.strategy, tuple(self.patch_shape), self.jitter,
                             self.empty_bucket_prob, self.seed)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        return d


@dataclass
class LogRow:
    iteration: int
    lr: float
    loss: float
    focal: float
    dice: float
    reg: float
    eval_dsc: float | None = None

    def to_line(self) -> str:
        ev = "-" if self.eval_dsc is None else f"{self.eval_dsc:.6f}"
        return (f"{self.iteration}\t{self.lr:.8g}\t{self.loss:.8g}\t{self.focal:.8g}\t"
                f"{self.dice:.8g}\t{self.reg:.8g}\t{ev}")


LOG_HEADER = "iter\tlr\tloss\tfocal\tdice\treg\teval_dsc"


@dataclass
class TrainResult:
    net: TinyNet
    log: list[LogRow]
    losses: np.ndarray


def _rotate_volume(v: AnnotatedVolume, k: int) -> AnnotatedVolume:
    rot = lambda a: np.ascontiguousarray(np.rot90(a, k, axes=(0, 1)))  # noqa: E731
    if not v.is_sparse:
        return AnnotatedVolume(rot(v.intensities), rot(v.labels), v.annotation, v.classes,
                               v.dataset_id, v.modality_id, v.image_id)
    axis = v.sparse_axis
    src = rot(np.indices(v.shape)[axis])
    # the output axis along which the source slice index varies
    new_axis = next(a for a in range(src.ndim)
                    if np.all(np.ptp(src, axis=tuple(b for b in range(src.ndim) if b != a)) == 0))
    line = np.moveaxis(src, new_axis, 0).reshape(src.shape[new_axis], -1)[:, 0]
    by_index = v.slice_subsets()
    ann = tuple(AnnotatedSubset(by_index[int(s)].members, new_axis, i)
                for i, s in enumerate(line) if int(s) in by_index)
    return AnnotatedVolume(rot(v.intensities), rot(v.labels), ann, v.classes,
                           v.dataset_id, v.modality_id, v.image_id)


def _scale_volume(v: AnnotatedVolume, s: float) -> AnnotatedVolume:
    """Nearest-neighbour zoom about the centre, keeping the shape."""
    maps = {}
    for ax, n in enumerate(v.shape):
        c = (n - 1) / 2.0
        maps[ax] = np.clip(np.round((np.arange(n) - c) / s + c), 0, n - 1).astype(np.intp)
    grid = np.ix_(*[maps[a] for a in range(len(v.shape))])
    inten, lab = v.intensities[grid], v.labels[grid]
    if not v.is_sparse:
        return AnnotatedVolume(inten, lab, v.annotation, v.classes,
                               v.dataset_id, v.modality_id, v.image_id)
    axis = v.sparse_axis
    by_index = v.slice_subsets()
    ann = tuple(AnnotatedSubset(by_index[int(src)].members, axis, i)
                for i, src in enumerate(maps[axis]) if int(src) in by_index)
    return AnnotatedVolume(inten, lab, ann, v.classes, v.dataset_id, v.modality_id, v.image_id)


def augment(v: AnnotatedVolume, rng, rotate=True, scale=True) -> AnnotatedVolume:
    """Random 90-degree rotation in the first two axes and +-10% NN scaling."""
    if rotate:
        k = int(rng.integers(4))
        if k % 2 == 0 or v.shape[0] == v.shape[1]:
            v = _rotate_volume(v, k)
    if scale:
        v = _scale_volume(v, float(rng.uniform(0.9, 1.1)))
    return v


def batch_loss(net: TinyNet, patches: Sequence[AnnotatedVolume], cfg: LossConfig):
    """Mean total loss over a batch and its parameter gradients."""
    x = np.stack([p.intensities for p in patches])[:, None]
    logits, cache = net.forward(x)
    values, grad, comp = batch_total_loss(logits, patches, cfg)
    return float(values.mean()), net.backward(cache, grad), comp


def predict_volume(net: TinyNet, intensities) -> np.ndarray:
    return net.predict(np.asarray(intensities)[None, None])[0]


def evaluate(net: TinyNet, images: Sequence, n_structures: int | None = None) -> EvalReport:
    """Score predictions on fully labeled images.

    ``images`` holds objects with ``volume`` and ``full_labels`` attributes;
    when ``full_labels`` is None the released labels and annotated classes
    are used instead.
    """
    report = EvalReport()
    for im in images:
        v = im.volume
        pred = predict_volume(net, v.intensities)
        if im.full_labels is not None:
            truth, classes = im.full_labels, None
        else:
            truth = v.labels
            classes = sorted(set(np.unique(truth).tolist()) - {0})
        report.scores.extend(score_image(pred, truth, v.image_id, v.dataset_id,
                                         classes, n_structures))
    return report


def unannotated_entropy(net: TinyNet, volumes: Sequence[AnnotatedVolume]) -> float:
    """Mean predictive entropy over voxels whose released label is 0."""
    total, count = 0.0, 0
    for v in volumes:
        logits, _ = net.forward(np.asarray(v.intensities)[None, None])
        z = logits[0].astype(np.float64)
        z = z - z.max(axis=0, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
        h = -(np.exp(logp) * logp).sum(axis=0)
        mask = v.labels == 0
        total += float(h[mask].sum())
        count += int(mask.sum())
    return total / max(count, 1)


def train(volumes: Sequence[AnnotatedVolume], cfg: TrainConfig, test_images=None,
          log_path=None) -> TrainResult:
    """Run the training loop; deterministic for a fixed seed."""
    idx = build_index(volumes)
    scfg = cfg.sampler_config()
    rng = np.random.default_rng(cfg.seed)
    sampler = Sampler(idx, scfg, rng)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    n = volumes[0].classes.n_structures
    net = TinyNet(1, cfg.hidden, n + 1, cfg.kernel, len(cfg.patch_shape),
                  dtype=np.float32, seed=cfg.seed, fg_prior=cfg.fg_prior)
    st = OptimState(cfg.base_lr, cfg.weight_decay)
    rows: list[LogRow] = []
    losses = np.empty(cfg.iterations)
    window = []
    fh = open(log_path, "w") if log_path else None
    if fh:
        fh.write(LOG_HEADER + "\n")
    try:
        for it in range(cfg.iterations):
            lr = poly_lr(it, cfg.iterations, cfg.base_lr)
            patches = []
            for key in sampler.take(cfg.batch_size):
                p = extract_patch(volumes[key.image_pos], key, scfg)
                if cfg.augment:
                    p = augment(p, aug_rng)
                patches.append(p)
            value, grads, comp = batch_loss(net, patches, cfg.loss)
            if not np.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at iteration {it}")
            losses[it] = value
            window.append((value, comp))
            adamw_step(net.params, grads, st, lr)
            net.version += 1
            last = it == cfg.iterations - 1
            if (it + 1) % cfg.eval_every == 0 or last:
                ev = None
                if test_images:
                    ev = evaluate(net, test_images, n).mean_structure_dsc
                row = LogRow(it + 1, lr, float(np.mean([w[0] for w in window])),
                             *(float(np.mean([w[1][k] for w in window]))
                               for k in ("focal", "dice", "reg")), ev)
                window = []
                rows.append(row)
                log.info("iter %d lr %.2e loss %.4f dsc %s", row.iteration, lr, row.loss, ev)
                if fh:
                    fh.write(row.to_line() + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, net, cfg, cfg.iterations)
    return TrainResult(net, rows, losses)


def checkpoint_meta(net: TinyNet, cfg_text: str, iteration: int) -> dict:
    return {"iteration": iteration, "config_hash": dataio.config_hash(cfg_text),
            "hidden": net.hidden, "kernel": net.kernel, "ndim": net.ndim,
            "n_classes": net.n_classes, "in_channels": net.in_channels}


def save_checkpoint(path, net: TinyNet, cfg: TrainConfig | str, iteration: int):
    if isinstance(cfg, str):
        text = cfg
    else:
        # the output location does not change the trained weights
        d = cfg.as_dict()
        d.pop("checkpoint")
        text = repr(d)
    dataio.write_checkpoint(path, net.params, checkpoint_meta(net, text, iteration))


def load_checkpoint(path) -> tuple[TinyNet, dict]:
    params, meta = dataio.read_checkpoint(path)
    net = TinyNet(meta["in_channels"], meta["hidden"], meta["n_classes"], meta["kernel"],
                  meta["ndim"], dtype=np.float32)
    net.set_params(params)
    return net, meta
