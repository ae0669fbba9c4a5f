"""Ambiguity-aware focal cross-entropy, soft dice, entropy regularizer.

Every loss returns its value together with the exact gradient with respect
to the logits. Fields carry channels on axis 0; the remaining axes are
spatial. Internally views are stacked as ``(V, C, P)`` arrays with a
per-view channel mask ``(V, C)`` marking channel 0 plus the annotated
structures, so a sparse volume is evaluated in one vectorized pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labels import AnnotatedVolume, ClassSet, member_mask, view_layout, with_full_annotation

LOG_FLOOR = 1e-12


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1.0
    focal_exponent: float = 2.0
    lambda_annotated: float = 1.0
    lambda_unannotated: float = 3.0
    # "patch": lambda 3 only when the whole patch is unannotated; "view": per slice
    lambda_scope: str = "patch"
    # "ambiguity" merges unannotated structures; "naive" treats label 0 as background
    mode: str = "ambiguity"
    # "annotated": focal and dice averaged over annotated views only, lambda * reg
    # over all views; "views": every view's full sum averaged over all views
    reduction: str = "annotated"
    unsafe: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.epsilon < 0 or (self.epsilon == 0 and not self.unsafe):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.focal_exponent < 0:
            raise ValueError("focal_exponent must be >= 0")
        if self.lambda_annotated < 0 or self.lambda_unannotated < 0:
            raise ValueError("lambdas must be >= 0")
        if self.lambda_scope not in ("view", "patch"):
            raise ValueError(f"unknown lambda_scope {self.lambda_scope!r}")
        if self.mode not in ("ambiguity", "naive"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.reduction not in ("annotated", "views"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass(frozen=True)
class DiceTerms:
    channels: tuple[int, ...]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


@dataclass
class LossResult:
    value: float
    grad_logits: np.ndarray
    n_voxels: int = 0
    components: dict = field(default_factory=dict)


def log_softmax(logits, axis=0):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis=0):
    return np.exp(log_softmax(logits, axis=axis))


def softmax_backward(p, grad_p, axis=1):
    """Chain ``dL/dp`` through softmax to ``dL/dlogits``."""
    return p * (grad_p - (grad_p * p).sum(axis=axis, keepdims=True))


# vectorized kernels ---------------------------------------------------------

def _merge(p, mask):
    """Merged probabilities laid out on the full channel axis.

    Channel 0 holds the pooled mass; non-member structure channels are zero.
    """
    outside = ~mask
    outside[:, 0] = True
    merged = np.where(mask[:, :, None], p, 0.0)
    merged[:, 0] = (p * outside[:, :, None]).sum(axis=1)
    return merged, outside


def _unmerge_grad(g_merged, mask, outside):
    """Route merged-space gradients back to the unmerged channels."""
    return np.where(outside[:, :, None], g_merged[:, :1], g_merged)


def _focal_kernel(p, y, mask, gamma):
    P = p.shape[2]
    merged, outside = _merge(p, mask)
    q = np.take_along_axis(merged, y[:, None], axis=1)[:, 0]
    qc = np.maximum(q, LOG_FLOOR)
    w = (1.0 - qc) ** gamma
    values = -(w * np.log(qc)).sum(axis=1) / P
    dq = -w / qc
    if gamma != 0:
        one_minus = 1.0 - qc
        safe = one_minus > 0
        dw = np.where(safe, gamma * np.where(safe, one_minus, 1.0) ** (gamma - 1), 0.0)
        dq = dq + dw * np.log(qc)
    dq = np.where(q > LOG_FLOOR, dq, 0.0) / P
    g_merged = np.zeros_like(merged)
    np.put_along_axis(g_merged, y[:, None], dq[:, None], axis=1)
    return values, _unmerge_grad(g_merged, mask, outside)


def _dice_terms(merged, target, mask):
    tp = (merged * target).sum(axis=2)
    sp = merged.sum(axis=2)
    sy = target.sum(axis=2)
    return tp, sp - tp, sy - tp, sp, sy


def _dice_kernel(p, y, mask, eps):
    merged, outside = _merge(p, mask)
    target = np.zeros_like(merged)
    np.put_along_axis(target, y[:, None], 1.0, axis=1)
    tp, fp, fn, sp, sy = _dice_terms(merged, target, mask)
    num = 2.0 * tp + eps
    den = 2.0 * tp + fp + fn + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mask, num / den, 0.0)
    k = mask.sum(axis=1)
    values = 1.0 - ratio.sum(axis=1) / k
    with np.errstate(divide="ignore", invalid="ignore"):
        g_merged = -(2.0 * target * den[:, :, None] - num[:, :, None]) / den[:, :, None] ** 2
    g_merged = np.where(mask[:, :, None], g_merged, 0.0) / k[:, None, None]
    return values, _unmerge_grad(g_merged, mask, outside)


def _safe_log(p):
    """``log p`` with ``0 log 0`` taken as 0."""
    return np.log(np.where(p > 0, p, 1.0))


def _entropy_kernel(p, logp):
    P = p.shape[2]
    plogp = p * logp
    h = -plogp.sum(axis=1)
    values = h.sum(axis=1) / P
    # direct logit gradient; the generic softmax chain is not needed here
    g_logits = -(plogp + p * h[:, None, :]) / P
    return values, g_logits


def _check(p, y, classes):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape[1:] != y.shape:
        raise ShapeMismatchError(f"field {p.shape} vs labels {y.shape}")
    if classes is not None and p.shape[0] != classes.n_channels:
        raise ShapeMismatchError(
            f"expected {classes.n_channels} channels, got {p.shape[0]}")
    return p, y


def _stack(p, y):
    return p.reshape(1, p.shape[0], -1), y.reshape(1, -1).astype(np.intp)


def _classes_for(p, classes):
    return classes if classes is not None else ClassSet(p.shape[0] - 1)


def focal_ce(p, y, phi_m, cfg: LossConfig = LossConfig(), classes: ClassSet | None = None
             ) -> LossResult:
    """Focal cross-entropy on the merged channels of one view."""
    p, y = _check(p, y, classes)
    classes = _classes_for(p, classes)
    mask = member_mask(phi_m, classes)
    if not mask[1:].any():
        return LossResult(0.0, np.zeros_like(p), y.size)
    ps, ys = _stack(p, y)
    val, g = _focal_kernel(ps, ys, mask[None], cfg.focal_exponent)
    grad = softmax_backward(ps, g).reshape(p.shape)
    return LossResult(float(val[0]), grad, y.size)


def dice_terms(p, y, phi_m, classes: ClassSet | None = None) -> DiceTerms:
    p, y = _check(p, y, classes)
    classes = _classes_for(p, classes)
    mask = member_mask(phi_m, classes)
    ps, ys = _stack(p, y)
    merged, _ = _merge(ps, mask[None])
    target = np.zeros_like(merged)
    np.put_along_axis(target, ys[:, None], 1.0, axis=1)
    tp, fp, fn, _, _ = _dice_terms(merged, target, mask[None])
    chans = tuple(int(c) for c in np.flatnonzero(mask))
    idx = list(chans)
    return DiceTerms(chans, tp[0, idx], fp[0, idx], fn[0, idx])


def dice(p, y, phi_m, cfg: LossConfig = LossConfig(), classes: ClassSet | None = None
         ) -> LossResult:
    """Soft dice over channel 0 plus the annotated structures."""
    p, y = _check(p, y, classes)
    classes = _classes_for(p, classes)
    mask = member_mask(phi_m, classes)
    if not mask[1:].any():
        return LossResult(0.0, np.zeros_like(p), y.size)
    ps, ys = _stack(p, y)
    val, g = _dice_kernel(ps, ys, mask[None], cfg.epsilon)
    grad = softmax_backward(ps, g).reshape(p.shape)
    return LossResult(float(val[0]), grad, y.size)


def entropy_reg(p) -> LossResult:
    """Mean per-voxel Shannon entropy over all N+1 channels."""
    p = np.asarray(p, dtype=np.float64)
    ps = p.reshape(1, p.shape[0], -1)
    val, g = _entropy_kernel(ps, _safe_log(ps))
    return LossResult(float(val[0]), g.reshape(p.shape), ps.shape[2])


def _volume_views(z, v: AnnotatedVolume, cfg: LossConfig):
    """Stack a volume's views as ``(V, C, P)`` logits plus labels and masks."""
    if z.shape != (v.classes.n_channels,) + v.shape:
        raise ShapeMismatchError(
            f"logits {z.shape} do not match volume {(v.classes.n_channels,) + v.shape}")
    if cfg.mode == "naive":
        v = with_full_annotation(v)
    axis, masks = view_layout(v)
    C = z.shape[0]
    if axis is None:
        zs = z.reshape(1, C, -1)
        ys = v.labels.reshape(1, -1)
    else:
        zs = np.moveaxis(z, axis + 1, 0)
        zs = zs.reshape(zs.shape[0], C, -1)
        ys = np.moveaxis(v.labels, axis, 0).reshape(zs.shape[0], -1)
    annotated = masks[:, 1:].any(axis=1)
    if cfg.lambda_scope == "patch":
        lam = np.full(len(masks), cfg.lambda_annotated if annotated.any()
                      else cfg.lambda_unannotated)
    else:
        lam = np.where(annotated, cfg.lambda_annotated, cfg.lambda_unannotated)
    return zs, ys.astype(np.intp), masks, lam, axis


def _unstack(grad, z_shape, shape, axis):
    if axis is None:
        return grad.reshape(z_shape)
    V, C = grad.shape[:2]
    spatial = tuple(s for a, s in enumerate(shape) if a != axis)
    return np.moveaxis(grad.reshape((V, C) + spatial), 0, axis + 1)


def _view_weights(masks, cfg: LossConfig):
    """Per-view weights of the supervised terms and of the regularizer."""
    V = len(masks)
    annotated = masks[:, 1:].any(axis=1)
    w_reg = np.full(V, 1.0 / V)
    if cfg.reduction == "views":
        return w_reg.copy(), w_reg
    n_a = int(annotated.sum())
    w_sup = np.where(annotated, 1.0 / max(n_a, 1), 0.0)
    return w_sup, w_reg


def _views_core(zs, ys, masks, lam, cfg: LossConfig, w_sup, w_reg):
    """Per-view focal, dice and entropy terms and the logit gradient of
    ``sum_v w_sup[v] (focal + dice) + w_reg[v] lam[v] reg``."""
    zs = np.asarray(zs, dtype=np.float64)
    V = zs.shape[0]
    p = softmax(zs, axis=1)
    annotated = masks[:, 1:].any(axis=1)
    focal_v = np.zeros(V)
    dice_v = np.zeros(V)
    g_p = np.zeros_like(p)
    if annotated.any():
        sel = np.flatnonzero(annotated)
        if len(sel) == V:
            sel = slice(None)
        fv, fg = _focal_kernel(p[sel], ys[sel], masks[sel], cfg.focal_exponent)
        dv, dg = _dice_kernel(p[sel], ys[sel], masks[sel], cfg.epsilon)
        focal_v[sel] = fv
        dice_v[sel] = dv
        g_p[sel] = fg + dg
    # log of the rounded p, so the value matches entropy_reg(softmax(z)) exactly
    reg_v, reg_g = _entropy_kernel(p, _safe_log(p))
    grad = (softmax_backward(p, g_p) * w_sup[:, None, None]
            + (w_reg * lam)[:, None, None] * reg_g)
    return focal_v, dice_v, reg_v, grad


def total_loss(logits, v: AnnotatedVolume, cfg: LossConfig = LossConfig()) -> LossResult:
    """Focal CE + dice + lambda * entropy over the views of one volume.

    Views are slices along the sparse axis for sparse labels and the whole
    volume for partial labels. Views without any annotated structure only
    receive the regularizer, weighted by ``lambda_unannotated``. See
    :class:`LossConfig` for how views are averaged.
    """
    z = np.asarray(logits, dtype=np.float64)
    zs, ys, masks, lam, axis = _volume_views(z, v, cfg)
    w_sup, w_reg = _view_weights(masks, cfg)
    focal_v, dice_v, reg_v, grad = _views_core(zs, ys, masks, lam, cfg, w_sup, w_reg)
    value = w_sup @ (focal_v + dice_v) + w_reg @ (lam * reg_v)
    comps = {"focal": float(w_sup @ focal_v), "dice": float(w_sup @ dice_v),
             "reg": float(reg_v.mean()), "views": zs.shape[0],
             "annotated_views": int(masks[:, 1:].any(axis=1).sum())}
    return LossResult(float(value), _unstack(grad, z.shape, v.shape, axis),
                      zs.shape[2], comps)


def batch_total_loss(logits, volumes, cfg: LossConfig = LossConfig()):
    """:func:`total_loss` for every batch member, evaluated in one pass per
    view size. Returns per-member values, the logit gradient of their mean,
    and mean components."""
    z = np.asarray(logits, dtype=np.float64)
    B = len(volumes)
    stacks = [_volume_views(z[b], v, cfg) for b, v in enumerate(volumes)]
    groups: dict[int, list[int]] = {}
    for b, st in enumerate(stacks):
        groups.setdefault(st[0].shape[2], []).append(b)
    values = np.zeros(B)
    comps = np.zeros((B, 3))
    grad = np.empty_like(z)
    for members in groups.values():
        parts = [stacks[b] for b in members]
        counts = [p[0].shape[0] for p in parts]
        cat = [np.concatenate([p[i] for p in parts]) for i in range(4)]
        weights = [_view_weights(p[2], cfg) for p in parts]
        w_sup = np.concatenate([w[0] for w in weights])
        w_reg = np.concatenate([w[1] for w in weights])
        focal_v, dice_v, reg_v, g = _views_core(*cat, cfg, w_sup / B, w_reg / B)
        bounds = np.cumsum([0] + counts)
        for j, b in enumerate(members):
            s = slice(bounds[j], bounds[j + 1])
            lam = cat[3][s]
            ws, wr = weights[j]
            values[b] = ws @ (focal_v[s] + dice_v[s]) + wr @ (lam * reg_v[s])
            comps[b] = ws @ focal_v[s], ws @ dice_v[s], reg_v[s].mean()
            grad[b] = _unstack(g[s], z[b].shape, volumes[b].shape, parts[j][4])
    comp = dict(zip(("focal", "dice", "reg"), comps.mean(axis=0).tolist()))
    return values, grad, comp
