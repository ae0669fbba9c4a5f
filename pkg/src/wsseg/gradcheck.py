"""Finite-difference checks of the analytic loss and network gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .labels import AnnotatedSubset, AnnotatedVolume, ClassSet
from .losses import LossConfig, batch_total_loss, dice, entropy_reg, focal_ce, softmax, total_loss
from .model import TinyNet

STEP = 1e-4


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at every coordinate of ``x``.

    ``x`` is perturbed in place and restored afterwards.
    """
    g = np.zeros(x.shape, dtype=np.float64)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric, floor: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm; 0 when both vanish."""
    a = np.ravel(analytic).astype(np.float64)
    n = np.ravel(numeric).astype(np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class CheckResult:
    name: str
    errors: list[float] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        # NaN propagates so a broken check cannot look clean
        return float(np.max(self.errors)) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{len(self.errors)}\t{self.worst:.3e}\t{self.tol:g}\t{status}"


def random_instance(rng, max_structures=4, shape=None):
    """Random logits, labels and annotated subset for one view."""
    n = int(rng.integers(1, max_structures + 1))
    shape = shape or tuple(int(s) for s in rng.integers(2, 5, size=2))
    k = int(rng.integers(0, n + 1))
    phi = tuple(sorted(rng.choice(np.arange(1, n + 1), size=k, replace=False).tolist()))
    allowed = np.array((0,) + phi)
    y = rng.choice(allowed, size=shape)
    z = rng.uniform(-3.0, 3.0, size=(n + 1,) + shape)
    return z, y, phi, ClassSet(n)


def _random_volume(rng, n, shape):
    """A partial or sparse volume with labels consistent with its annotation."""
    classes = ClassSet(n)
    intens = np.zeros(shape, np.float32)
    if rng.random() < 0.5:
        k = int(rng.integers(0, n + 1))
        phi = tuple(sorted(rng.choice(np.arange(1, n + 1), size=k, replace=False).tolist()))
        lab = rng.choice(np.array((0,) + phi), size=shape).astype(np.int32)
        return AnnotatedVolume(intens, lab, AnnotatedSubset(phi), classes)
    axis = int(rng.integers(len(shape)))
    lab = np.zeros(shape, np.int32)
    ann = []
    for i in range(shape[axis]):
        if rng.random() < 0.5:
            continue
        k = int(rng.integers(0, n + 1))
        phi = tuple(sorted(rng.choice(np.arange(1, n + 1), size=k, replace=False).tolist()))
        sl = [slice(None)] * len(shape)
        sl[axis] = i
        lab[tuple(sl)] = rng.choice(np.array((0,) + phi), size=lab[tuple(sl)].shape)
        ann.append(AnnotatedSubset(phi, axis, i))
    return AnnotatedVolume(intens, lab, tuple(ann), classes)


def check_losses(n_instances: int = 100, seed: int = 0, tol: float = 1e-4,
                 cfg: LossConfig = LossConfig()) -> list[CheckResult]:
    """Compare each loss's logit gradient with central differences."""
    rng = np.random.default_rng(seed)
    out = {k: CheckResult(k, tol=tol) for k in ("focal_ce", "dice", "entropy_reg", "total_loss")}
    for _ in range(n_instances):
        z, y, phi, classes = random_instance(rng)
        for name, fn in (("focal_ce", focal_ce), ("dice", dice)):
            f = lambda zz, fn=fn: fn(softmax(zz), y, phi, cfg, classes).value  # noqa: E731
            ana = fn(softmax(z), y, phi, cfg, classes).grad_logits
            out[name].errors.append(rel_err(ana, central_diff(f, z)))
        f = lambda zz: entropy_reg(softmax(zz)).value  # noqa: E731
        out["entropy_reg"].errors.append(
            rel_err(entropy_reg(softmax(z)).grad_logits, central_diff(f, z)))
        v = _random_volume(rng, classes.n_structures, z.shape[1:])
        f = lambda zz: total_loss(zz, v, cfg).value  # noqa: E731
        out["total_loss"].errors.append(rel_err(total_loss(z, v, cfg).grad_logits,
                                                central_diff(f, z)))
    return list(out.values())


def check_network(n_instances: int = 3, seed: int = 0, tol: float = 1e-3,
                  ndim: int = 2, cfg: LossConfig = LossConfig()) -> CheckResult:
    """End-to-end check of parameter gradients through a float64 TinyNet."""
    rng = np.random.default_rng(seed)
    res = CheckResult(f"tinynet_{ndim}d", tol=tol)
    n = 3
    shape = (6, 5) if ndim == 2 else (4, 4, 3)
    for i in range(n_instances):
        net = TinyNet(1, 4, n + 1, 3, ndim, dtype=np.float64, seed=seed + i)
        vols = [_random_volume(rng, n, shape) for _ in range(2)]
        x = rng.normal(size=(2, 1) + shape)

        def loss_only():
            logits, _ = net.forward(x)
            return float(batch_total_loss(logits, vols, cfg)[0].mean())

        logits, cache = net.forward(x)
        _, g_logits, _ = batch_total_loss(logits, vols, cfg)
        grads = net.backward(cache, g_logits)
        ana, num = [], []
        for name, w in net.params.items():
            ana.append(grads[name].ravel())
            num.append(central_diff(lambda _w: loss_only(), w).ravel())
        res.errors.append(rel_err(np.concatenate(ana), np.concatenate(num)))
    return res


def run_suite(n_instances: int = 100, seed: int = 0) -> list[CheckResult]:
    return check_losses(n_instances, seed) + [check_network(seed=seed),
                                               check_network(seed=seed, ndim=3)]
