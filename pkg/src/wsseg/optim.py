"""AdamW with decoupled weight decay and the polynomial learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimState:
    base_lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon_opt: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    """Polynomial decay from ``base_lr`` at 0 to 0 at ``max_iter``."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def adamw_step(params: dict, grads: dict, st: OptimState, lr_t: float):
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Updates ``params`` and ``st`` in place and returns both.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(
                f"step {st.step + 1}: {bad} non-finite gradient entries in {name!r}")
    st.step += 1
    b1, b2 = st.betas
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != param shape {p.shape}")
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
        v = st.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        update = lr_t * (m_hat / (np.sqrt(v_hat) + st.epsilon_opt) + st.weight_decay * p)
        params[name] = (p - update).astype(p.dtype)
    return params, st
