"""Tiny fully convolutional segmentation network with manual backprop.

conv(K) -> ReLU -> conv(K) -> ReLU -> 1x1 head, same padding, any number of
spatial dims. Inputs are ``(B, C_in, *spatial)``;
activations are kept channel-first ``(C, B, *spatial)`` so convolutions
reduce to one matrix product over im2col columns.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "head.w", "head.b")


class ContractError(ValueError):
    pass


def _offsets(k, ndim):
    return list(itertools.product(range(k), repeat=ndim))


def im2col(x, k):
    """Columns ``(k**d * C, B * prod(S))`` from a ``(C, B, *S)`` array, same padding."""
    ndim = x.ndim - 2
    pad = k // 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * ndim)
    S = x.shape[2:]
    cols = np.stack([xp[(slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, S))]
                     for off in _offsets(k, ndim)])
    return cols.reshape(-1, int(np.prod(x.shape[1:])))


def col2im(cols, k, shape):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``shape``."""
    ndim = len(shape) - 2
    pad = k // 2
    S = shape[2:]
    offs = _offsets(k, ndim)
    cols = cols.reshape((len(offs),) + tuple(shape))
    out = np.zeros(tuple(shape[:2]) + tuple(s + 2 * pad for s in S), dtype=cols.dtype)
    for i, off in enumerate(offs):
        out[(slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, S))] += cols[i]
    return out[(slice(None), slice(None)) + tuple(slice(pad, pad + s) for s in S)]


def _wmat(w):
    """``(O, I, k..k)`` kernel as an ``(O, k**d * I)`` matrix matching im2col rows."""
    return np.moveaxis(w, 1, -1).reshape(w.shape[0], -1)


def conv_forward(x, w, b):
    """Same-padded cross-correlation on channel-first ``(C, B, *S)`` arrays."""
    k = w.shape[-1]
    cols = im2col(x, k) if k > 1 else x.reshape(x.shape[0], -1)
    out = _wmat(w) @ cols + b[:, None]
    return out.reshape((w.shape[0],) + x.shape[1:]), cols


def conv_backward(grad_out, cols, w, in_shape, need_input=True):
    k = w.shape[-1]
    g = grad_out.reshape(grad_out.shape[0], -1)
    gb = g.sum(axis=1)
    gw = (g @ cols.T).reshape((w.shape[0],) + w.shape[2:] + (w.shape[1],))
    gw = np.moveaxis(gw, -1, 1)
    if not need_input:
        return None, gw, gb
    gcols = _wmat(w).T @ g
    if k == 1:
        return gcols.reshape(in_shape), gw, gb
    return col2im(gcols, k, in_shape), gw, gb


@dataclass
class Cache:
    x_shape: tuple
    cols1: np.ndarray
    a1: np.ndarray
    cols2: np.ndarray
    a2: np.ndarray
    version: int


class TinyNet:
    def __init__(self, in_channels=1, hidden=16, n_classes=5, kernel=3, ndim=2,
                 dtype=np.float32, seed=0, fg_prior=None):
        """``fg_prior`` sets the initial softmax probability of every
        structure channel through the head bias, leaving the rest to channel 0.
        None keeps zero biases."""
        if kernel % 2 != 1:
            raise ContractError("kernel size must be odd for same padding")
        self.in_channels = in_channels
        self.hidden = hidden
        self.n_classes = n_classes
        self.kernel = kernel
        self.ndim = ndim
        self.dtype = np.dtype(dtype)
        self.version = 0
        rng = np.random.default_rng(seed)
        ks = (kernel,) * ndim

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(self.dtype)

        self.params = {
            "conv1.w": he((hidden, in_channels) + ks, in_channels * kernel ** ndim),
            "conv1.b": np.zeros(hidden, self.dtype),
            "conv2.w": he((hidden, hidden) + ks, hidden * kernel ** ndim),
            "conv2.b": np.zeros(hidden, self.dtype),
            "head.w": he((n_classes, hidden) + (1,) * ndim, hidden) * self.dtype.type(0.5),
            "head.b": np.zeros(n_classes, self.dtype),
        }
        if fg_prior is not None:
            if not 0 < fg_prior * (n_classes - 1) < 1:
                raise ContractError(f"fg_prior {fg_prior} leaves no mass for channel 0")
            bg = 1.0 - fg_prior * (n_classes - 1)
            self.params["head.b"][1:] = np.log(fg_prior / bg)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def astype(self, dtype) -> "TinyNet":
        net = TinyNet.__new__(TinyNet)
        net.__dict__.update(self.__dict__)
        net.dtype = np.dtype(dtype)
        net.params = {k: v.astype(dtype) for k, v in self.params.items()}
        net.version = 0
        return net

    def set_params(self, params: dict):
        for name in PARAM_NAMES:
            if params[name].shape != self.params[name].shape:
                raise ContractError(f"{name}: shape {params[name].shape} "
                                    f"!= {self.params[name].shape}")
            self.params[name] = np.asarray(params[name], dtype=self.dtype)
        self.version += 1

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != self.ndim + 2 or x.shape[1] != self.in_channels:
            raise ContractError(
                f"expected input (B, {self.in_channels}, {self.ndim} spatial dims), got {x.shape}")
        P = self.params
        xc = np.ascontiguousarray(x.swapaxes(0, 1))
        h1, cols1 = conv_forward(xc, P["conv1.w"], P["conv1.b"])
        a1 = np.maximum(h1, 0)
        h2, cols2 = conv_forward(a1, P["conv2.w"], P["conv2.b"])
        a2 = np.maximum(h2, 0)
        logits, _ = conv_forward(a2, P["head.w"], P["head.b"])
        return logits.swapaxes(0, 1), Cache(xc.shape, cols1, a1, cols2, a2, self.version)

    def backward(self, cache: Cache, grad_logits) -> dict:
        if cache.version != self.version:
            raise ContractError("stale activation cache: parameters changed since forward")
        P = self.params
        g = np.asarray(grad_logits, dtype=self.dtype)
        if g.shape[0] != cache.x_shape[1] or g.shape[1] != self.n_classes:
            raise ContractError(f"grad_logits shape {g.shape} does not match cache")
        g = np.ascontiguousarray(g.swapaxes(0, 1))
        grads = {}
        a2 = cache.a2
        ga2, grads["head.w"], grads["head.b"] = conv_backward(
            g, a2.reshape(a2.shape[0], -1), P["head.w"], a2.shape)
        gh2 = ga2 * (a2 > 0)
        ga1, grads["conv2.w"], grads["conv2.b"] = conv_backward(
            gh2, cache.cols2, P["conv2.w"], cache.a1.shape)
        gh1 = ga1 * (cache.a1 > 0)
        _, grads["conv1.w"], grads["conv1.b"] = conv_backward(
            gh1, cache.cols1, P["conv1.w"], cache.x_shape, need_input=False)
        return {k: grads[k].astype(self.dtype) for k in PARAM_NAMES}

    def predict(self, x):
        logits, _ = self.forward(x)
        return logits.argmax(axis=1)
