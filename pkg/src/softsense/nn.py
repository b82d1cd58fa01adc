"""Feed-forward networks, initialization, optimizers, and parameter I/O."""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

LOG_STD_BOUND = 7.0


class Mlp:
    """Fully-connected network with ReLU hidden layers and identity output."""

    def __init__(self, widths: Sequence[int], weights: list[Tensor], biases: list[Tensor]):
        self.widths = list(widths)
        self.weights = weights
        self.biases = biases

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise ad.ShapeError(
                f"input width {x.shape[-1]} does not match first layer width {self.in_width}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        return h

    __call__ = forward


def he_init(widths: Sequence[int], seed: int) -> Mlp:
    """Build an Mlp with weights from N(0, 2/fan_in) and zero biases."""
    if len(widths) < 2:
        raise ValueError("he_init needs at least input and output widths")
    if any(w <= 0 for w in widths):
        raise ValueError(f"all layer widths must be positive, got {list(widths)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(Tensor(rng.standard_normal((fan_in, fan_out)) * std,
                              requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(widths, weights, biases)


class GaussianHead:
    """Mlp whose 2d-wide output is split into a mean and a clamped log-std.

    The log-std half is clamped to [-LOG_STD_BOUND, LOG_STD_BOUND] before
    exponentiation, so the produced std is always positive and finite.
    """

    def __init__(self, net: Mlp, out_dim: int):
        if net.out_width != 2 * out_dim:
            raise ad.ShapeError(
                f"head for dimension {out_dim} needs net output width {2 * out_dim}, "
                f"got {net.out_width}")
        self.net = net
        self.out_dim = out_dim

    def params(self) -> list[Tensor]:
        return self.net.params()

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.net.forward(x)
        mean = ad.slice_cols(raw, 0, self.out_dim)
        log_std = ad.clip(ad.slice_cols(raw, self.out_dim, 2 * self.out_dim),
                          -LOG_STD_BOUND, LOG_STD_BOUND)
        return mean, log_std

    __call__ = forward


class AdamState:
    """First/second moment buffers for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, params: Sequence[Tensor],
              grads: Sequence[np.ndarray]) -> bool:
    """Apply one bias-corrected Adam update in place.

    Returns False (and leaves parameters untouched) if any gradient is
    non-finite.
    """
    if list(params) != state.params:
        raise ValueError("adam_step called with a different parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            log.warning("adam_step skipped: non-finite gradient")
            return False
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(state.params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        p.data -= lr * g


def collect_grads(params: Sequence[Tensor]) -> list[np.ndarray]:
    out = []
    for p in params:
        out.append(p.grad if p.grad is not None else np.zeros_like(p.data))
    return out


# -- checkpoint container --------------------------------------------------
#
# Checkpoints are .npz archives mapping flat string names to float64 arrays
# (plus unicode arrays for identifiers).  float64 payloads round-trip
# bit-exactly.

def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    np.savez(path, **arrays)


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as f:
        return {k: f[k] for k in f.files}


def mlp_to_arrays(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    out = {f"{prefix}.widths": np.asarray(net.widths, dtype=np.int64)}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w.data
        out[f"{prefix}.b{i}"] = b.data
    return out


def mlp_from_arrays(prefix: str, arrays: dict[str, np.ndarray]) -> Mlp:
    widths = [int(w) for w in arrays[f"{prefix}.widths"]]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        weights.append(Tensor(arrays[f"{prefix}.w{i}"].copy(), requires_grad=True))
        biases.append(Tensor(arrays[f"{prefix}.b{i}"].copy(), requires_grad=True))
    return Mlp(widths, weights, biases)
