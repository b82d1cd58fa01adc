"""Baseline models: discriminative multi-task regression and per-unit
kernel ridge regression.

The multi-task baseline models y ~ N(f(x, c_i), sigma^2) with a network f
shared across units, a shared scalar noise level, and a per-unit context
posterior regularized toward the standard-normal prior.  The single-task
baseline fits an independent RBF kernel ridge regressor per unit on its
labeled data only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import MultiUnitDataset
from .model import ContextPosterior, GaussianDiag
from .objective import kl_standard_normal

log = logging.getLogger(__name__)

DEFAULT_GAMMA_GRID = (0.01, 0.1, 1.0, 10.0)
DEFAULT_LAMBDA_GRID = (1e-4, 1e-2, 1.0)


class MtlModel:
    """Shared regression network with per-unit latent context vectors."""

    def __init__(self, f: nn.Mlp, context_dim: int,
                 contexts: Optional[dict[str, ContextPosterior]] = None,
                 log_sigma: Optional[Tensor] = None):
        self.f = f
        self.context_dim = context_dim
        self.contexts: dict[str, ContextPosterior] = contexts or {}
        self.log_sigma = log_sigma if log_sigma is not None else Tensor(
            np.zeros(1), requires_grad=True)

    @classmethod
    def build(cls, dx: int, dy: int, context_dim: int,
              hidden: tuple[int, ...] = (200, 200), seed: int = 0) -> "MtlModel":
        f = nn.he_init([dx + context_dim] + list(hidden) + [dy], seed)
        return cls(f, context_dim)

    def add_unit(self, unit_id: str, init_std: float = 0.5) -> ContextPosterior:
        if unit_id in self.contexts:
            raise KeyError(f"unit {unit_id!r} already registered")
        if self.context_dim == 0:
            post = ContextPosterior(np.zeros(0), np.zeros(0))
        else:
            post = ContextPosterior.fresh(self.context_dim, init_std=init_std)
        self.contexts[unit_id] = post
        return post

    def network_params(self) -> list[Tensor]:
        return self.f.params() + [self.log_sigma]

    def context_params(self) -> list[Tensor]:
        out = []
        for post in self.contexts.values():
            out.extend(post.params())
        return out

    def params(self) -> list[Tensor]:
        return self.network_params() + self.context_params()

    def predict_y(self, x, unit_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Mean prediction at the context posterior mean, plus the shared std."""
        post = self.contexts[unit_id]
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with ad.no_grad():
            inp = ad.concat([ad.as_tensor(x), ad.repeat_rows(post.m, x.shape[0])],
                            axis=1) if self.context_dim else ad.as_tensor(x)
            mean = self.f.forward(inp).data.copy()
        sigma = float(np.exp(self.log_sigma.data[0]))
        return mean, np.full_like(mean, sigma)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"kind": np.asarray("mtl"),
                  "context_dim": np.asarray([self.context_dim], dtype=np.int64),
                  "log_sigma": self.log_sigma.data}
        arrays.update(nn.mlp_to_arrays("f", self.f))
        ids = sorted(self.contexts)
        arrays["context.ids"] = np.asarray(ids)
        k = self.context_dim
        arrays["context.mean"] = np.stack(
            [self.contexts[i].m.data for i in ids]) if ids else np.zeros((0, k))
        arrays["context.log_std"] = np.stack(
            [self.contexts[i].log_s.data for i in ids]) if ids else np.zeros((0, k))
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "MtlModel":
        if str(arrays["kind"]) != "mtl":
            raise ValueError(f"not an mtl checkpoint: kind={arrays['kind']}")
        model = cls(nn.mlp_from_arrays("f", arrays),
                    int(arrays["context_dim"][0]),
                    log_sigma=Tensor(arrays["log_sigma"].copy(), requires_grad=True))
        for i, unit_id in enumerate(arrays["context.ids"]):
            model.contexts[str(unit_id)] = ContextPosterior(
                arrays["context.mean"][i].copy(), arrays["context.log_std"][i].copy())
        return model


def mtl_loss(model: MtlModel, dataset: MultiUnitDataset,
             rng: np.random.Generator) -> Tensor:
    """Negative reparameterized log-likelihood plus context KL, over labeled
    data only, normalized by the labeled count."""
    n_labeled = dataset.n_labeled
    if n_labeled == 0:
        raise ValueError("mtl_loss needs at least one labeled pair")
    log_sigma = ad.reshape(model.log_sigma, (1, 1))
    parts = []
    for u in dataset.units:
        post = model.contexts[u.unit_id]
        if u.n_labeled == 0:
            parts.append(kl_standard_normal(post.m, post.log_s))
            continue
        x = ad.as_tensor(u.x_labeled)
        if model.context_dim:
            eps = rng.standard_normal(model.context_dim)
            c_tilde = post.dist().sample(eps.reshape(1, -1))
            inp = ad.concat([x, ad.repeat_rows(c_tilde, u.n_labeled)], axis=1)
        else:
            inp = x
        mean = model.f.forward(inp)
        dist = GaussianDiag(mean, ad.repeat_rows(log_sigma, u.n_labeled))
        ll = ad.sum_(dist.log_prob(u.y_labeled))
        parts.append(ad.sub(kl_standard_normal(post.m, post.log_s), ll))
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.mul(total, 1.0 / n_labeled)


# -- single-task kernel ridge ------------------------------------------------

class StlError(ValueError):
    pass


@dataclass
class StlModel:
    """RBF kernel ridge regressor: alpha = (G + lambda I)^-1 y."""

    support_x: np.ndarray
    duals: np.ndarray
    gamma: float
    lam: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = _rbf_kernel(x, self.support_x, self.gamma)
        return k @ self.duals


def _rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * a @ b.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


def stl_fit(x: np.ndarray, y: np.ndarray, gamma: float, lam: float) -> StlModel:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    if x.shape[0] < 1:
        raise StlError("stl_fit needs at least one labeled pair")
    g = _rbf_kernel(x, x, gamma)
    system = g + lam * np.eye(x.shape[0])
    try:
        duals = np.linalg.solve(system, y)
    except np.linalg.LinAlgError:
        raise StlError(
            "singular kernel system (duplicate points with lambda=0?); "
            "use lambda > 0") from None
    if not np.all(np.isfinite(duals)):
        raise StlError("kernel solve produced non-finite duals; use lambda > 0")
    return StlModel(support_x=x.copy(), duals=duals, gamma=gamma, lam=lam)


def stl_hyperparam_search(x: np.ndarray, y: np.ndarray,
                          gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
                          lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                          validation_fraction: float = 0.25,
                          seed: int = 0) -> tuple[float, float]:
    """Grid search minimizing validation MSE on a seeded random split.

    Falls back to mid-grid defaults with a warning when there are too few
    points to hold out a validation set.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    n = x.shape[0]
    if n < 4:
        gamma, lam = gamma_grid[len(gamma_grid) // 2], lambda_grid[len(lambda_grid) // 2]
        log.warning("stl_hyperparam_search: only %d points, using defaults "
                    "gamma=%g lambda=%g", n, gamma, lam)
        return gamma, lam
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(math.floor(validation_fraction * n)))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    best = None
    for gamma in gamma_grid:
        for lam in lambda_grid:
            try:
                m = stl_fit(x[fit_idx], y[fit_idx], gamma, lam)
            except StlError:
                continue
            mse = float(np.mean((m.predict(x[val_idx]) - y[val_idx]) ** 2))
            if best is None or mse < best[0]:
                best = (mse, gamma, lam)
    if best is None:
        raise StlError("no grid cell produced a solvable system")
    return best[1], best[2]


def stl_to_arrays(models: dict[str, StlModel]) -> dict[str, np.ndarray]:
    arrays = {"kind": np.asarray("stl"),
              "unit.ids": np.asarray(sorted(models))}
    for unit_id in sorted(models):
        m = models[unit_id]
        arrays[f"{unit_id}.support_x"] = m.support_x
        arrays[f"{unit_id}.duals"] = m.duals
        arrays[f"{unit_id}.hyper"] = np.asarray([m.gamma, m.lam])
    return arrays


def stl_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, StlModel]:
    if str(arrays["kind"]) != "stl":
        raise ValueError(f"not an stl checkpoint: kind={arrays['kind']}")
    models = {}
    for unit_id in arrays["unit.ids"]:
        unit_id = str(unit_id)
        gamma, lam = arrays[f"{unit_id}.hyper"]
        models[unit_id] = StlModel(arrays[f"{unit_id}.support_x"].copy(),
                                   arrays[f"{unit_id}.duals"].copy(),
                                   float(gamma), float(lam))
    return models
