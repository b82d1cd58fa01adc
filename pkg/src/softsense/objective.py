"""ELBO terms, the reparameterized dataset estimator, and training loss.

The dataset estimator follows the per-unit structure of the training
objective: one reparameterized context draw per unit, per-point terms for
unlabeled and labeled data, an analytic context KL, and an optional
weighted labeled log-likelihood term for the y-encoder.

Noise-draw protocol (fixed so that estimates are reproducible,
independently recomputable from the same seed, and invariant to unit
order): one 63-bit root is drawn from the caller's generator, and each
unit gets its own stream seeded by (root, crc32(unit_id)).  From its
stream a unit draws, in order,

    eps_c   ~ N(0, I_K)                    # one context draw
    eps_y   ~ N(0, 1) of shape (S, n_u, Dy)
    eps_z_u ~ N(0, 1) of shape (S, n_u, D)
    eps_z_l ~ N(0, 1) of shape (S, n_l, D)

where S is the Monte-Carlo sample count.  Per-point terms are averaged
over the S draws; the context draw is shared by all points of the unit.
Because unit streams are independent, estimation of disjoint units can
run in parallel and be summed.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MultiUnitDataset
from .model import LOG_2PI, ContextPosterior, GaussianDiag, SsmtlModel


class Normalization(str, Enum):
    """How the per-unit sums are combined into the training objective."""

    TOTAL_COUNT = "total_count"   # ELBO / N  +  alpha * aug / N_labeled
    PER_UNIT = "per_unit"         # mean over units of per-unit-normalized terms
    RAW = "raw"                   # plain sums, no scaling


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 1.0
    beta: Optional[float] = None
    mc_samples: int = 5
    normalization: Normalization = Normalization.TOTAL_COUNT

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class ElboBreakdown:
    """Raw per-part sums plus the configured weighted combination.

    Parts are graph-carrying scalars so the negated total can be
    backpropagated.  ``aug_likelihood_term`` is the unweighted sum of unit
    y-encoder log-likelihood sums, except in beta mode where the per-unit
    weights alpha_i are baked in.
    """

    unlabeled_term: Tensor
    labeled_term: Tensor
    kl_context_term: Tensor
    aug_likelihood_term: Tensor
    total: Tensor
    config: ObjectiveConfig
    n_train: int = 0
    n_labeled: int = 0

    def floats(self) -> dict[str, float]:
        return {
            "unlabeled_term": self.unlabeled_term.item(),
            "labeled_term": self.labeled_term.item(),
            "kl_context_term": self.kl_context_term.item(),
            "aug_likelihood_term": self.aug_likelihood_term.item(),
            "total": self.total.item(),
        }


# -- closed-form pieces ----------------------------------------------------

def kl_standard_normal(m: Tensor, log_s: Tensor) -> Tensor:
    """KL( N(m, diag(s^2)) || N(0, I) ) = 1/2 sum(m^2 + s^2 - 1 - 2 log s)."""
    s2 = ad.square(ad.exp(log_s))
    inner = ad.sub(ad.sub(ad.add(ad.square(m), s2), 1.0), ad.mul(log_s, 2.0))
    return ad.mul(ad.sum_(inner), 0.5)


def kl_diag_normal_vs_standard(m, s) -> float:
    m = np.asarray(m, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if (s <= 0).any():
        raise ValueError("std must be strictly positive")
    return float(0.5 * np.sum(m * m + s * s - 1.0 - 2.0 * np.log(s)))


def standard_normal_logprob(value: Tensor) -> Tensor:
    """Per-row log N(value; 0, I), summed over the trailing dimension."""
    point = ad.mul(ad.add(ad.square(value), LOG_2PI), -0.5)
    return ad.sum_(point, axis=point.data.ndim - 1)


# -- per-row ELBO terms (shared by the point ops and the estimator) ---------

def _unlabeled_rows(model: SsmtlModel, x: Tensor, c_rows: Tensor,
                    eps_y: np.ndarray, eps_z: np.ndarray) -> Tensor:
    q_y = model.encode_y(x, c_rows)
    y_t = q_y.sample(eps_y)
    q_z = model.encode_z(x, y_t, c_rows)
    z_t = q_z.sample(eps_z)
    joint = model.decode(z_t, c_rows)
    px, py = model.split_xy(joint)
    return ad.sub(
        ad.add(ad.add(px.log_prob(x), py.log_prob(y_t)), standard_normal_logprob(z_t)),
        ad.add(q_y.log_prob(y_t), q_z.log_prob(z_t)))


def _labeled_rows(model: SsmtlModel, x: Tensor, y: Tensor, c_rows: Tensor,
                  eps_z: np.ndarray) -> Tensor:
    q_z = model.encode_z(x, y, c_rows)
    z_t = q_z.sample(eps_z)
    joint = model.decode(z_t, c_rows)
    px, py = model.split_xy(joint)
    return ad.sub(
        ad.add(ad.add(px.log_prob(x), py.log_prob(y)), standard_normal_logprob(z_t)),
        q_z.log_prob(z_t))


def elbo_unlabeled_point(model: SsmtlModel, x, c_tilde,
                         rng: np.random.Generator) -> float:
    """One-sample term for an unlabeled point given a sampled context."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = ad.as_tensor(np.atleast_2d(np.asarray(
        c_tilde.data if isinstance(c_tilde, Tensor) else c_tilde, dtype=np.float64)))
    eps_y = rng.standard_normal((1, model.dims.y))
    eps_z = rng.standard_normal((1, model.dims.latent))
    return _unlabeled_rows(model, ad.as_tensor(x), c, eps_y, eps_z).item()


def elbo_labeled_point(model: SsmtlModel, x, y, c_tilde,
                       rng: np.random.Generator) -> float:
    """One-sample term for a labeled point given a sampled context."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    c = ad.as_tensor(np.atleast_2d(np.asarray(
        c_tilde.data if isinstance(c_tilde, Tensor) else c_tilde, dtype=np.float64)))
    eps_z = rng.standard_normal((1, model.dims.latent))
    return _labeled_rows(model, ad.as_tensor(x), ad.as_tensor(y), c, eps_z).item()


# -- dataset estimator --------------------------------------------------------

def unit_noise_stream(root: int, unit_id: str) -> np.random.Generator:
    """The per-unit noise stream of the documented draw protocol."""
    return np.random.default_rng(
        np.random.SeedSequence([int(root), zlib.crc32(unit_id.encode())]))


def sgvb_dataset_estimate(model: SsmtlModel, dataset: MultiUnitDataset,
                          config: ObjectiveConfig,
                          rng: np.random.Generator) -> ElboBreakdown:
    """Reparameterized estimate of the (augmented) objective over a dataset.

    See the module docstring for the noise-draw protocol.  Raises KeyError
    for units without a registered context posterior.
    """
    dims = model.dims
    S = config.mc_samples
    zero = Tensor(0.0)
    root = int(rng.integers(2 ** 63))

    unit_unlab, unit_lab, unit_kl, unit_aug = [], [], [], []
    unit_nl, unit_nu = [], []
    for u in dataset.units:
        post = model.context(u.unit_id)
        urng = unit_noise_stream(root, u.unit_id)
        eps_c = urng.standard_normal(dims.context)
        c_tilde = post.dist().sample(eps_c.reshape(1, -1))
        n_u, n_l = u.n_unlabeled, u.n_labeled
        eps_y = urng.standard_normal((S, n_u, dims.y))
        eps_z_u = urng.standard_normal((S, n_u, dims.latent))
        eps_z_l = urng.standard_normal((S, n_l, dims.latent))

        if n_u:
            x_rep = ad.as_tensor(np.tile(u.x_unlabeled, (S, 1)))
            c_rows = ad.repeat_rows(c_tilde, S * n_u)
            rows = _unlabeled_rows(model, x_rep, c_rows,
                                   eps_y.reshape(S * n_u, dims.y),
                                   eps_z_u.reshape(S * n_u, dims.latent))
            unit_unlab.append(ad.mul(ad.sum_(rows), 1.0 / S))
        else:
            unit_unlab.append(zero)

        if n_l:
            x_rep = ad.as_tensor(np.tile(u.x_labeled, (S, 1)))
            y_rep = ad.as_tensor(np.tile(u.y_labeled, (S, 1)))
            c_rows = ad.repeat_rows(c_tilde, S * n_l)
            rows = _labeled_rows(model, x_rep, y_rep, c_rows,
                                 eps_z_l.reshape(S * n_l, dims.latent))
            unit_lab.append(ad.mul(ad.sum_(rows), 1.0 / S))
            # augmented term: same context draw, no inner sampling
            c_rows1 = ad.repeat_rows(c_tilde, n_l)
            q_y = model.encode_y(ad.as_tensor(u.x_labeled), c_rows1)
            unit_aug.append(ad.sum_(q_y.log_prob(u.y_labeled)))
        else:
            unit_lab.append(zero)
            unit_aug.append(zero)

        unit_kl.append(kl_standard_normal(post.m, post.log_s))
        unit_nl.append(n_l)
        unit_nu.append(n_u)

    return _combine(unit_unlab, unit_lab, unit_kl, unit_aug,
                    unit_nl, unit_nu, config)


def _combine(unit_unlab, unit_lab, unit_kl, unit_aug, unit_nl, unit_nu,
             config: ObjectiveConfig) -> ElboBreakdown:
    n_labeled = sum(unit_nl)
    n_train = n_labeled + sum(unit_nu)
    unlab = _tsum(unit_unlab)
    lab = _tsum(unit_lab)
    kl = _tsum(unit_kl)

    if config.beta is not None:
        # per-unit weights alpha_i = beta * (N_i^l + N_i^u) / N_i^l folded
        # into each unit's ELBO before normalization
        weighted = [ad.mul(a, config.beta * (nl + nu) / nl) if nl else a
                    for a, nl, nu in zip(unit_aug, unit_nl, unit_nu)]
        aug = _tsum(weighted)
        unit_elbos = [ad.sub(ad.add(ad.add(uu, ul), wa), k)
                      for uu, ul, wa, k in zip(unit_unlab, unit_lab, weighted, unit_kl)]
        if config.normalization is Normalization.TOTAL_COUNT:
            total = ad.mul(_tsum(unit_elbos), 1.0 / n_train)
        elif config.normalization is Normalization.PER_UNIT:
            scaled = [ad.mul(e, 1.0 / (nl + nu))
                      for e, nl, nu in zip(unit_elbos, unit_nl, unit_nu)]
            total = ad.mul(_tsum(scaled), 1.0 / len(unit_elbos))
        else:
            total = _tsum(unit_elbos)
    else:
        aug = _tsum(unit_aug)
        if config.normalization is Normalization.TOTAL_COUNT:
            total = ad.mul(ad.sub(ad.add(unlab, lab), kl), 1.0 / n_train)
            if n_labeled and config.alpha:
                total = ad.add(total, ad.mul(aug, config.alpha / n_labeled))
        elif config.normalization is Normalization.PER_UNIT:
            parts = []
            for uu, ul, k, a, nl, nu in zip(unit_unlab, unit_lab, unit_kl,
                                            unit_aug, unit_nl, unit_nu):
                term = ad.mul(ad.sub(ad.add(uu, ul), k), 1.0 / (nl + nu))
                if nl and config.alpha:
                    term = ad.add(term, ad.mul(a, config.alpha / nl))
                parts.append(term)
            total = ad.mul(_tsum(parts), 1.0 / len(parts))
        else:
            total = ad.sub(ad.add(unlab, lab), kl)
            if config.alpha:
                total = ad.add(total, ad.mul(aug, config.alpha))

    return ElboBreakdown(
        unlabeled_term=unlab, labeled_term=lab, kl_context_term=kl,
        aug_likelihood_term=aug, total=total, config=config,
        n_train=n_train, n_labeled=n_labeled)


def _tsum(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return total


def loss_for_training(breakdown: ElboBreakdown) -> Tensor:
    """Negated objective; minimizing it maximizes the estimate."""
    return ad.neg(breakdown.total)
