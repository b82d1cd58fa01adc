"""The semi-supervised multi-task latent variable model.

Generative side: standard-normal priors on a per-unit context vector c and a
per-observation latent state z, and a diagonal-Gaussian decoder producing the
joint (x, y) given (z, c).  Inference side: a y-encoder q(y | x, c), a
z-encoder q(z | x, y, c), and a free-form diagonal-Gaussian posterior over
each unit's context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelDims:
    """Latent and observed dimensions: context K, state D, input Dx, target Dy."""

    context: int
    latent: int
    x: int
    y: int

    def __post_init__(self):
        for name in ("context", "latent", "x", "y"):
            if getattr(self, name) < 1:
                raise ValueError(f"dimension {name!r} must be positive")

    @property
    def decoder_in(self) -> int:
        return self.latent + self.context

    @property
    def y_encoder_in(self) -> int:
        return self.x + self.context

    @property
    def z_encoder_in(self) -> int:
        return self.x + self.y + self.context


class GaussianDiag:
    """Diagonal Gaussian with batched mean/log-std tensors of shape (n, d)."""

    def __init__(self, mean: Tensor, log_std: Tensor):
        if mean.shape != log_std.shape:
            raise ad.ShapeError(
                f"mean shape {mean.shape} != log_std shape {log_std.shape}")
        self.mean = mean
        self.log_std = log_std
        self.std = ad.exp(log_std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, value) -> Tensor:
        """Per-row log-density, summed over the trailing dimension."""
        value = ad.as_tensor(value)
        z = ad.div(ad.sub(value, self.mean), self.std)
        point = ad.sub(ad.mul(ad.add(ad.square(z), LOG_2PI), -0.5), self.log_std)
        return ad.sum_(point, axis=point.data.ndim - 1)

    def sample(self, noise) -> Tensor:
        """Reparameterized draw mean + std * noise (gradient skips the noise)."""
        return ad.add(self.mean, ad.mul(self.std, ad.as_tensor(noise)))

    def slice(self, start: int, stop: int) -> "GaussianDiag":
        return GaussianDiag(ad.slice_cols(self.mean, start, stop),
                            ad.slice_cols(self.log_std, start, stop))


def log_prob_diag_normal(value, dist: GaussianDiag) -> float:
    """Log-density of a single vector under a diagonal Gaussian."""
    v = np.atleast_2d(np.asarray(value, dtype=np.float64))
    if (np.asarray(dist.std.data) <= 0).any():
        raise ValueError("non-positive std in diagonal Gaussian")
    with ad.no_grad():
        return dist.log_prob(v).item()


def reparam_sample(dist: GaussianDiag, noise) -> np.ndarray:
    """Value of mean + std * noise for a single vector."""
    n = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    with ad.no_grad():
        return dist.sample(n).data.reshape(np.asarray(noise).shape)


class ContextPosterior:
    """Free-form diagonal-Gaussian posterior over one unit's context vector."""

    def __init__(self, m: np.ndarray, log_s: np.ndarray, train_log_s: bool = True):
        self.m = Tensor(np.asarray(m, dtype=np.float64), requires_grad=True)
        self.log_s = Tensor(np.asarray(log_s, dtype=np.float64),
                            requires_grad=train_log_s)

    @classmethod
    def fresh(cls, k: int, init_std: float = 0.5) -> "ContextPosterior":
        return cls(np.zeros(k), np.full(k, math.log(init_std)))

    def params(self) -> list[Tensor]:
        if self.log_s.requires_grad:
            return [self.m, self.log_s]
        return [self.m]

    def dist(self) -> GaussianDiag:
        return GaussianDiag(ad.reshape(self.m, (1, -1)),
                            ad.reshape(self.log_s, (1, -1)))


class SsmtlModel:
    """Decoder, two encoders, and the per-unit context posterior table."""

    def __init__(self, dims: ModelDims, decoder: nn.GaussianHead,
                 y_encoder: nn.GaussianHead, z_encoder: nn.GaussianHead,
                 contexts: Optional[dict[str, ContextPosterior]] = None):
        self.dims = dims
        self.decoder = decoder
        self.y_encoder = y_encoder
        self.z_encoder = z_encoder
        self.contexts: dict[str, ContextPosterior] = contexts or {}

    @classmethod
    def build(cls, dims: ModelDims, hidden: tuple[int, ...] = (200, 200),
              seed: int = 0) -> "SsmtlModel":
        h = list(hidden)
        decoder = nn.GaussianHead(
            nn.he_init([dims.decoder_in] + h + [2 * (dims.x + dims.y)], seed),
            dims.x + dims.y)
        y_encoder = nn.GaussianHead(
            nn.he_init([dims.y_encoder_in] + h + [2 * dims.y], seed + 1), dims.y)
        z_encoder = nn.GaussianHead(
            nn.he_init([dims.z_encoder_in] + h + [2 * dims.latent], seed + 2),
            dims.latent)
        return cls(dims, decoder, y_encoder, z_encoder)

    # -- unit management -------------------------------------------------
    def add_unit(self, unit_id: str, init_std: float = 0.5) -> ContextPosterior:
        if unit_id in self.contexts:
            raise KeyError(f"unit {unit_id!r} already registered")
        post = ContextPosterior.fresh(self.dims.context, init_std=init_std)
        self.contexts[unit_id] = post
        return post

    def context(self, unit_id: str) -> ContextPosterior:
        try:
            return self.contexts[unit_id]
        except KeyError:
            raise KeyError(
                f"unknown unit {unit_id!r}; finetune the model to add units") from None

    def network_params(self) -> list[Tensor]:
        return (self.decoder.params() + self.y_encoder.params()
                + self.z_encoder.params())

    def context_params(self) -> list[Tensor]:
        out = []
        for post in self.contexts.values():
            out.extend(post.params())
        return out

    def params(self) -> list[Tensor]:
        return self.network_params() + self.context_params()

    # -- conditional distributions ----------------------------------------
    def encode_y(self, x: Tensor, c: Tensor) -> GaussianDiag:
        mean, log_std = self.y_encoder(ad.concat([x, c], axis=1))
        return GaussianDiag(mean, log_std)

    def encode_z(self, x: Tensor, y: Tensor, c: Tensor) -> GaussianDiag:
        mean, log_std = self.z_encoder(ad.concat([x, y, c], axis=1))
        return GaussianDiag(mean, log_std)

    def decode(self, z: Tensor, c: Tensor) -> GaussianDiag:
        """Joint diagonal Gaussian over (x, y); x and y are conditionally
        independent given (z, c) by the diagonal structure."""
        mean, log_std = self.decoder(ad.concat([z, c], axis=1))
        return GaussianDiag(mean, log_std)

    def split_xy(self, joint: GaussianDiag) -> tuple[GaussianDiag, GaussianDiag]:
        dx = self.dims.x
        return joint.slice(0, dx), joint.slice(dx, dx + self.dims.y)

    def sample_context(self, unit_id: str,
                       rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
        """Draw eps ~ N(0, I_K) and return (m + s * eps, eps)."""
        post = self.context(unit_id)
        eps = rng.standard_normal(self.dims.context)
        c_tilde = post.dist().sample(eps.reshape(1, -1))
        return c_tilde, eps

    # -- prediction --------------------------------------------------------
    def predict_y(self, x, unit_id: str, rng: Optional[np.random.Generator] = None,
                  n_samples: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and std of y for inputs x (one row per point).

        By default the context posterior mean is plugged in.  With
        ``n_samples`` > 0 the context is sampled that many times and the
        returned mean/std are averages over draws.
        """
        post = self.context(unit_id)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        with ad.no_grad():
            xt = Tensor(x)
            if n_samples <= 0:
                c_rows = ad.repeat_rows(post.m, n)
                dist = self.encode_y(xt, c_rows)
                return dist.mean.data.copy(), dist.std.data.copy()
            if rng is None:
                raise ValueError("sampling-based prediction needs an rng")
            means = np.zeros((n, self.dims.y))
            stds = np.zeros((n, self.dims.y))
            for _ in range(n_samples):
                eps = rng.standard_normal(self.dims.context)
                c = post.m.data + np.exp(post.log_s.data) * eps
                c_rows = ad.repeat_rows(Tensor(c), n)
                dist = self.encode_y(xt, c_rows)
                means += dist.mean.data
                stds += dist.std.data
            return means / n_samples, stds / n_samples

    # -- checkpointing -------------------------------------------------------
    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "kind": np.asarray("ssmtl"),
            "dims": np.asarray([self.dims.context, self.dims.latent,
                                self.dims.x, self.dims.y], dtype=np.int64),
        }
        arrays.update(nn.mlp_to_arrays("decoder", self.decoder.net))
        arrays.update(nn.mlp_to_arrays("y_encoder", self.y_encoder.net))
        arrays.update(nn.mlp_to_arrays("z_encoder", self.z_encoder.net))
        ids = sorted(self.contexts)
        arrays["context.ids"] = np.asarray(ids)
        arrays["context.mean"] = np.stack(
            [self.contexts[i].m.data for i in ids]) if ids else np.zeros((0, self.dims.context))
        arrays["context.log_std"] = np.stack(
            [self.contexts[i].log_s.data for i in ids]) if ids else np.zeros((0, self.dims.context))
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SsmtlModel":
        if str(arrays["kind"]) != "ssmtl":
            raise ValueError(f"not an ssmtl checkpoint: kind={arrays['kind']}")
        k, d, dx, dy = (int(v) for v in arrays["dims"])
        dims = ModelDims(context=k, latent=d, x=dx, y=dy)
        model = cls(
            dims,
            nn.GaussianHead(nn.mlp_from_arrays("decoder", arrays), dx + dy),
            nn.GaussianHead(nn.mlp_from_arrays("y_encoder", arrays), dy),
            nn.GaussianHead(nn.mlp_from_arrays("z_encoder", arrays), d),
        )
        for i, unit_id in enumerate(arrays["context.ids"]):
            model.contexts[str(unit_id)] = ContextPosterior(
                arrays["context.mean"][i].copy(), arrays["context.log_std"][i].copy())
        return model
