"""softsense: semi-supervised multi-task latent variable models for
multi-unit soft sensing, with baselines, a synthetic well simulator, and
closed-form least-squares oracles."""

from . import autodiff, baselines, data, experiments, model, nn, objective, wellsim

__all__ = ["autodiff", "baselines", "data", "experiments", "model", "nn",
           "objective", "wellsim"]

__version__ = "0.1.0"
