"""Loss components: perceptual reconstruction, conditional classification,
closed-form KL against the unit Gaussian, and the weighted total.

Every component is mean-reduced within itself so the weights stay
meaningful across image and feature sizes; absolute loss scales are
therefore not comparable to sum-reduced conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .classifiers import AttributeClassifier, ExpressionClassifier
from .errors import NumericError, ShapeError


class FeatureExtractor:
    """Frozen feature map used by the perceptual loss.

    Backed by the attribute classifier's conv trunk; the tap names which
    block's activation defines the feature space. Gradients flow through
    the input only, never into the extractor's parameters.
    """

    def __init__(self, trunk_owner, tap_layer: str = "block2"):
        self.module = trunk_owner
        self.tap_layer = tap_layer
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_attribute_classifier(
        cls, model: AttributeClassifier, tap_layer: str = "block2"
    ) -> "FeatureExtractor":
        return cls(model, tap_layer)

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        self.module.eval()
        return self.module.features(x, tap=self.tap_layer)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1e-4
    gamma: float = 1e-4

    def validate(self) -> None:
        vals = (self.alpha, self.beta, self.gamma)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise NumericError(f"loss weights must be finite and non-negative, got {vals}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(alpha=float(d["alpha"]), beta=float(d["beta"]), gamma=float(d["gamma"]))


@dataclass
class LossBreakdown:
    reconstruction: float
    conditional: float
    kl: float
    total: float

    def to_dict(self) -> dict:
        return {
            "reconstruction": self.reconstruction,
            "conditional": self.conditional,
            "kl": self.kl,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossBreakdown":
        return cls(
            reconstruction=float(d["reconstruction"]),
            conditional=float(d["conditional"]),
            kl=float(d["kl"]),
            total=float(d["total"]),
        )


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.asarray(x, dtype=np.float32))


def perceptual_loss(phi: FeatureExtractor, x, x_hat) -> torch.Tensor:
    """Mean squared feature-space distance between x and x_hat."""
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    f = phi.extract(x).detach()  # target side carries no gradient
    f_hat = phi.extract(x_hat)
    return ((f_hat - f) ** 2).mean()


def conditional_classification_loss(
    model_a: AttributeClassifier,
    model_e: ExpressionClassifier,
    y_target,
    x_hat,
) -> torch.Tensor:
    """BCE over attributes + NLL over the softmaxed expression + L2 on
    valence/arousal, each mean-reduced, summed. y_target rows follow the
    conditional layout [attributes | expression one-hot | valence, arousal].
    """
    x_hat = _as_tensor(x_hat)
    if x_hat.ndim == 3:
        x_hat = x_hat[None]
    y = _as_tensor(y_target)
    if y.ndim == 1:
        y = y[None]
    a = model_a.config.num_attributes
    e = model_e.config.num_expressions
    if y.shape[1] != a + e + 2:
        raise ShapeError(f"conditional rows of length {y.shape[1]}, expected {a + e + 2}")
    if y.shape[0] != x_hat.shape[0]:
        raise ShapeError("batch sizes of y_target and x_hat differ")
    s = model_a.config.image_size
    if x_hat.shape[1:] != (3, s, s):
        raise ShapeError(f"x_hat must be (N, 3, {s}, {s}), got {tuple(x_hat.shape)}")

    model_a.eval()
    model_e.eval()
    attr_logits = model_a(x_hat)
    expr_logits, va = model_e(x_hat)
    bce = F.binary_cross_entropy_with_logits(attr_logits, y[:, :a])
    nll = F.cross_entropy(expr_logits, y[:, a : a + e].argmax(dim=1))
    l2 = F.mse_loss(va, y[:, a + e :])
    return bce + nll + l2


def kl_loss(mu, log_var) -> torch.Tensor:
    """0.5 * sum(exp(log_var) + mu^2 - 1 - log_var), per image, batch-averaged."""
    mu, log_var = _as_tensor(mu), _as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"mu/log_var shapes differ: {tuple(mu.shape)} vs {tuple(log_var.shape)}")
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise NumericError("non-finite latent parameters in kl_loss")
    per_dim = torch.exp(log_var) + mu**2 - 1.0 - log_var
    if mu.ndim == 1:
        return 0.5 * per_dim.sum()
    return 0.5 * per_dim.sum(dim=1).mean()


def weighted_total(weights: LossWeights, reconstruction, conditional, kl) -> torch.Tensor:
    weights.validate()
    return (
        weights.alpha * _as_tensor(reconstruction)
        + weights.beta * _as_tensor(conditional)
        + weights.gamma * _as_tensor(kl)
    )


def _scalar(x) -> float:
    if isinstance(x, torch.Tensor):
        return float(x.detach())
    return float(x)


def total_loss(weights: LossWeights, reconstruction, conditional, kl) -> LossBreakdown:
    total = weighted_total(weights, reconstruction, conditional, kl)
    return LossBreakdown(
        reconstruction=_scalar(reconstruction),
        conditional=_scalar(conditional),
        kl=_scalar(kl),
        total=_scalar(total),
    )
