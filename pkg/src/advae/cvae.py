"""Conditional VAE: encoder to (mu, log_var), reparameterized sampling,
conditional concatenation, decoder back to image space.

Convention: the encoder's second head is a log-variance, so the sampling
std is exp(log_var / 2) and the KL term uses exp(log_var) directly.
The decoder input is [conditional, latent] in that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .conditional import EXPRESSIONS, ConditionalVector
from .errors import ConfigurationError, NumericError, ShapeError
from .labeling import ATTRIBUTE_NAMES
from .networks import ConvTrunk, init_weights, num_blocks_for, upsample_block
from .util import stable_seed


@dataclass
class CvaeConfig:
    image_size: int = 64
    latent_dim: int = 100
    conditional_length: int = len(ATTRIBUTE_NAMES) + len(EXPRESSIONS) + 2
    base_channels: int = 32

    def validate(self) -> None:
        num_blocks_for(self.image_size)
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if self.conditional_length < 1:
            raise ConfigurationError("conditional_length must be >= 1")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")

    @property
    def embedding_length(self) -> int:
        return self.conditional_length + self.latent_dim

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "latent_dim": self.latent_dim,
            "conditional_length": self.conditional_length,
            "base_channels": self.base_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvaeConfig":
        return cls(
            image_size=int(d["image_size"]),
            latent_dim=int(d["latent_dim"]),
            conditional_length=int(d["conditional_length"]),
            base_channels=int(d["base_channels"]),
        )


@dataclass
class LatentParams:
    mu: np.ndarray
    log_var: np.ndarray

    def validate(self) -> None:
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise ShapeError(f"mu/log_var must be equal-length vectors, got {self.mu.shape} / {self.log_var.shape}")
        if not (np.isfinite(self.mu).all() and np.isfinite(self.log_var).all()):
            raise NumericError("non-finite latent parameters")


@dataclass
class LatentSample:
    z: np.ndarray
    epsilon: np.ndarray


@dataclass
class Embedding:
    conditional: np.ndarray
    latent: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.conditional, self.latent]).astype(np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray, conditional_length: int) -> "Embedding":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 1 or len(arr) <= conditional_length:
            raise ShapeError(f"embedding array of length {arr.shape} cannot hold a {conditional_length}-long conditional segment")
        return cls(conditional=arr[:conditional_length].copy(), latent=arr[conditional_length:].copy())


class Encoder(nn.Module):
    def __init__(self, config: CvaeConfig):
        super().__init__()
        self.trunk = ConvTrunk(config.image_size, config.base_channels)
        flat = self.trunk.out_channels * 16  # 4x4 bottom map
        self.mu_head = nn.Linear(flat, config.latent_dim)
        self.log_var_head = nn.Linear(flat, config.latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(x).flatten(1)
        return self.mu_head(h), self.log_var_head(h)


class Decoder(nn.Module):
    def __init__(self, config: CvaeConfig):
        super().__init__()
        n = num_blocks_for(config.image_size)
        chans = [config.base_channels * 2 ** max(0, n - 1 - i) for i in range(n + 1)]
        self.top_channels = chans[0]
        self.fc = nn.Linear(config.embedding_length, self.top_channels * 16)
        self.blocks = nn.ModuleList(
            upsample_block(a, b) for a, b in zip(chans[:-1], chans[1:])
        )
        self.out = nn.Conv2d(chans[-1], 3, 3, padding=1)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        h = self.fc(q).view(q.shape[0], self.top_channels, 4, 4)
        for block in self.blocks:
            h = block(h)
        return torch.sigmoid(self.out(h))


class CvaeModel(nn.Module):
    def __init__(self, config: CvaeConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        init_weights(self)

    def forward(
        self, x: torch.Tensor, y: torch.Tensor, epsilon: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Training-path forward: returns (x_hat, mu, log_var, z)."""
        mu, log_var = self.encoder(x)
        z = mu + torch.exp(log_var / 2.0) * epsilon
        q = torch.cat([y, z], dim=1)  # conditional segment first
        return self.decoder(q), mu, log_var, z


def build_cvae(config: CvaeConfig, seed: int = 0) -> CvaeModel:
    torch.manual_seed(stable_seed("cvae-init", seed))
    model = CvaeModel(config)
    model.eval()
    return model


def _as_image_batch(model: CvaeModel, images: np.ndarray) -> torch.Tensor:
    images = np.asarray(images, dtype=np.float32)
    s = model.config.image_size
    if images.ndim != 4 or images.shape[1:] != (3, s, s):
        raise ShapeError(f"expected images (N, 3, {s}, {s}), got {tuple(images.shape)}")
    return torch.from_numpy(images)


def encode_batch(model: CvaeModel, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    with torch.no_grad():
        mu, log_var = model.encoder(_as_image_batch(model, images))
    mu, log_var = mu.numpy(), log_var.numpy()
    if not (np.isfinite(mu).all() and np.isfinite(log_var).all()):
        raise NumericError("encoder produced non-finite activations")
    return mu, log_var


def decode_batch(model: CvaeModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 2 or q.shape[1] != model.config.embedding_length:
        raise ShapeError(
            f"expected embeddings (N, {model.config.embedding_length}), got {tuple(q.shape)}"
        )
    model.eval()
    with torch.no_grad():
        out = model.decoder(torch.from_numpy(q)).numpy()
    return out


def encode(model: CvaeModel, image: np.ndarray) -> LatentParams:
    image = np.asarray(image, dtype=np.float32)
    s = model.config.image_size
    if image.shape != (3, s, s):
        raise ShapeError(f"expected image (3, {s}, {s}), got {tuple(image.shape)}")
    mu, log_var = encode_batch(model, image[None])
    params = LatentParams(mu=mu[0], log_var=log_var[0])
    params.validate()
    return params


def reparameterize(params: LatentParams, epsilon: np.ndarray) -> LatentSample:
    epsilon = np.asarray(epsilon, dtype=np.float32)
    if epsilon.shape != params.mu.shape:
        raise ShapeError(f"epsilon shape {epsilon.shape} does not match latent dim {params.mu.shape}")
    z = params.mu + np.exp(params.log_var / 2.0) * epsilon
    return LatentSample(z=z.astype(np.float32), epsilon=epsilon)


def embed(
    model: CvaeModel, image: np.ndarray, y: ConditionalVector, epsilon: np.ndarray | float = 0.0
) -> Embedding:
    if np.isscalar(epsilon):
        epsilon = np.full(model.config.latent_dim, float(epsilon), dtype=np.float32)
    y.validate()
    if y.length != model.config.conditional_length:
        raise ShapeError(
            f"conditional length {y.length} does not match model {model.config.conditional_length}"
        )
    sample = reparameterize(encode(model, image), epsilon)
    return Embedding(conditional=y.to_array(), latent=sample.z)


def decode(model: CvaeModel, q: Embedding) -> np.ndarray:
    return decode_batch(model, q.to_array()[None])[0]


def reconstruct(
    model: CvaeModel,
    image: np.ndarray,
    y_hat: ConditionalVector,
    epsilon: np.ndarray | float = 0.0,
) -> np.ndarray:
    return decode(model, embed(model, image, y_hat, epsilon))
