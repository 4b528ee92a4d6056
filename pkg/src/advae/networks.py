"""Shared convolutional building blocks and parameter plumbing."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import CheckpointFormatError, ConfigurationError

LEAKY_SLOPE = 0.01
BN_EPS = 1e-4


def num_blocks_for(image_size: int) -> int:
    """Stride-2 blocks needed to reach a 4x4 map."""
    if image_size < 8:
        raise ConfigurationError(f"image_size must be a power of two >= 8, got {image_size}")
    n = int(round(math.log2(image_size))) - 2
    if n < 1 or 2 ** (n + 2) != image_size:
        raise ConfigurationError(f"image_size must be a power of two >= 8, got {image_size}")
    return n


def conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1),
        nn.BatchNorm2d(out_ch, eps=BN_EPS),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


def upsample_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch, eps=BN_EPS),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvTrunk(nn.Module):
    """Stack of stride-2 conv blocks, 3 -> base -> 2*base -> ... down to 4x4."""

    def __init__(self, image_size: int, base_channels: int):
        super().__init__()
        n = num_blocks_for(image_size)
        chans = [3] + [base_channels * 2**i for i in range(n)]
        self.blocks = nn.ModuleList(conv_block(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.out_channels = chans[-1]

    def forward(self, x: torch.Tensor, tap: str | None = None) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x)
            if tap == f"block{i + 1}":
                return x
        if tap is not None:
            raise ConfigurationError(f"unknown tap layer {tap!r}")
        return x


def module_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    """state_dict as plain numpy arrays (params and buffers, stable order)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) - set(tensors)
    extra = {k for k in tensors if not k.startswith("optim/")} - set(state)
    if missing or extra:
        raise CheckpointFormatError(
            f"tensor directory mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    loaded = {}
    for name, ref in state.items():
        arr = np.asarray(tensors[name])
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointFormatError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, model {tuple(ref.shape)}"
            )
        loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(loaded)


def parameter_checksum(module: nn.Module) -> str:
    """Order-stable digest over all parameters and buffers."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
