"""Adam optimizer, written out explicitly so updates are auditable.

Standard update with bias correction; defaults beta1=0.9, beta2=0.999,
eps=1e-8. The functional `adam_step` mutates (param, m, v) in place; the
`Adam` class tracks state for a named parameter map and serializes it
for checkpoints.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import NumericError, ShapeError


def adam_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    m: torch.Tensor,
    v: torch.Tensor,
    step: int,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    name: str = "param",
) -> None:
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise ShapeError(f"adam_step: shape mismatch for {name}")
    if not torch.isfinite(grad).all():
        raise NumericError(f"non-finite gradient in tensor {name!r}")
    with torch.no_grad():
        m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        param.add_(m_hat / (v_hat.sqrt() + eps), alpha=-learning_rate)


class Adam:
    def __init__(
        self,
        named_params: dict[str, torch.Tensor],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(named_params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(
                p,
                p.grad,
                self.m[name],
                self.v[name],
                self.step_count,
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.eps,
                name=name,
            )

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"optim/{name}/m"] = self.m[name].detach().cpu().numpy().copy()
            out[f"optim/{name}/v"] = self.v[name].detach().cpu().numpy().copy()
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"optim/{name}/{slot}"
                if key not in tensors:
                    raise ShapeError(f"optimizer state missing tensor {key}")
                arr = np.asarray(tensors[key])
                if tuple(arr.shape) != tuple(p.shape):
                    raise ShapeError(f"optimizer state shape mismatch for {key}")
                store[name] = torch.from_numpy(arr.copy()).to(p.dtype)
        self.step_count = int(step_count)
