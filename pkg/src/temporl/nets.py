"""Small torch building blocks shared by the policy, value, and Q networks."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .core import RngStream


class MLP(nn.Module):
    """Plain feed-forward stack with Mish activations."""

    def __init__(self, in_dim: int, widths: tuple[int, ...], out_dim: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for w in widths:
            layers += [nn.Linear(prev, w), nn.Mish()]
            prev = w
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def init_params(module: nn.Module, rng: RngStream) -> None:
    """Deterministic fan-in uniform init, independent of torch's global RNG."""
    gen = rng.generator()
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            fan_in = int(np.prod(m.weight.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(
                    gen.uniform(-bound, bound, size=tuple(m.weight.shape))
                ).to(m.weight.dtype))
                if m.bias is not None:
                    m.bias.copy_(torch.from_numpy(
                        gen.uniform(-bound, bound, size=tuple(m.bias.shape))
                    ).to(m.bias.dtype))


def state_dict_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Named float32 parameter arrays for the checkpoint container."""
    return {
        f"{prefix}.{name}": t.detach().numpy().astype(np.float32)
        for name, t in module.state_dict().items()
    }


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {
        name[len(prefix) + 1:]: torch.from_numpy(np.ascontiguousarray(arr))
        for name, arr in arrays.items()
        if name.startswith(prefix + ".")
    }
    module.load_state_dict(state)
