"""Numeric conventions shared across modules.

Everything model-side runs in float64 on CPU: the gradient and
bijectivity tolerances this package promises are not reachable in
float32, and the graphs involved are small enough that speed is not a
concern.
"""

from __future__ import annotations

import math

import numpy as np
import torch

DTYPE = torch.float64

# Floor applied to every variance this package produces.
VAR_FLOOR = 1e-6

# Probabilities inside log() are clamped to [PROB_FLOOR, 1 - PROB_FLOOR].
PROB_FLOOR = 1e-7


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Derive n independent child seeds from a run seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def softplus_inv(y: float) -> float:
    """Inverse of softplus for positive y; used to bias heads toward a target."""
    return math.log(math.expm1(y))


def check_finite(tensor: torch.Tensor, where: str) -> torch.Tensor:
    from .errors import NumericError

    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite values produced by {where}")
    return tensor


def perturb_parameters(module: torch.nn.Module, scale: float, generator: torch.Generator) -> None:
    """Add Gaussian noise to every parameter (used to exercise non-trivial maps)."""
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, dtype=p.dtype, generator=generator) * scale)
