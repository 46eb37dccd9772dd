"""Deep-subspace decomposition and the bijective link between domains.

The deep user block is split into a stable latent (shared across domains
for paired users) and per-domain variant latents in (0, 1). A composed
flow of L bijective layers maps one domain's variant latent to the
other's, with exact forward/inverse maps and log-determinant accounting.

Four layer families implement the same contract: masked affine
autoregressive, sigmoidal autoregressive (numerically inverted),
fixed-step free-form ODE, and circular rational-quadratic splines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ContractError
from .numerics import DTYPE, check_finite

FLOW_KINDS = ("maf", "naf", "node", "ncsf")

_SCALE_CAP = 3.0  # soft cap on affine log-scales
_SLOPE_CAP = 2.0  # soft cap on sigmoidal-unit log-slopes
_DERIV_CAP = 2.0  # soft cap on spline knot log-derivatives
_BIN_MIX = 1e-3  # keeps spline bins away from zero width


def _capped_exp(raw: torch.Tensor, cap: float) -> torch.Tensor:
    """exp with a smooth symmetric bound on the exponent; identity at raw=0.

    Keeps every elementwise slope inside [e^-cap, e^cap] so a flow cannot
    inflate its log-determinant without bound during training."""
    return torch.exp(cap * torch.tanh(raw / cap))


def _init_linear(linear: nn.Linear, generator: torch.Generator, scale: float | None = None) -> None:
    fan_in = linear.weight.shape[1]
    std = scale if scale is not None else 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        linear.weight.copy_(torch.randn(linear.weight.shape, dtype=DTYPE, generator=generator) * std)
        if linear.bias is not None:
            linear.bias.zero_()


class BijectiveLayer(nn.Module):
    """One invertible map; both directions return per-sample log|det J|."""

    def forward_transform(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def inverse_transform(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError


class ElementwiseAffine(BijectiveLayer):
    """Fixed y = scale * z + shift; mostly a test and calibration aid."""

    def __init__(self, scale, shift, width: int):
        super().__init__()
        scale = torch.as_tensor(scale, dtype=DTYPE).expand(width).clone()
        shift = torch.as_tensor(shift, dtype=DTYPE).expand(width).clone()
        if (scale == 0).any():
            raise ContractError("affine scale must be nonzero")
        self.register_buffer("scale", scale)
        self.register_buffer("shift", shift)

    def forward_transform(self, z):
        logdet = torch.log(self.scale.abs()).sum().expand(z.shape[0])
        return z * self.scale + self.shift, logdet

    def inverse_transform(self, z):
        logdet = -torch.log(self.scale.abs()).sum().expand(z.shape[0])
        return (z - self.shift) / self.scale, logdet


class MaskedConditioner(nn.Module):
    """MADE-style conditioner: output block j depends only on inputs with
    strictly lower degree than dim j. The output layer starts at zero so
    every autoregressive layer begins as the identity map."""

    def __init__(self, width: int, params_per_dim: int, hidden: int, ordering: np.ndarray, generator):
        super().__init__()
        self.width = width
        self.params_per_dim = params_per_dim
        in_deg = torch.from_numpy(np.ascontiguousarray(ordering, dtype=np.int64))
        hid_deg = torch.arange(hidden) % max(width - 1, 1)
        mask_hidden = (hid_deg.unsqueeze(1) >= in_deg.unsqueeze(0)).to(DTYPE)
        out_deg = in_deg.repeat_interleave(params_per_dim)
        mask_out = (out_deg.unsqueeze(1) > hid_deg.unsqueeze(0)).to(DTYPE)
        self.register_buffer("mask_hidden", mask_hidden)
        self.register_buffer("mask_out", mask_out)
        self.lin_hidden = nn.Linear(width, hidden, dtype=DTYPE)
        self.lin_out = nn.Linear(hidden, width * params_per_dim, dtype=DTYPE)
        _init_linear(self.lin_hidden, generator)
        with torch.no_grad():
            self.lin_out.weight.zero_()
            self.lin_out.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(torch.nn.functional.linear(z, self.lin_hidden.weight * self.mask_hidden, self.lin_hidden.bias))
        out = torch.nn.functional.linear(h, self.lin_out.weight * self.mask_out, self.lin_out.bias)
        return out.reshape(z.shape[0], self.width, self.params_per_dim)


class AutoregressiveLayer(BijectiveLayer):
    """Shared wiring for the conditioner-driven layers; subclasses supply the
    per-dimension transform and its inverse."""

    params_per_dim: int = 2

    def __init__(self, width: int, hidden: int, ordering: np.ndarray, generator):
        super().__init__()
        self.width = width
        ordering = np.ascontiguousarray(ordering, dtype=np.int64)
        self.register_buffer("rank_to_dim", torch.from_numpy(np.argsort(ordering)))
        self.conditioner = MaskedConditioner(width, self.params_per_dim, hidden, ordering, generator)

    def _apply(self, params: torch.Tensor, z: torch.Tensor):
        raise NotImplementedError

    def _invert(self, params: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward_transform(self, z):
        params = self.conditioner(z)
        out, log_deriv = self._apply(params, z)
        return out, log_deriv.sum(-1)

    def inverse_transform(self, z):
        z = z.detach()
        with torch.no_grad():
            solved = torch.zeros_like(z)
            for rank in range(self.width):
                dim = int(self.rank_to_dim[rank])
                params = self.conditioner(solved)[:, dim, :]
                solved[:, dim] = self._invert(params, z[:, dim])
            _, log_deriv = self._apply(self.conditioner(solved), solved)
        return solved, -log_deriv.sum(-1)


class MaskedAffineLayer(AutoregressiveLayer):
    """Affine autoregressive transform with softly capped log-scales."""

    params_per_dim = 2

    def _split(self, params):
        shift = params[..., 0]
        log_scale = _SCALE_CAP * torch.tanh(params[..., 1] / _SCALE_CAP)
        return shift, log_scale

    def _apply(self, params, z):
        shift, log_scale = self._split(params)
        return z * torch.exp(log_scale) + shift, log_scale

    def _invert(self, params, target):
        shift, log_scale = self._split(params)
        return (target - shift) * torch.exp(-log_scale)


class SigmoidalLayer(AutoregressiveLayer):
    """Monotone mixture-of-sigmoids transform (logit of a convex combination).

    Forward map and derivative are evaluated in log space so arbitrarily
    large inputs stay finite; the inverse is a bisection solve, which the
    strict monotonicity of the map makes reliable.
    """

    def __init__(self, width, hidden, ordering, generator, units: int = 8):
        self.units = units
        self.params_per_dim = 3 * units
        super().__init__(width, hidden, ordering, generator)

    def _unit_params(self, params):
        raw_a, raw_b, raw_w = params.split(self.units, dim=-1)
        slope = _capped_exp(raw_a, _SLOPE_CAP)
        log_weight = torch.log_softmax(raw_w, dim=-1)
        return slope, raw_b, log_weight

    def _evaluate(self, params, z):
        slope, offset, log_weight = self._unit_params(params)
        pre = slope * z.unsqueeze(-1) + offset
        log_s = torch.logsumexp(log_weight - torch.nn.functional.softplus(-pre), dim=-1)
        log_1ms = torch.logsumexp(log_weight - torch.nn.functional.softplus(pre), dim=-1)
        out = log_s - log_1ms
        log_num = torch.logsumexp(
            log_weight
            + torch.log(slope)
            - torch.nn.functional.softplus(-pre)
            - torch.nn.functional.softplus(pre),
            dim=-1,
        )
        return out, log_num - log_s - log_1ms

    def _apply(self, params, z):
        return self._evaluate(params, z)

    def _invert(self, params, target):
        lo = torch.full_like(target, -16.0)
        hi = torch.full_like(target, 16.0)
        for _ in range(60):  # expand bracket until it straddles every target
            val_lo, _ = self._evaluate(params, lo)
            val_hi, _ = self._evaluate(params, hi)
            need_lo = val_lo > target
            need_hi = val_hi < target
            if not bool(need_lo.any() or need_hi.any()):
                break
            lo = torch.where(need_lo, lo * 2, lo)
            hi = torch.where(need_hi, hi * 2, hi)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            val, _ = self._evaluate(params, mid)
            go_right = val < target
            lo = torch.where(go_right, mid, lo)
            hi = torch.where(go_right, hi, mid)
        return 0.5 * (lo + hi)


class CircularSplineLayer(AutoregressiveLayer):
    """Monotone rational-quadratic spline on [0, 1] with a periodic boundary
    derivative, identity elsewhere. The analytic inverse solves a quadratic
    per bin, so both directions are exact."""

    def __init__(self, width, hidden, ordering, generator, bins: int = 8):
        self.bins = bins
        self.params_per_dim = 3 * bins
        super().__init__(width, hidden, ordering, generator)

    def _knots(self, params):
        raw_w, raw_h, raw_d = params.split(self.bins, dim=-1)
        widths = (torch.softmax(raw_w, dim=-1) + _BIN_MIX) / (1 + self.bins * _BIN_MIX)
        heights = (torch.softmax(raw_h, dim=-1) + _BIN_MIX) / (1 + self.bins * _BIN_MIX)
        x = torch.cat([torch.zeros_like(widths[..., :1]), torch.cumsum(widths, -1)], dim=-1)
        y = torch.cat([torch.zeros_like(heights[..., :1]), torch.cumsum(heights, -1)], dim=-1)
        x = x / x[..., -1:].clamp_min(1e-12)
        y = y / y[..., -1:].clamp_min(1e-12)
        deriv = _capped_exp(raw_d, _DERIV_CAP)
        deriv = torch.cat([deriv, deriv[..., :1]], dim=-1)  # periodic wrap
        return x, y, deriv

    @staticmethod
    def _gather(knots, index):
        return knots.gather(-1, index)

    def _bin_quantities(self, x, y, deriv, index):
        x_lo = self._gather(x, index)
        x_hi = self._gather(x, index + 1)
        y_lo = self._gather(y, index)
        y_hi = self._gather(y, index + 1)
        d_lo = self._gather(deriv, index)
        d_hi = self._gather(deriv, index + 1)
        width = (x_hi - x_lo).clamp_min(1e-12)
        height = (y_hi - y_lo).clamp_min(1e-12)
        slope = height / width
        return x_lo, y_lo, d_lo, d_hi, width, height, slope

    def _apply(self, params, z):
        x, y, deriv = self._knots(params)
        inside = (z >= 0.0) & (z <= 1.0)
        z_in = z.clamp(0.0, 1.0).unsqueeze(-1)
        index = (torch.searchsorted(x, z_in, right=True) - 1).clamp(0, self.bins - 1)
        x_lo, y_lo, d_lo, d_hi, width, height, slope = self._bin_quantities(x, y, deriv, index)
        theta = ((z_in - x_lo) / width).clamp(0.0, 1.0)
        t1m = theta * (1 - theta)
        denom = slope + (d_hi + d_lo - 2 * slope) * t1m
        out_in = y_lo + height * (slope * theta**2 + d_lo * t1m) / denom
        deriv_in = slope**2 * (d_hi * theta**2 + 2 * slope * t1m + d_lo * (1 - theta) ** 2) / denom**2
        out = torch.where(inside, out_in.squeeze(-1), z)
        log_deriv = torch.where(inside, torch.log(deriv_in.squeeze(-1)), torch.zeros_like(z))
        return out, log_deriv

    def _invert(self, params, target):
        x, y, deriv = self._knots(params)
        inside = (target >= 0.0) & (target <= 1.0)
        t_in = target.clamp(0.0, 1.0).unsqueeze(-1)
        index = (torch.searchsorted(y, t_in, right=True) - 1).clamp(0, self.bins - 1)
        x_lo, y_lo, d_lo, d_hi, width, height, slope = self._bin_quantities(x, y, deriv, index)
        delta = t_in - y_lo
        shape = d_hi + d_lo - 2 * slope
        a = height * (slope - d_lo) + delta * shape
        b = height * d_lo - delta * shape
        c = -slope * delta
        disc = (b**2 - 4 * a * c).clamp_min(0.0)
        theta = (2 * c) / (-b - torch.sqrt(disc)).clamp(max=-1e-300)
        solved = x_lo + theta.clamp(0.0, 1.0) * width
        return torch.where(inside, solved.squeeze(-1), target)


class OdeLayer(BijectiveLayer):
    """Free-form flow: integrates dz/dt = g(z, t) with fixed-step RK4 and
    accumulates the exact Jacobian trace of the one-hidden-layer field."""

    def __init__(self, width, hidden, generator, steps: int = 64):
        super().__init__()
        self.width = width
        self.steps = steps
        self.lin_in = nn.Linear(width + 1, hidden, dtype=DTYPE)
        self.lin_out = nn.Linear(hidden, width, dtype=DTYPE)
        _init_linear(self.lin_in, generator)
        with torch.no_grad():
            self.lin_out.weight.zero_()
            self.lin_out.bias.zero_()

    def _field(self, z, t):
        aug = torch.cat([z, torch.full_like(z[:, :1], t)], dim=1)
        h = torch.tanh(self.lin_in(aug))
        velocity = self.lin_out(h)
        # trace of d(velocity)/dz for a one-hidden-layer tanh net
        coupling = (self.lin_in.weight[:, : self.width] * self.lin_out.weight.T).sum(dim=1)
        trace = ((1 - h**2) * coupling).sum(dim=1)
        return velocity, trace

    def _integrate(self, z, t0, t1):
        dt = (t1 - t0) / self.steps
        logdet = z.new_zeros(z.shape[0])
        t = t0
        for _ in range(self.steps):
            k1, r1 = self._field(z, t)
            k2, r2 = self._field(z + 0.5 * dt * k1, t + 0.5 * dt)
            k3, r3 = self._field(z + 0.5 * dt * k2, t + 0.5 * dt)
            k4, r4 = self._field(z + dt * k3, t + dt)
            z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            logdet = logdet + dt / 6.0 * (r1 + 2 * r2 + 2 * r3 + r4)
            t += dt
        return z, logdet

    def forward_transform(self, z):
        return self._integrate(z, 0.0, 1.0)

    def inverse_transform(self, z):
        return self._integrate(z, 1.0, 0.0)


class FlowTransform(nn.Module):
    """Composition of L bijective layers with summed log-determinants."""

    def __init__(self, kind: str, layers):
        super().__init__()
        self.kind = kind
        self.layers = nn.ModuleList(layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def forward_transform(self, z: torch.Tensor):
        logdet = z.new_zeros(z.shape[0])
        for layer in self.layers:
            z, ld = layer.forward_transform(z)
            logdet = logdet + ld
        check_finite(z, f"{self.kind} flow forward")
        return z, logdet

    def inverse_transform(self, z: torch.Tensor):
        logdet = z.new_zeros(z.shape[0])
        for layer in reversed(self.layers):
            z, ld = layer.inverse_transform(z)
            logdet = logdet + ld
        check_finite(z, f"{self.kind} flow inverse")
        return z, logdet


def build_flow(
    kind: str,
    width: int,
    num_layers: int,
    generator: torch.Generator,
    hidden: int | None = None,
    spline_bins: int = 8,
    sigmoid_units: int = 8,
    ode_steps: int = 64,
) -> FlowTransform:
    """Flow of ``num_layers`` bijections of one family, identity at init.

    Autoregressive families alternate their dimension ordering between
    layers so every coordinate eventually conditions on every other.
    """
    kind = kind.lower()
    if kind not in FLOW_KINDS:
        raise ConfigError(f"unknown flow kind {kind!r}; choose from {FLOW_KINDS}")
    if width < 1 or num_layers < 1:
        raise ConfigError("flow width and layer count must be positive")
    hidden = hidden or max(16, 2 * width)
    layers = []
    for index in range(num_layers):
        ordering = np.arange(width) if index % 2 == 0 else np.arange(width)[::-1]
        if kind == "maf":
            layers.append(MaskedAffineLayer(width, hidden, ordering, generator))
        elif kind == "naf":
            layers.append(SigmoidalLayer(width, hidden, ordering, generator, units=sigmoid_units))
        elif kind == "ncsf":
            layers.append(CircularSplineLayer(width, hidden, ordering, generator, bins=spline_bins))
        else:
            layers.append(OdeLayer(width, hidden, generator, steps=ode_steps))
    return FlowTransform(kind, layers)


def flow_forward(flow: FlowTransform, z: torch.Tensor):
    return flow.forward_transform(z)


# ---------------------------------------------------------------------------
# Latent decomposition and reconstruction


@dataclass
class LatentDecomposition:
    """Stable latent plus per-domain variant latents for one user batch."""

    stable_x: torch.Tensor
    stable_y: torch.Tensor
    variant_x: torch.Tensor
    variant_y: torch.Tensor
    pairs: np.ndarray  # [P, 2] paired row indices into the x/y batches


class DecompositionHeads(nn.Module):
    """Per-domain linear heads producing the stable (ELU) and variant
    (sigmoid) latents from the deep feature block."""

    def __init__(self, width: int, generator: torch.Generator):
        super().__init__()
        self.width = width
        self.stable_x = nn.Linear(width, width, bias=False, dtype=DTYPE)
        self.stable_y = nn.Linear(width, width, bias=False, dtype=DTYPE)
        self.variant_x = nn.Linear(width, width, bias=False, dtype=DTYPE)
        self.variant_y = nn.Linear(width, width, bias=False, dtype=DTYPE)
        eye = torch.eye(width, dtype=DTYPE)
        with torch.no_grad():
            for head in (self.stable_x, self.stable_y):
                noise = torch.randn((width, width), dtype=DTYPE, generator=generator) * 0.01
                head.weight.copy_(eye + noise)
        for head in (self.variant_x, self.variant_y):
            _init_linear(head, generator)

    def decompose(self, deep_x: torch.Tensor, deep_y: torch.Tensor, pairs: np.ndarray) -> LatentDecomposition:
        """Apply the heads; paired rows share an averaged stable latent."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if deep_x.shape[1] != self.width or deep_y.shape[1] != self.width:
            raise ContractError("deep block width does not match the decomposition heads")
        stable_x = torch.nn.functional.elu(self.stable_x(deep_x))
        stable_y = torch.nn.functional.elu(self.stable_y(deep_y))
        if len(pairs):
            rows_x = torch.from_numpy(pairs[:, 0])
            rows_y = torch.from_numpy(pairs[:, 1])
            shared = 0.5 * (stable_x[rows_x] + stable_y[rows_y])
            stable_x = stable_x.index_copy(0, rows_x, shared)
            stable_y = stable_y.index_copy(0, rows_y, shared)
        # clamp keeps saturated sigmoids inside the open interval at float precision
        margin = 1e-15
        variant_x = torch.sigmoid(self.variant_x(deep_x)).clamp(margin, 1 - margin)
        variant_y = torch.sigmoid(self.variant_y(deep_y)).clamp(margin, 1 - margin)
        for name, tensor in (("stable_x", stable_x), ("stable_y", stable_y),
                             ("variant_x", variant_x), ("variant_y", variant_y)):
            check_finite(tensor, f"decomposition {name}")
        return LatentDecomposition(stable_x, stable_y, variant_x, variant_y, pairs)


def decompose(heads: DecompositionHeads, deep_x, deep_y, pairs) -> LatentDecomposition:
    return heads.decompose(deep_x, deep_y, pairs)


def reparameterize(
    stable: torch.Tensor,
    variant: torch.Tensor,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Reconstruct the deep block: stable + variant * eps.

    ``variant`` holds per-dimension standard deviations. With neither a
    generator nor explicit noise the call is deterministic (eps = 0), the
    evaluation-time convention.
    """
    if noise is None:
        if generator is None:
            return stable
        noise = torch.randn(variant.shape, dtype=DTYPE, generator=generator)
    return stable + variant * noise


def flow_nll(
    flow: FlowTransform,
    variant_src: torch.Tensor,
    variant_tgt: torch.Tensor,
    bandwidth: float = 0.1,
    likelihood: str = "pairing",
) -> torch.Tensor:
    """Negative log-likelihood of the flow-mapped source variant latents.

    ``pairing`` scores the mapped latents under a Gaussian centered at the
    paired target latents with fixed bandwidth; ``base`` scores them under
    a standard normal instead.
    """
    if variant_src.shape != variant_tgt.shape and likelihood == "pairing":
        raise ContractError("paired batches must share a shape")
    if variant_src.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    width = variant_src.shape[1]
    mapped, logdet = flow.forward_transform(variant_src)
    if likelihood == "pairing":
        log_prob = (
            -0.5 * ((mapped - variant_tgt) ** 2).sum(-1) / bandwidth**2
            - width * math.log(bandwidth * math.sqrt(2 * math.pi))
        )
    elif likelihood == "base":
        log_prob = -0.5 * (mapped**2).sum(-1) - 0.5 * width * math.log(2 * math.pi)
    else:
        raise ConfigError(f"unknown flow likelihood {likelihood!r}")
    return -(log_prob + logdet).mean()


def cross_domain_infer(
    flow: FlowTransform,
    stable: torch.Tensor,
    variant_src: torch.Tensor,
    direction: str = "x_to_y",
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deep block for a user with no target-domain history: map the source
    variant latent through the flow and reparameterize around the stable
    latent (eps = 0 when called without noise, as at evaluation)."""
    if direction == "x_to_y":
        mapped, _ = flow.forward_transform(variant_src)
    elif direction == "y_to_x":
        mapped, _ = flow.inverse_transform(variant_src)
    else:
        raise ContractError(f"direction must be x_to_y or y_to_x, got {direction!r}")
    return reparameterize(stable, mapped, generator=generator, noise=noise)
