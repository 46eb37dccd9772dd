"""Layered variational bipartite graph encoder.

Each layer propagates node features through the normalized interaction
graph and reads out a diagonal-Gaussian posterior per node. The two
sides interleave: a user layer aggregates the previous item means over
the graph (plus the previous user means, which keeps feature scale and
an identity channel), and the item layer mirrors that through the
transposed graph. Layer 1 consumes the randomly initialized base
embeddings. The interleaving keeps user and item blocks in one shared
feature space at every depth, so inner-product scores are meaningful
across the whole concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import NormalizedAdjacency
from .errors import ConfigError, ContractError
from .numerics import DTYPE, VAR_FLOOR, check_finite


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 3  # total depth
    shallow_layers: int = 2  # first layers feeding the alignment subspace
    embed_dim: int = 64
    head_gain: float = 4.0  # init scale of the mean/variance heads

    def validate(self) -> None:
        if self.num_layers < 2:
            raise ConfigError("encoder needs at least 2 layers")
        if not 1 <= self.shallow_layers < self.num_layers:
            raise ConfigError("shallow depth must satisfy 1 <= k < num_layers")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if self.head_gain <= 0:
            raise ConfigError("head_gain must be positive")


@dataclass
class LayeredRepresentation:
    """Per-layer Gaussian posteriors with shallow/deep block views.

    The concatenated blocks are computed from the layer stack on access,
    so they can never drift from the per-layer tensors.
    """

    layer_means: torch.Tensor  # [K, n, d]
    layer_vars: torch.Tensor  # [K, n, d], entries >= VAR_FLOOR
    shallow_depth: int

    def _concat(self, tensor: torch.Tensor, lo: int, hi: int) -> torch.Tensor:
        if lo == hi:
            return tensor.new_zeros((tensor.shape[1], 0))
        return torch.cat([tensor[layer] for layer in range(lo, hi)], dim=1)

    @property
    def num_layers(self) -> int:
        return self.layer_means.shape[0]

    @property
    def shallow_mean(self) -> torch.Tensor:
        return self._concat(self.layer_means, 0, self.shallow_depth)

    @property
    def shallow_var(self) -> torch.Tensor:
        return self._concat(self.layer_vars, 0, self.shallow_depth)

    @property
    def deep_mean(self) -> torch.Tensor:
        return self._concat(self.layer_means, self.shallow_depth, self.num_layers)

    @property
    def deep_var(self) -> torch.Tensor:
        return self._concat(self.layer_vars, self.shallow_depth, self.num_layers)

    @property
    def full_mean(self) -> torch.Tensor:
        return self._concat(self.layer_means, 0, self.num_layers)

    @property
    def full_var(self) -> torch.Tensor:
        return self._concat(self.layer_vars, 0, self.num_layers)


class LayeredUserRepresentation(LayeredRepresentation):
    pass


class LayeredItemRepresentation(LayeredRepresentation):
    pass


def init_embeddings(
    num_users: int, num_items: int, dim: int, generator: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Base embedding tables, N(0, 0.1^2) i.i.d."""
    if num_users < 1 or num_items < 1 or dim < 1:
        raise ConfigError("embedding table dimensions must be positive")
    users = torch.randn((num_users, dim), dtype=DTYPE, generator=generator) * 0.1
    items = torch.randn((num_items, dim), dtype=DTYPE, generator=generator) * 0.1
    return users, items


class VbgeLayer(nn.Module):
    """Mean/variance heads over a message-passed input.

    ``forward`` expects the already-propagated features; ``vbge_layer``
    below applies an explicit propagation matrix first.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.mean_head = nn.Linear(in_dim, out_dim, bias=False, dtype=DTYPE)
        self.var_head = nn.Linear(in_dim, out_dim, bias=False, dtype=DTYPE)

    def forward(self, propagated: torch.Tensor, where: str = "vbge_layer"):
        mean = torch.nn.functional.elu(self.mean_head(propagated))
        var = torch.nn.functional.softplus(self.var_head(propagated)) + VAR_FLOOR
        check_finite(mean, f"{where} mean")
        check_finite(var, f"{where} variance")
        return mean, var


def vbge_layer(adjacency: torch.Tensor, inputs: torch.Tensor, layer: VbgeLayer):
    """One layer applied to ``adjacency @ inputs``; adjacency may be sparse."""
    if adjacency.shape[1] != inputs.shape[0]:
        raise ContractError(
            f"adjacency columns ({adjacency.shape[1]}) must match input rows ({inputs.shape[0]})"
        )
    if adjacency.is_sparse:
        propagated = torch.sparse.mm(adjacency, inputs)
    else:
        propagated = adjacency @ inputs
    return layer(propagated)


class DomainEncoder(nn.Module):
    """Full K-layer stack for one domain (user and item sides)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.embed_dim
        self.user_layers = nn.ModuleList(VbgeLayer(d, d) for _ in range(config.num_layers))
        self.item_layers = nn.ModuleList(VbgeLayer(d, d) for _ in range(config.num_layers))

    def encode(
        self,
        adjacency: NormalizedAdjacency,
        user_base: torch.Tensor,
        item_base: torch.Tensor,
        shallow_depth: int | None = None,
    ) -> tuple[LayeredUserRepresentation, LayeredItemRepresentation]:
        depth = self.config.shallow_layers if shallow_depth is None else shallow_depth
        graph = adjacency.to_torch()
        graph_t = graph.transpose(0, 1).coalesce()

        user_means, user_vars, item_means, item_vars = [], [], [], []
        h_user, h_item = user_base, item_base
        for index, (u_layer, i_layer) in enumerate(zip(self.user_layers, self.item_layers)):
            # cross-side aggregation plus a same-side term: the latter stops
            # the averaging operator from crushing feature scale
            prop_u = 0.5 * (h_user + torch.sparse.mm(graph, h_item))
            prop_i = 0.5 * (h_item + torch.sparse.mm(graph_t, h_user))
            mu_u, var_u = u_layer(prop_u, where=f"user layer {index + 1}")
            mu_i, var_i = i_layer(prop_i, where=f"item layer {index + 1}")
            user_means.append(mu_u)
            user_vars.append(var_u)
            item_means.append(mu_i)
            item_vars.append(var_i)
            h_user, h_item = mu_u, mu_i

        users = LayeredUserRepresentation(torch.stack(user_means), torch.stack(user_vars), depth)
        items = LayeredItemRepresentation(torch.stack(item_means), torch.stack(item_vars), depth)
        return users, items


def encode_domain(
    adjacency: NormalizedAdjacency,
    user_base: torch.Tensor,
    item_base: torch.Tensor,
    encoder: DomainEncoder,
    shallow_depth: int | None = None,
):
    return encoder.encode(adjacency, user_base, item_base, shallow_depth=shallow_depth)
