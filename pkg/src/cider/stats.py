"""Sample-based discrepancy measures."""

from __future__ import annotations

import torch

from .errors import ContractError


def median_heuristic_bandwidth(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Median pairwise squared distance over the pooled sample, halved."""
    pooled = torch.cat([a, b], dim=0)
    sq = torch.cdist(pooled, pooled) ** 2
    off_diag = sq[~torch.eye(len(pooled), dtype=torch.bool)]
    med = off_diag.median()
    return (med / 2).clamp_min(1e-12)


def _offdiag_mean(kernel: torch.Tensor) -> torch.Tensor:
    n = kernel.shape[0]
    if n < 2:
        return kernel.new_zeros(())
    return (kernel.sum() - kernel.diagonal().sum()) / (n * (n - 1))


def rbf_mmd2(a: torch.Tensor, b: torch.Tensor, bandwidth: float | torch.Tensor | None = None) -> torch.Tensor:
    """Unbiased squared maximum mean discrepancy with an RBF kernel.

    With no bandwidth given, uses the median heuristic on the pooled
    sample (detached, so the bandwidth is not itself optimized). The
    unbiased estimator can dip below zero on equal distributions.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ContractError("samples must share a feature width")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(a.detach(), b.detach())
    k_aa = torch.exp(-(torch.cdist(a, a) ** 2) / (2 * bandwidth))
    k_bb = torch.exp(-(torch.cdist(b, b) ** 2) / (2 * bandwidth))
    k_ab = torch.exp(-(torch.cdist(a, b) ** 2) / (2 * bandwidth))
    return _offdiag_mean(k_aa) + _offdiag_mean(k_bb) - 2 * k_ab.mean()


def rbf_mmd(a: torch.Tensor, b: torch.Tensor, bandwidth=None) -> torch.Tensor:
    return torch.sqrt(rbf_mmd2(a, b, bandwidth).clamp_min(0.0))
