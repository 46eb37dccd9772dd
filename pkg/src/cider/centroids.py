"""Centroid-based probabilistic alignment of the shallow user subspace.

Each domain keeps T interest centroids, modeled as diagonal Gaussians
with mixture weights. Users are softly assigned by KL distance, the
expected distance forms the within-domain matching score, and the
per-index KL between the two domains' centroids is the alignment loss.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch

from .errors import ContractError
from .numerics import DTYPE, VAR_FLOOR

_LOG_VAR_FLOOR = math.log(VAR_FLOOR)


def kl_diag_gaussian(
    mean_q: torch.Tensor,
    var_q: torch.Tensor,
    mean_p: torch.Tensor,
    var_p: torch.Tensor,
) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis.

    Broadcasts leading axes, so a [n, 1, w] posterior against [T, w]
    centroids yields an [n, T] distance table.
    """
    if mean_q.shape[-1] != mean_p.shape[-1]:
        raise ContractError(
            f"width mismatch: q has {mean_q.shape[-1]} dims, p has {mean_p.shape[-1]}"
        )
    ratio = var_q / var_p
    return 0.5 * (torch.log(var_p / var_q) + ratio + (mean_q - mean_p) ** 2 / var_p - 1.0).sum(-1)


class CentroidSet:
    """T diagonal-Gaussian interest centroids for one domain.

    Means and log-variances are leaf tensors updated by explicit gradient
    steps (not by the main optimizer); priors are recomputed from the soft
    assignments and renormalized.
    """

    def __init__(self, means: torch.Tensor, variances: torch.Tensor, priors: torch.Tensor | None = None):
        if means.shape != variances.shape:
            raise ContractError("centroid means and variances must share a shape")
        self.means = means.detach().clone().to(DTYPE).requires_grad_(True)
        log_vars = torch.log(variances.detach().clamp_min(VAR_FLOOR)).to(DTYPE)
        self.log_vars = log_vars.requires_grad_(True)
        if priors is None:
            priors = torch.full((means.shape[0],), 1.0 / means.shape[0], dtype=DTYPE)
        self.priors = priors.detach().clone().to(DTYPE)

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def width(self) -> int:
        return self.means.shape[1]

    @property
    def variances(self) -> torch.Tensor:
        return torch.exp(self.log_vars)

    def parameters(self) -> list[torch.Tensor]:
        return [self.means, self.log_vars]

    def detached(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.means.detach(), self.variances.detach(), self.priors

    def apply_update(
        self,
        grad_means: torch.Tensor,
        grad_log_vars: torch.Tensor,
        responsibilities: torch.Tensor,
        learning_rate: float,
    ) -> None:
        """One explicit descent step on (mean, log-variance), then refresh priors."""
        if learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if not (torch.isfinite(grad_means).all() and torch.isfinite(grad_log_vars).all()):
            warnings.warn("skipping centroid update: non-finite gradient", stacklevel=2)
            return
        with torch.no_grad():
            self.means -= learning_rate * grad_means
            self.log_vars -= learning_rate * grad_log_vars
            self.log_vars.clamp_(min=_LOG_VAR_FLOOR)
            mass = responsibilities.sum(dim=0)
            total = mass.sum()
            if total > 0:
                self.priors = (mass / total).to(DTYPE)

    def state(self) -> dict:
        return {
            "means": self.means.detach().clone(),
            "log_vars": self.log_vars.detach().clone(),
            "priors": self.priors.clone(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "CentroidSet":
        return cls(state["means"], torch.exp(state["log_vars"]), state["priors"])


def soft_assign(
    user_mean: torch.Tensor,
    user_var: torch.Tensor,
    centroids: CentroidSet,
    temperature: float,
) -> torch.Tensor:
    """Responsibility rows over centroids, computed in log space."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    means, variances, priors = centroids.detached()
    kls = kl_diag_gaussian(user_mean.unsqueeze(-2), user_var.unsqueeze(-2), means, variances)
    logits = torch.log(priors.clamp_min(1e-300)) - temperature * kls
    return torch.softmax(logits, dim=-1)


def matching_score(
    user_mean: torch.Tensor,
    user_var: torch.Tensor,
    centroids: CentroidSet,
    temperature: float,
    responsibilities: torch.Tensor | None = None,
    detach_centroids: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Within-domain matching score: sum over users of the expected KL
    distance to the centroids under the soft assignment.

    Responsibilities are treated as fixed weights (recomputed here unless
    supplied), so the returned score differentiates through the KL table
    only — the assignment itself is the non-gradient, EM-style part of
    the update.
    """
    if user_mean.shape[0] == 0:
        raise ContractError("matching_score needs a non-empty batch")
    if responsibilities is None:
        with torch.no_grad():
            responsibilities = soft_assign(user_mean, user_var, centroids, temperature)
    c_means, c_vars = centroids.means, centroids.variances
    if detach_centroids:
        c_means, c_vars = c_means.detach(), c_vars.detach()
    kls = kl_diag_gaussian(user_mean.unsqueeze(-2), user_var.unsqueeze(-2), c_means, c_vars)
    score = (responsibilities * kls).sum()
    return score, responsibilities


def update_centroids(
    centroids: CentroidSet,
    score: torch.Tensor,
    responsibilities: torch.Tensor,
    learning_rate: float,
) -> CentroidSet:
    """Descent step of the given score through the centroid parameters."""
    grad_means, grad_log_vars = torch.autograd.grad(
        score, [centroids.means, centroids.log_vars], allow_unused=False
    )
    centroids.apply_update(grad_means, grad_log_vars, responsibilities, learning_rate)
    return centroids


def centroid_alignment_loss(centroids_x: CentroidSet, centroids_y: CentroidSet) -> torch.Tensor:
    """Sum over t of KL(C_t of X || C_t of Y); pairs centroids by index."""
    if centroids_x.count != centroids_y.count:
        raise ContractError(
            f"centroid count mismatch: {centroids_x.count} vs {centroids_y.count}"
        )
    return kl_diag_gaussian(
        centroids_x.means, centroids_x.variances, centroids_y.means, centroids_y.variances
    ).sum()


# ---------------------------------------------------------------------------
# Initialization


def kmeans_pp_indices(points: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Classic k-means++ seeding over rows of ``points``."""
    n = len(points)
    if count > n:
        raise ContractError(f"cannot seed {count} centroids from {n} points")
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < count:
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a seed; pick uniformly
            remaining = np.setdiff1d(np.arange(n), np.array(chosen))
            chosen.append(int(rng.choice(remaining)))
        else:
            probs = d2 / total
            chosen.append(int(rng.choice(n, p=probs)))
        d2 = np.minimum(d2, ((points - points[chosen[-1]]) ** 2).sum(axis=1))
    return np.array(chosen, dtype=np.int64)


def _set_from_anchors(
    shallow_mean: torch.Tensor, shallow_var: torch.Tensor, anchor_rows: np.ndarray
) -> CentroidSet:
    points = shallow_mean.detach()
    point_vars = shallow_var.detach()
    anchors = points[torch.from_numpy(anchor_rows)]
    # nearest anchor in this domain's own space
    d2 = ((points.unsqueeze(1) - anchors.unsqueeze(0)) ** 2).sum(-1)
    labels = d2.argmin(dim=1)
    means, variances = [], []
    for t in range(len(anchor_rows)):
        mask = labels == t
        if not bool(mask.any()):
            mask = torch.zeros_like(mask)
            mask[anchor_rows[t]] = True
        members = points[mask]
        # empirical variance of the member posteriors: spread of their means
        # plus their average posterior variance (law of total variance)
        spread = members.var(dim=0, unbiased=False)
        within = point_vars[mask].mean(dim=0)
        means.append(anchors[t])
        variances.append((spread + within).clamp_min(VAR_FLOOR))
    return CentroidSet(torch.stack(means), torch.stack(variances))


def init_paired_centroids(
    mean_x: torch.Tensor,
    var_x: torch.Tensor,
    mean_y: torch.Tensor,
    var_y: torch.Tensor,
    pairs: np.ndarray,
    count: int,
    rng: np.random.Generator,
) -> tuple[CentroidSet, CentroidSet]:
    """k-means++ seeding shared across domains so index pairing is meaningful.

    Seeds are chosen on the concatenated shallow means of paired (overlap)
    users; centroid t in each domain starts at the same anchor user's
    representation. Without enough pairs, each domain seeds independently
    on its own users.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) >= count:
        joint = torch.cat(
            [mean_x[torch.from_numpy(pairs[:, 0])], mean_y[torch.from_numpy(pairs[:, 1])]], dim=1
        )
        seeds = kmeans_pp_indices(joint.detach().numpy(), count, rng)
        return (
            _set_from_anchors(mean_x, var_x, pairs[seeds, 0]),
            _set_from_anchors(mean_y, var_y, pairs[seeds, 1]),
        )
    seeds_x = kmeans_pp_indices(mean_x.detach().numpy(), count, rng)
    seeds_y = kmeans_pp_indices(mean_y.detach().numpy(), count, rng)
    return _set_from_anchors(mean_x, var_x, seeds_x), _set_from_anchors(mean_y, var_y, seeds_y)
