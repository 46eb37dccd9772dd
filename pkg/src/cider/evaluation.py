"""Leave-one-out ranking evaluation and the overlap-ratio harness.

Each evaluation user's held-out positive is ranked against a fixed pool
of sampled negatives on inner-product scores; ties break by ascending
item index so ranks are deterministic. Users without training history
in the scoring domain are served through the cross-domain inference
path (source-domain shallow block, flow-mapped deep block).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .data import (
    InteractionDataset,
    NegativeSamplePool,
    apply_overlap_ratio,
    build_adjacency,
    sample_negatives,
)
from .errors import ContractError
from .flows import cross_domain_infer
from .training import TrainedModel, train

METRIC_KEYS = ("MRR", "HR", "NDCG")


@dataclass(frozen=True)
class RankingResult:
    domain: str
    ranks: dict[int, int]  # user index -> rank of the positive (1-based)
    pool_size: int

    def rank_array(self) -> np.ndarray:
        return np.array([self.ranks[u] for u in sorted(self.ranks)], dtype=np.int64)


def score_user(user_vector: torch.Tensor, candidate_items: torch.Tensor) -> torch.Tensor:
    """Inner-product scores of one user against a candidate item block."""
    if user_vector.shape[-1] != candidate_items.shape[-1]:
        raise ContractError("user and item representation widths differ")
    return candidate_items @ user_vector


def rank_of_positive(scores: torch.Tensor, item_indices: np.ndarray, positive_position: int) -> int:
    """1-based rank under descending score with ascending-index tie-breaks."""
    scores = scores.detach().numpy()
    pos_score = scores[positive_position]
    pos_item = item_indices[positive_position]
    higher = int((scores > pos_score).sum())
    tied_before = int(
        ((scores == pos_score) & (item_indices < pos_item)).sum()
    )
    return 1 + higher + tied_before


def compute_metrics(ranks, cutoffs=(10, 20, 30)) -> dict[str, float]:
    """MRR, HR@k and single-relevant NDCG@k from a list of 1-based ranks."""
    ranks = np.asarray(list(ranks) if not isinstance(ranks, np.ndarray) else ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ContractError("compute_metrics needs at least one rank")
    report = {"MRR": float(np.mean(1.0 / ranks))}
    for k in cutoffs:
        hit = ranks <= k
        report[f"HR@{k}"] = float(np.mean(hit))
        report[f"NDCG@{k}"] = float(np.mean(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)))
    return report


# ---------------------------------------------------------------------------
# Representation assembly


def _cold_and_warm(adjacency) -> np.ndarray:
    return adjacency.user_degree > 0


def build_user_item_vectors(trained: TrainedModel, dataset: InteractionDataset):
    """Evaluation-mode vectors: [shallow || reconstructed deep] per user and
    the full layer concatenation per item, with the cross-domain path for
    users that lack training history in one domain."""
    model = trained.model
    components = trained.components
    adjacency = {d: build_adjacency(dataset, d) for d in ("x", "y")}
    with torch.no_grad():
        reps = {d: model.encode(adjacency[d], d) for d in ("x", "y")}
        user_reps = {d: reps[d][0] for d in ("x", "y")}
        item_vectors = {d: reps[d][1].full_mean for d in ("x", "y")}

        warm = {d: _cold_and_warm(adjacency[d]) for d in ("x", "y")}
        overlap = dataset.overlap_indices()
        paired = np.array(
            [(ix, iy) for _, ix, iy in overlap if warm["x"][ix] and warm["y"][iy]],
            dtype=np.int64,
        ).reshape(-1, 2)

        deep = {d: user_reps[d].deep_mean for d in ("x", "y")}
        if components.decomposition:
            decomposition = model.heads.decompose(deep["x"], deep["y"], paired)
            recon = {"x": decomposition.stable_x, "y": decomposition.stable_y}
            variants = {"x": decomposition.variant_x, "y": decomposition.variant_y}
        else:
            recon = dict(deep)
            variants = None

        shallow = {d: user_reps[d].shallow_mean for d in ("x", "y")}
        user_vectors = {}
        for target in ("x", "y"):
            source = "y" if target == "x" else "x"
            shallow_t = shallow[target].clone()
            recon_t = recon[target].clone()
            cold = [
                (ix if target == "x" else iy, ix if source == "x" else iy)
                for _, ix, iy in overlap
                if not warm[target][ix if target == "x" else iy]
                and warm[source][ix if source == "x" else iy]
            ]
            if cold:
                rows_t = torch.tensor([t for t, _ in cold], dtype=torch.long)
                rows_s = torch.tensor([s for _, s in cold], dtype=torch.long)
                if shallow_t.shape[1]:
                    shallow_t[rows_t] = shallow[source][rows_s]
                if components.decomposition:
                    direction = "x_to_y" if source == "x" else "y_to_x"
                    recon_t[rows_t] = cross_domain_infer(
                        model.flow,
                        recon[source][rows_s],
                        variants[source][rows_s],
                        direction=direction,
                    )
                else:
                    recon_t[rows_t] = recon[source][rows_s]
            user_vectors[target] = torch.cat([shallow_t, recon_t], dim=1)
    return user_vectors, item_vectors


# ---------------------------------------------------------------------------
# Evaluation driver


def evaluate(
    trained: TrainedModel,
    dataset: InteractionDataset,
    pools: dict[str, NegativeSamplePool],
    mode: str = "test",
) -> tuple[dict[str, dict[str, float]], dict[str, RankingResult]]:
    """Rank every held-out positive of the requested split in both domains."""
    if mode not in ("test", "validation"):
        raise ContractError(f"mode must be test or validation, got {mode!r}")
    if trained.dataset_fingerprint and trained.dataset_fingerprint != dataset.fingerprint():
        raise ContractError("checkpoint was trained on a different dataset")
    cutoffs = trained.config.evaluation.cutoffs
    user_vectors, item_vectors = build_user_item_vectors(trained, dataset)
    index = {d: dataset.user_index(d) for d in ("x", "y")}
    wanted = {u for u, s in dataset.split.items() if s == mode}

    metrics, rankings = {}, {}
    for domain in ("x", "y"):
        pool = pools[domain]
        pool.validate_against(dataset)
        holdout = dataset.holdout_items(domain)
        ranks = {}
        for user_id in sorted(wanted):
            u = index[domain][user_id]
            if u not in holdout:
                continue
            if u not in pool.negatives:
                raise ContractError(f"pool is missing negatives for user {user_id!r}")
            candidates = np.concatenate([pool.negatives[u], [holdout[u]]])
            scores = score_user(
                user_vectors[domain][u], item_vectors[domain][torch.from_numpy(candidates)]
            )
            ranks[u] = rank_of_positive(scores, candidates, len(candidates) - 1)
        rankings[domain] = RankingResult(domain=domain, ranks=ranks, pool_size=pool.pool_size)
        metrics[domain] = compute_metrics(rankings[domain].rank_array(), cutoffs)
    return metrics, rankings


def build_pools(dataset: InteractionDataset, seed: int, pool_size: int) -> dict[str, NegativeSamplePool]:
    return {d: sample_negatives(dataset, d, seed, pool_size=pool_size) for d in ("x", "y")}


def evaluate_config(
    trained: TrainedModel, dataset: InteractionDataset, mode: str = "test"
) -> dict[str, dict[str, float]]:
    """Convenience wrapper: pools derived from the run's own seed."""
    pools = build_pools(dataset, trained.config.train.seed, trained.config.evaluation.pool_size)
    metrics, _ = evaluate(trained, dataset, pools, mode)
    return metrics


# ---------------------------------------------------------------------------
# Overlap-ratio harness


def overlap_ratio_harness(
    dataset: InteractionDataset,
    ratios,
    base_config: ExperimentConfig,
) -> list[dict]:
    """Retrain at each pairing ratio against a fixed test set.

    Negative pools come from the unmodified dataset so every ratio ranks
    exactly the same candidates.
    """
    pools = build_pools(dataset, base_config.train.seed, base_config.evaluation.pool_size)
    rows = []
    for ratio in ratios:
        fraction = ratio / 100.0 if ratio > 1 else float(ratio)
        if not 0.0 <= fraction <= 1.0:
            raise ContractError(f"ratio {ratio!r} is not a percentage")
        pruned = apply_overlap_ratio(dataset, fraction, base_config.train.seed)
        trained, _ = train(pruned, base_config)
        metrics, _ = evaluate(trained, pruned, pools, "test")
        for domain in ("x", "y"):
            rows.append({"ratio": ratio, "domain": domain, **metrics[domain]})
    return rows


# ---------------------------------------------------------------------------
# Aggregation and report output


def aggregate_runs(reports: list[dict[str, dict[str, float]]]) -> dict[str, dict[str, dict[str, float]]]:
    """Per-domain, per-metric mean and sample standard deviation."""
    if not reports:
        raise ContractError("aggregate_runs needs at least one report")
    reference = {d: tuple(sorted(m)) for d, m in reports[0].items()}
    for report in reports[1:]:
        if {d: tuple(sorted(m)) for d, m in report.items()} != reference:
            raise ContractError("reports carry different domains or metric keys")
    out: dict[str, dict[str, dict[str, float]]] = {}
    for domain, metric_keys in reference.items():
        out[domain] = {}
        for key in metric_keys:
            values = np.array([report[domain][key] for report in reports], dtype=np.float64)
            std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
            out[domain][key] = {"mean": float(values.mean()), "std": std}
    return out


def write_report(aggregate: dict, out_dir: str | Path, stem: str = "report", extra: dict | None = None) -> None:
    """JSON report plus a CSV mirror (one row per domain)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(aggregate)
    if extra:
        payload = {"context": extra, "metrics": aggregate}
    (out_dir / f"{stem}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    domains = sorted(aggregate)
    metric_keys = sorted(next(iter(aggregate.values())))
    header = ["domain"]
    for key in metric_keys:
        header += [f"{key}_mean", f"{key}_std"]
    lines = [",".join(header)]
    for domain in domains:
        row = [domain]
        for key in metric_keys:
            row += [repr(aggregate[domain][key]["mean"]), repr(aggregate[domain][key]["std"])]
        lines.append(",".join(row))
    (out_dir / f"{stem}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_rows_csv(rows: list[dict], path: str | Path) -> None:
    """CSV for tabular results (ablation table, ratio sweep, grid)."""
    if not rows:
        raise ContractError("no rows to write")
    keys = list(rows[0].keys())
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
