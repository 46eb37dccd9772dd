"""Composite objective and the optimizer loop.

The total loss combines the shallow alignment term, the deep
identification term and the two (maximized) information-bottleneck
prediction bounds:

    total = w_s * shallow + w_d * deep - vib_x - vib_y

Ablation variants swap alignment machinery in and out of the two
subspace slots; the breakdown always satisfies the identity above.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import centroids as cpa
from .config import ExperimentConfig
from .data import InteractionDataset, NormalizedAdjacency, UserBatchSampler, build_adjacency
from .encoder import DomainEncoder, init_embeddings
from .errors import ConfigError, ContractError, NumericError, TrainingDiverged
from .flows import DecompositionHeads, build_flow, flow_nll, reparameterize
from .numerics import DTYPE, PROB_FLOOR, spawn_seeds, torch_generator
from .stats import rbf_mmd2

_CKPT_FORMAT_VERSION = 1

LOSS_LOG_COLUMNS = ("epoch", "step", "L_s", "L_d", "vib_x", "vib_y", "total")


@dataclass(frozen=True)
class ActiveComponents:
    """Which mechanisms a variant keeps switched on."""

    shallow_cpa: bool = False
    deep_cpa: bool = False
    shallow_mmd: bool = False
    deep_mmd: bool = False
    decomposition: bool = False
    flow: bool = False
    merge_subspaces: bool = False  # no shallow/deep split (depth 0)


_VARIANT_TABLE = {
    "full": ActiveComponents(shallow_cpa=True, decomposition=True, flow=True),
    "A": ActiveComponents(),
    "B": ActiveComponents(shallow_mmd=True, deep_mmd=True),
    "C": ActiveComponents(shallow_cpa=True, deep_cpa=True),
    "D": ActiveComponents(shallow_cpa=True, decomposition=True),
    "E": ActiveComponents(decomposition=True, flow=True, merge_subspaces=True),
}


def select_variant(flag: str) -> ActiveComponents:
    try:
        return _VARIANT_TABLE[flag]
    except KeyError:
        raise ConfigError(f"unknown variant {flag!r}; choose from {sorted(_VARIANT_TABLE)}") from None


@dataclass
class LossBreakdown:
    shallow: float
    deep: float
    vib_x: float
    vib_y: float
    total: float

    def check(self, weight_shallow: float, weight_deep: float, tol: float = 1e-10) -> None:
        expected = weight_shallow * self.shallow + weight_deep * self.deep - self.vib_x - self.vib_y
        if not math.isfinite(self.total) or abs(self.total - expected) > tol:
            raise NumericError(
                f"loss breakdown violated: total={self.total!r}, recombined={expected!r}"
            )


def vib_bound(
    reconstructed: torch.Tensor,
    positive_items: torch.Tensor,
    negative_items: torch.Tensor,
) -> torch.Tensor:
    """Empirical prediction bound: log-sigmoid score of interacted items plus
    log one-minus-sigmoid of non-interacted ones, averaged over users.

    ``negative_items`` may carry one extra leading axis for multiple
    negatives per user; probabilities are clamped before the logs.
    """
    if positive_items.shape != reconstructed.shape:
        raise ContractError("positive item block must match the reconstruction shape")
    pos_score = (reconstructed * positive_items).sum(-1)
    if negative_items.dim() == reconstructed.dim():
        negative_items = negative_items.unsqueeze(1)
    neg_score = (reconstructed.unsqueeze(1) * negative_items).sum(-1)
    p_pos = torch.sigmoid(pos_score).clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    p_neg = torch.sigmoid(neg_score).clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    per_user = torch.log(p_pos) + torch.log1p(-p_neg).mean(dim=1)
    return per_user.mean()


def total_loss(
    shallow: torch.Tensor,
    deep: torch.Tensor,
    vib_x: torch.Tensor,
    vib_y: torch.Tensor,
    weight_shallow: float,
    weight_deep: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    total = weight_shallow * shallow + weight_deep * deep - vib_x - vib_y
    breakdown = LossBreakdown(
        shallow=float(shallow.detach()),
        deep=float(deep.detach()),
        vib_x=float(vib_x.detach()),
        vib_y=float(vib_y.detach()),
        total=float(total.detach()),
    )
    for name in ("shallow", "deep", "vib_x", "vib_y"):
        if not math.isfinite(getattr(breakdown, name)):
            raise NumericError(f"loss component {name} is not finite")
    breakdown.check(weight_shallow, weight_deep)
    return total, breakdown


# ---------------------------------------------------------------------------
# Model assembly


class CiderModel(nn.Module):
    """Both domain encoders, base embeddings, decomposition heads and the
    cross-domain flow, initialized deterministically from one generator."""

    def __init__(self, config: ExperimentConfig, num_users: dict, num_items: dict, init_seed: int):
        super().__init__()
        config.validate()
        self.components = select_variant(config.train.variant)
        enc_cfg = config.encoder
        self.shallow_depth = 0 if self.components.merge_subspaces else enc_cfg.shallow_layers
        self.deep_width = (enc_cfg.num_layers - self.shallow_depth) * enc_cfg.embed_dim
        self.shallow_width = self.shallow_depth * enc_cfg.embed_dim

        generator = torch_generator(init_seed)
        self.encoder_x = DomainEncoder(enc_cfg)
        self.encoder_y = DomainEncoder(enc_cfg)
        std = enc_cfg.head_gain / math.sqrt(enc_cfg.embed_dim)
        for encoder in (self.encoder_x, self.encoder_y):
            for layers in (encoder.user_layers, encoder.item_layers):
                for layer in layers:
                    for head in (layer.mean_head, layer.var_head):
                        with torch.no_grad():
                            head.weight.copy_(
                                torch.randn(head.weight.shape, dtype=DTYPE, generator=generator) * std
                            )

        base = {}
        for domain in ("x", "y"):
            users, items = init_embeddings(
                num_users[domain], num_items[domain], enc_cfg.embed_dim, generator
            )
            base[f"user_{domain}"] = nn.Parameter(users)
            base[f"item_{domain}"] = nn.Parameter(items)
        self.base = nn.ParameterDict(base)

        self.heads = DecompositionHeads(self.deep_width, generator)
        flow_cfg = config.flow
        self.flow = build_flow(
            flow_cfg.kind,
            self.deep_width,
            flow_cfg.num_layers,
            generator,
            hidden=flow_cfg.hidden or None,
            spline_bins=flow_cfg.spline_bins,
            sigmoid_units=flow_cfg.sigmoid_units,
            ode_steps=flow_cfg.ode_steps,
        )

    def encode(self, adjacency: NormalizedAdjacency, domain: str):
        encoder = self.encoder_x if domain == "x" else self.encoder_y
        return encoder.encode(
            adjacency,
            self.base[f"user_{domain}"],
            self.base[f"item_{domain}"],
            shallow_depth=self.shallow_depth,
        )


@dataclass
class TrainedModel:
    """Everything evaluation needs: parameters, centroid state and config."""

    config: ExperimentConfig
    model: CiderModel
    centroids_x: cpa.CentroidSet | None = None
    centroids_y: cpa.CentroidSet | None = None
    deep_centroids_x: cpa.CentroidSet | None = None
    deep_centroids_y: cpa.CentroidSet | None = None
    dataset_fingerprint: str = ""

    @property
    def components(self) -> ActiveComponents:
        return self.model.components


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    initial_alignment: float | None = None
    epoch_alignment: list[float] = field(default_factory=list)
    max_assignment_deviation: float = 0.0
    centroid_snapshots: list[dict] = field(default_factory=list)  # one record per centroid per epoch

    def write_centroid_log(self, path: str | Path) -> None:
        lines = [json.dumps(record, sort_keys=True) for record in self.centroid_snapshots]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    def epoch_totals(self) -> list[float]:
        sums: dict[int, list[float]] = {}
        for row in self.rows:
            sums.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(sums[e])) for e in sorted(sums)]

    def write_csv(self, path: str | Path) -> None:
        lines = [",".join(LOSS_LOG_COLUMNS)]
        for row in self.rows:
            lines.append(
                f"{row['epoch']},{row['step']},{row['L_s']!r},{row['L_d']!r},"
                f"{row['vib_x']!r},{row['vib_y']!r},{row['total']!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _InteractionLookup:
    """Per-domain training items per user, plus uniform negative draws."""

    def __init__(self, dataset: InteractionDataset, domain: str, rng: np.random.Generator):
        inter = dataset.training_interactions(domain)
        self.items_of: dict[int, np.ndarray] = {}
        by_user: dict[int, list[int]] = {}
        for u, v in inter:
            by_user.setdefault(int(u), []).append(int(v))
        self.items_of = {u: np.array(vs, dtype=np.int64) for u, vs in by_user.items()}
        self.interacted = dataset.interacted_items(domain)
        self.num_items = len(dataset.items(domain))
        self.rng = rng

    def sample_pairs(self, users: np.ndarray, negatives: int) -> tuple[np.ndarray, np.ndarray]:
        pos = np.empty(len(users), dtype=np.int64)
        neg = np.empty((len(users), negatives), dtype=np.int64)
        for row, u in enumerate(users):
            u = int(u)
            choices = self.items_of[u]
            pos[row] = choices[self.rng.integers(len(choices))]
            seen = self.interacted.get(u, set())
            for j in range(negatives):
                while True:
                    candidate = int(self.rng.integers(self.num_items))
                    if candidate not in seen:
                        neg[row, j] = candidate
                        break
        return pos, neg


def _init_centroid_pair(
    rep_x, rep_y, pairs: np.ndarray, count: int, rng: np.random.Generator, block: str
) -> tuple[cpa.CentroidSet, cpa.CentroidSet]:
    if block == "shallow":
        mean_x, var_x = rep_x.shallow_mean, rep_x.shallow_var
        mean_y, var_y = rep_y.shallow_mean, rep_y.shallow_var
    else:
        mean_x, var_x = rep_x.deep_mean, rep_x.deep_var
        mean_y, var_y = rep_y.deep_mean, rep_y.deep_var
    return cpa.init_paired_centroids(
        mean_x.detach(), var_x.detach(), mean_y.detach(), var_y.detach(), pairs, count, rng
    )


def train(dataset: InteractionDataset, config: ExperimentConfig) -> tuple[TrainedModel, TrainingLog]:
    """Run the optimizer loop; deterministic given the config seed."""
    config.validate()
    train_cfg = config.train
    components = select_variant(train_cfg.variant)
    init_seed, sampler_seed, noise_seed, vib_seed, centroid_seed = spawn_seeds(train_cfg.seed, 5)

    adjacency = {domain: build_adjacency(dataset, domain) for domain in ("x", "y")}
    num_users = {d: len(dataset.users(d)) for d in ("x", "y")}
    num_items = {d: len(dataset.items(d)) for d in ("x", "y")}
    model = CiderModel(config, num_users, num_items, init_seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, betas=(0.9, 0.999))

    sampler = UserBatchSampler(dataset, train_cfg.group_size, sampler_seed, train_cfg.pair_fraction)
    vib_rng = np.random.default_rng(vib_seed)
    lookup = {d: _InteractionLookup(dataset, d, vib_rng) for d in ("x", "y")}
    noise_gen = torch_generator(noise_seed)
    centroid_rng = np.random.default_rng(centroid_seed)

    trained = TrainedModel(
        config=config, model=model, dataset_fingerprint=dataset.fingerprint()
    )
    log = TrainingLog()

    # centroid sets start from a shared k-means++ pass over paired users
    if components.shallow_cpa or components.deep_cpa:
        with torch.no_grad():
            rep_ux, _ = model.encode(adjacency["x"], "x")
            rep_uy, _ = model.encode(adjacency["y"], "y")
        pairs = sampler.pairable
        if components.shallow_cpa:
            trained.centroids_x, trained.centroids_y = _init_centroid_pair(
                rep_ux, rep_uy, pairs, config.cpa.num_centroids, centroid_rng, "shallow"
            )
        if components.deep_cpa:
            trained.deep_centroids_x, trained.deep_centroids_y = _init_centroid_pair(
                rep_ux, rep_uy, pairs, config.cpa.num_centroids, centroid_rng, "deep"
            )
        anchor_x = trained.centroids_x or trained.deep_centroids_x
        anchor_y = trained.centroids_y or trained.deep_centroids_y
        log.initial_alignment = float(cpa.centroid_alignment_loss(anchor_x, anchor_y).detach())

    population = max(len(dataset.training_users("x")), len(dataset.training_users("y")))
    steps_per_epoch = max(1, math.ceil(population / train_cfg.group_size))
    temperature = config.cpa.temperature
    initial_total: float | None = None

    def cpa_block(rep_u, batch_idx, sets):
        """Matching scores for one subspace: one tensor differentiating into
        the encoder (frozen centroids) and one into the centroids (frozen
        posteriors), sharing the same soft assignment."""
        mean = rep_u[0][batch_idx]
        var = rep_u[1][batch_idx]
        score_enc, resp = cpa.matching_score(mean, var, sets, temperature, detach_centroids=True)
        score_cent, _ = cpa.matching_score(
            mean.detach(), var.detach(), sets, temperature, responsibilities=resp
        )
        deviation = float((resp.sum(1) - 1).abs().max())
        log.max_assignment_deviation = max(log.max_assignment_deviation, deviation)
        return score_enc, score_cent, resp

    for epoch in range(train_cfg.epochs):
        for step in range(steps_per_epoch):
            rep_ux, rep_ix = model.encode(adjacency["x"], "x")
            rep_uy, rep_iy = model.encode(adjacency["y"], "y")
            batch = sampler.draw()
            rows_x = torch.from_numpy(batch.x)
            rows_y = torch.from_numpy(batch.y)

            shallow = torch.zeros((), dtype=DTYPE)
            deep = torch.zeros((), dtype=DTYPE)
            centroid_updates = []

            if components.shallow_cpa:
                sx = (rep_ux.shallow_mean, rep_ux.shallow_var)
                sy = (rep_uy.shallow_mean, rep_uy.shallow_var)
                enc_x, cent_x, resp_x = cpa_block(sx, rows_x, trained.centroids_x)
                enc_y, cent_y, resp_y = cpa_block(sy, rows_y, trained.centroids_y)
                align = cpa.centroid_alignment_loss(trained.centroids_x, trained.centroids_y)
                shallow = enc_x + enc_y + align.detach()
                centroid_updates.append(
                    (trained.centroids_x, trained.centroids_y, cent_x, cent_y, align, resp_x, resp_y)
                )
            elif components.shallow_mmd:
                shallow = rbf_mmd2(rep_ux.shallow_mean[rows_x], rep_uy.shallow_mean[rows_y])

            deep_x = rep_ux.deep_mean[rows_x]
            deep_y = rep_uy.deep_mean[rows_y]

            decomposition = None
            if components.decomposition:
                pair_rows = np.stack(
                    [np.arange(batch.n_paired), np.arange(batch.n_paired)], axis=1
                )
                decomposition = model.heads.decompose(deep_x, deep_y, pair_rows)

            if components.flow:
                # source latents detached: the flow fits the current pairing as a
                # density while the target-side encoder learns to be predictable;
                # a live source side lets the encoder cheat via the log-det term
                deep = flow_nll(
                    model.flow,
                    decomposition.variant_x[: batch.n_paired].detach(),
                    decomposition.variant_y[: batch.n_paired],
                    bandwidth=config.flow.bandwidth,
                    likelihood=config.flow.likelihood,
                )
            elif components.deep_cpa:
                dx = (rep_ux.deep_mean, rep_ux.deep_var)
                dy = (rep_uy.deep_mean, rep_uy.deep_var)
                enc_x, cent_x, resp_x = cpa_block(dx, rows_x, trained.deep_centroids_x)
                enc_y, cent_y, resp_y = cpa_block(dy, rows_y, trained.deep_centroids_y)
                align = cpa.centroid_alignment_loss(trained.deep_centroids_x, trained.deep_centroids_y)
                deep = enc_x + enc_y + align.detach()
                centroid_updates.append(
                    (
                        trained.deep_centroids_x,
                        trained.deep_centroids_y,
                        cent_x,
                        cent_y,
                        align,
                        resp_x,
                        resp_y,
                    )
                )
            elif components.deep_mmd:
                deep = rbf_mmd2(deep_x, deep_y)

            if components.decomposition:
                recon_x = reparameterize(decomposition.stable_x, decomposition.variant_x, generator=noise_gen)
                recon_y = reparameterize(decomposition.stable_y, decomposition.variant_y, generator=noise_gen)
            else:
                recon_x, recon_y = deep_x, deep_y

            vib_terms = {}
            for domain, recon, batch_users, rep_items in (
                ("x", recon_x, batch.x, rep_ix),
                ("y", recon_y, batch.y, rep_iy),
            ):
                pos, neg = lookup[domain].sample_pairs(batch_users, train_cfg.negatives_per_positive)
                item_deep = rep_items.deep_mean
                vib_terms[domain] = vib_bound(
                    recon,
                    item_deep[torch.from_numpy(pos)],
                    item_deep[torch.from_numpy(neg)],
                )

            loss, breakdown = total_loss(
                shallow, deep, vib_terms["x"], vib_terms["y"],
                train_cfg.weight_shallow, train_cfg.weight_deep,
            )

            if initial_total is None:
                initial_total = breakdown.total
            if not math.isfinite(breakdown.total) or breakdown.total > 1e3 * max(abs(initial_total), 1.0):
                raise TrainingDiverged(
                    f"loss diverged at epoch {epoch} step {step}: {breakdown}",
                    epoch=epoch,
                    step=step,
                    breakdown=breakdown,
                )

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            if centroid_updates and (epoch * steps_per_epoch + step) % config.cpa.update_period == 0:
                for set_x, set_y, cent_x, cent_y, align, resp_x, resp_y in centroid_updates:
                    # per-user matching pull so the cross-domain term stays
                    # relevant at any group size
                    target = (cent_x + cent_y) / batch.x.shape[0] + config.cpa.alignment_weight * align
                    grads = torch.autograd.grad(
                        target, [set_x.means, set_x.log_vars, set_y.means, set_y.log_vars]
                    )
                    set_x.apply_update(grads[0], grads[1], resp_x, config.cpa.centroid_lr)
                    set_y.apply_update(grads[2], grads[3], resp_y, config.cpa.centroid_lr)

            log.rows.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "L_s": breakdown.shallow,
                    "L_d": breakdown.deep,
                    "vib_x": breakdown.vib_x,
                    "vib_y": breakdown.vib_y,
                    "total": breakdown.total,
                }
            )

        if config.cpa.dump_centroids and (trained.centroids_x or trained.deep_centroids_x):
            for record in centroid_records(trained):
                log.centroid_snapshots.append({"epoch": epoch, **record})
        if trained.centroids_x is not None:
            log.epoch_alignment.append(
                float(cpa.centroid_alignment_loss(trained.centroids_x, trained.centroids_y).detach())
            )
        elif trained.deep_centroids_x is not None:
            log.epoch_alignment.append(
                float(
                    cpa.centroid_alignment_loss(
                        trained.deep_centroids_x, trained.deep_centroids_y
                    ).detach()
                )
            )

    return trained, log


# ---------------------------------------------------------------------------
# Checkpoint round trip


def _encoder_tensor_map(model: CiderModel) -> dict[str, torch.Tensor]:
    tensors = {}
    for domain, encoder in (("x", model.encoder_x), ("y", model.encoder_y)):
        tensors[f"domain/{domain}/user/base"] = model.base[f"user_{domain}"].detach()
        tensors[f"domain/{domain}/item/base"] = model.base[f"item_{domain}"].detach()
        for side, layers in (("user", encoder.user_layers), ("item", encoder.item_layers)):
            for index, layer in enumerate(layers, start=1):
                tensors[f"domain/{domain}/{side}/layer{index}/mu"] = layer.mean_head.weight.detach()
                tensors[f"domain/{domain}/{side}/layer{index}/sigma"] = layer.var_head.weight.detach()
        heads = model.heads
        stable = heads.stable_x if domain == "x" else heads.stable_y
        variant = heads.variant_x if domain == "x" else heads.variant_y
        tensors[f"domain/{domain}/decomp/stable"] = stable.weight.detach()
        tensors[f"domain/{domain}/decomp/variant"] = variant.weight.detach()
    return tensors


def _flow_tensor_map(model: CiderModel) -> dict[str, torch.Tensor]:
    tensors = {}
    for index, layer in enumerate(model.flow.layers, start=1):
        for name, param in layer.named_parameters():
            tensors[f"flow/layer{index}/{name}"] = param.detach()
    return tensors


def centroid_records(trained: TrainedModel) -> list[dict]:
    records = []
    for subspace, pair in (
        ("shallow", (trained.centroids_x, trained.centroids_y)),
        ("deep", (trained.deep_centroids_x, trained.deep_centroids_y)),
    ):
        for domain, centroid_set in zip(("x", "y"), pair):
            if centroid_set is None:
                continue
            means, variances, priors = centroid_set.detached()
            for t in range(centroid_set.count):
                records.append(
                    {
                        "domain": domain,
                        "t": t,
                        "mean": means[t].tolist(),
                        "variance": variances[t].tolist(),
                        "prior": float(priors[t]),
                        "subspace": subspace,
                    }
                )
    return records


def save_checkpoint(trained: TrainedModel, out_dir: str | Path) -> Path:
    """Write {config.json, encoder.ckpt, flow.ckpt, centroids.jsonl}."""
    from .config import config_to_dict

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": _CKPT_FORMAT_VERSION,
        "dataset_fingerprint": trained.dataset_fingerprint,
    }
    (out_dir / "config.json").write_text(
        json.dumps({"config": config_to_dict(trained.config), **meta}, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    torch.save(
        {"format_version": _CKPT_FORMAT_VERSION, "tensors": _encoder_tensor_map(trained.model)},
        out_dir / "encoder.ckpt",
    )
    torch.save(
        {"format_version": _CKPT_FORMAT_VERSION, "tensors": _flow_tensor_map(trained.model)},
        out_dir / "flow.ckpt",
    )
    lines = [json.dumps(record, sort_keys=True) for record in centroid_records(trained)]
    (out_dir / "centroids.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return out_dir


def load_checkpoint(ckpt_dir: str | Path) -> TrainedModel:
    from .config import config_from_dict

    ckpt_dir = Path(ckpt_dir)
    header = json.loads((ckpt_dir / "config.json").read_text(encoding="utf-8"))
    if header.get("format_version") != _CKPT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {header.get('format_version')!r}")
    config = config_from_dict(header["config"])

    encoder_blob = torch.load(ckpt_dir / "encoder.ckpt", weights_only=True)
    flow_blob = torch.load(ckpt_dir / "flow.ckpt", weights_only=True)
    tensors = dict(encoder_blob["tensors"])
    tensors.update(flow_blob["tensors"])

    num_users = {d: tensors[f"domain/{d}/user/base"].shape[0] for d in ("x", "y")}
    num_items = {d: tensors[f"domain/{d}/item/base"].shape[0] for d in ("x", "y")}
    model = CiderModel(config, num_users, num_items, init_seed=0)
    with torch.no_grad():
        expected = _encoder_tensor_map(model)
        expected.update(_flow_tensor_map(model))
        missing = set(expected) - set(tensors)
        if missing:
            raise ConfigError(f"checkpoint missing tensors: {sorted(missing)[:3]}...")
        name_to_param = dict(_live_tensor_map(model))
        for key, value in tensors.items():
            name_to_param[key].copy_(value)

    trained = TrainedModel(
        config=config,
        model=model,
        dataset_fingerprint=header.get("dataset_fingerprint", ""),
    )
    _load_centroids(trained, ckpt_dir / "centroids.jsonl")
    return trained


def _live_tensor_map(model: CiderModel):
    for domain, encoder in (("x", model.encoder_x), ("y", model.encoder_y)):
        yield f"domain/{domain}/user/base", model.base[f"user_{domain}"]
        yield f"domain/{domain}/item/base", model.base[f"item_{domain}"]
        for side, layers in (("user", encoder.user_layers), ("item", encoder.item_layers)):
            for index, layer in enumerate(layers, start=1):
                yield f"domain/{domain}/{side}/layer{index}/mu", layer.mean_head.weight
                yield f"domain/{domain}/{side}/layer{index}/sigma", layer.var_head.weight
        stable = model.heads.stable_x if domain == "x" else model.heads.stable_y
        variant = model.heads.variant_x if domain == "x" else model.heads.variant_y
        yield f"domain/{domain}/decomp/stable", stable.weight
        yield f"domain/{domain}/decomp/variant", variant.weight
    for index, layer in enumerate(model.flow.layers, start=1):
        for name, param in layer.named_parameters():
            yield f"flow/layer{index}/{name}", param


def _load_centroids(trained: TrainedModel, path: Path) -> None:
    if not path.exists():
        return
    text = path.read_text(encoding="utf-8").strip()
    if not text:
        return
    buckets: dict[tuple[str, str], list[dict]] = {}
    for line in text.splitlines():
        record = json.loads(line)
        buckets.setdefault((record.get("subspace", "shallow"), record["domain"]), []).append(record)
    for (subspace, domain), records in buckets.items():
        records.sort(key=lambda r: r["t"])
        means = torch.tensor([r["mean"] for r in records], dtype=DTYPE)
        variances = torch.tensor([r["variance"] for r in records], dtype=DTYPE)
        priors = torch.tensor([r["prior"] for r in records], dtype=DTYPE)
        centroid_set = cpa.CentroidSet(means, variances, priors)
        attr = ("centroids_" if subspace == "shallow" else "deep_centroids_") + domain
        setattr(trained, attr, centroid_set)
