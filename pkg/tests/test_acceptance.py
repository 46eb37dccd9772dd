"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one pass/fail line; run with ``pytest -s
tests/test_acceptance.py`` to see them as they complete. The desk-scale
task (500 users per domain, 200 items, 300 overlap, correlation 0.9)
drives the comparative criteria; heavier shared artifacts are built once
per session.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch
from scipy import integrate

from cider.centroids import kl_diag_gaussian
from cider.config import (
    CpaConfig,
    DataConfig,
    EvalConfig,
    ExperimentConfig,
    FlowConfig,
    TrainConfig,
)
from cider.data import apply_overlap_ratio, build_adjacency, sample_negatives, save_dataset, load_dataset
from cider.encoder import EncoderConfig
from cider.evaluation import build_pools, compute_metrics, evaluate
from cider.flows import build_flow
from cider.numerics import DTYPE, perturb_parameters, torch_generator
from cider.synthetic import SyntheticSpec, generate_synthetic
from cider.training import CiderModel, train, vib_bound
from tests.test_evaluation import brute_force_metrics
from tests.test_flows import pushforward_integral


@contextmanager
def criterion(number: int, name: str):
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"[acceptance] criterion {number} ({name}): FAIL after {time.time() - start:.1f}s")
        raise
    print(f"[acceptance] criterion {number} ({name}): PASS in {time.time() - start:.1f}s")


# ---------------------------------------------------------------------------
# Shared desk-scale task

TASK_SPEC = SyntheticSpec(
    users_per_domain=500,
    items_per_domain=200,
    overlap=300,
    clusters=2,
    correlation=0.9,
    interactions_per_user=20,
    seed=0,
)

SEEDS = (1, 2, 3, 4, 5)


def task_config(variant: str, seed: int) -> ExperimentConfig:
    return ExperimentConfig(
        data=DataConfig(synthetic=TASK_SPEC),
        encoder=EncoderConfig(num_layers=3, shallow_layers=2, embed_dim=8),
        cpa=CpaConfig(num_centroids=4, temperature=3.0),
        flow=FlowConfig(kind="ncsf", num_layers=2),
        train=TrainConfig(
            epochs=35, group_size=32, seed=seed, variant=variant,
            learning_rate=3e-3, weight_shallow=0.03, weight_deep=0.3,
            negatives_per_positive=4,
        ),
        evaluation=EvalConfig(pool_size=100),
    )


@pytest.fixture(scope="session")
def task_dataset():
    return generate_synthetic(TASK_SPEC)


@pytest.fixture(scope="session")
def task_pools(task_dataset):
    return build_pools(task_dataset, seed=1, pool_size=100)


def _mean_mrr(metrics: dict) -> float:
    return 0.5 * (metrics["x"]["MRR"] + metrics["y"]["MRR"])


@pytest.fixture(scope="session")
def ablation_runs(task_dataset, task_pools):
    """Median-ready MRR samples for the compared variants; the ``full``
    entries double as the 100%-overlap arm of the ratio experiment."""
    results = {}
    for variant in ("full", "A", "C", "D"):
        samples = []
        for seed in SEEDS:
            trained, _ = train(task_dataset, task_config(variant, seed))
            metrics, _ = evaluate(trained, task_dataset, task_pools, "test")
            samples.append(_mean_mrr(metrics))
        results[variant] = samples
    return results


# ---------------------------------------------------------------------------
# 1. KL closed form


def test_criterion_1_kl_closed_form():
    with criterion(1, "KL closed form vs quadrature and Monte Carlo"):
        start = time.time()
        rng = np.random.default_rng(42)
        gen = torch_generator(42)

        for _ in range(20):  # 1-D quadrature oracle
            mq, mp = rng.normal(size=2)
            vq, vp = rng.uniform(0.2, 3.0, size=2)

            def integrand(x):
                log_q = -0.5 * (x - mq) ** 2 / vq - 0.5 * math.log(2 * math.pi * vq)
                log_p = -0.5 * (x - mp) ** 2 / vp - 0.5 * math.log(2 * math.pi * vp)
                return math.exp(log_q) * (log_q - log_p)

            oracle, _ = integrate.quad(integrand, mq - 14 * math.sqrt(vq), mq + 14 * math.sqrt(vq), limit=300)
            closed = float(
                kl_diag_gaussian(
                    torch.tensor([mq], dtype=DTYPE), torch.tensor([vq], dtype=DTYPE),
                    torch.tensor([mp], dtype=DTYPE), torch.tensor([vp], dtype=DTYPE),
                )
            )
            assert closed == pytest.approx(oracle, rel=0.01, abs=1e-9)

        for _ in range(20):  # multi-dimensional Monte Carlo oracle
            width = int(rng.integers(2, 9))
            mq = torch.randn(width, dtype=DTYPE, generator=gen)
            mp = torch.randn(width, dtype=DTYPE, generator=gen)
            vq = torch.rand(width, dtype=DTYPE, generator=gen) * 2 + 0.2
            vp = torch.rand(width, dtype=DTYPE, generator=gen) * 2 + 0.2
            samples = mq + torch.randn(100_000, width, dtype=DTYPE, generator=gen) * vq.sqrt()
            log_q = (-0.5 * (samples - mq) ** 2 / vq - 0.5 * torch.log(2 * math.pi * vq)).sum(1)
            log_p = (-0.5 * (samples - mp) ** 2 / vp - 0.5 * torch.log(2 * math.pi * vp)).sum(1)
            mc = float((log_q - log_p).mean())
            closed = float(kl_diag_gaussian(mq, vq, mp, vp))
            assert closed == pytest.approx(mc, rel=0.01, abs=0.02)

        assert time.time() - start < 10.0


# ---------------------------------------------------------------------------
# 2. Flow contract


def test_criterion_2_flow_contract():
    with criterion(2, "flow round trip and log-det vs finite differences"):
        start = time.time()
        for kind in ("maf", "naf", "node", "ncsf"):
            gen = torch_generator(17)
            flow = build_flow(kind, 8, 2, gen)
            perturb_parameters(flow, 0.4, gen)
            z = torch.randn(1000, 8, dtype=DTYPE, generator=gen)
            with torch.no_grad():
                out, ld_fwd = flow.forward_transform(z)
                back, ld_inv = flow.inverse_transform(out)
            assert float((back - z).abs().max()) < 1e-4, kind
            assert float((ld_fwd + ld_inv).abs().max()) < 1e-5, kind

            for width in (2, 4):
                gen_w = torch_generator(23 + width)
                small = build_flow(kind, width, 2, gen_w)
                perturb_parameters(small, 0.4, gen_w)
                eps = 1e-6
                for _ in range(3):
                    point = torch.randn(1, width, dtype=DTYPE, generator=gen_w)
                    with torch.no_grad():
                        _, logdet = small.forward_transform(point)
                        jac = torch.zeros(width, width, dtype=DTYPE)
                        for j in range(width):
                            hi, lo = point.clone(), point.clone()
                            hi[0, j] += eps
                            lo[0, j] -= eps
                            jac[:, j] = (
                                small.forward_transform(hi)[0] - small.forward_transform(lo)[0]
                            )[0] / (2 * eps)
                    reference = float(torch.log(torch.det(jac).abs()))
                    assert float(logdet[0]) == pytest.approx(reference, rel=1e-3, abs=1e-5), kind
        assert time.time() - start < 60.0


# ---------------------------------------------------------------------------
# 3. Change-of-variables conservation


def test_criterion_3_change_of_variables():
    with criterion(3, "pushforward density integrates to one"):
        for kind, cells in (("maf", 640), ("naf", 640), ("ncsf", 640), ("node", 200)):
            gen = torch_generator(7)
            flow = build_flow(kind, 2, 2, gen, ode_steps=32)
            perturb_parameters(flow, 0.3, gen)
            integral = pushforward_integral(flow, cells=cells)
            assert integral == pytest.approx(1.0, abs=0.01), kind


# ---------------------------------------------------------------------------
# 4. Metric oracle and the uniform-rank band


def test_criterion_4_metric_oracle_and_uniform_band():
    with criterion(4, "metric oracle equality and untrained MRR band"):
        rng = np.random.default_rng(4)
        for _ in range(100):
            ranks = rng.integers(1, 1001, size=int(rng.integers(1, 60)))
            got = compute_metrics(ranks)
            expected = brute_force_metrics(ranks.tolist())
            assert got == pytest.approx(expected, abs=1e-15)

        # untrained model against 1000-candidate pools
        spec = SyntheticSpec(
            users_per_domain=1500, items_per_domain=1150, overlap=1200,
            clusters=2, correlation=0.9, interactions_per_user=20, seed=8,
        )
        dataset = generate_synthetic(spec)
        config = ExperimentConfig(
            data=DataConfig(synthetic=spec),
            encoder=EncoderConfig(num_layers=3, shallow_layers=2, embed_dim=8),
            cpa=CpaConfig(num_centroids=2),
            flow=FlowConfig(kind="ncsf", num_layers=1),
            train=TrainConfig(epochs=0, group_size=32, seed=3),
            evaluation=EvalConfig(pool_size=999),
        )
        trained, _ = train(dataset, config)
        pools = build_pools(dataset, seed=3, pool_size=999)
        metrics, rankings = evaluate(trained, dataset, pools, "test")
        observed = np.concatenate([rankings["x"].rank_array(), rankings["y"].rank_array()])
        measured = float(np.mean(1.0 / observed))

        n_eval = len(observed)
        draws = rng.integers(1, 1001, size=(4000, n_eval))
        simulated = (1.0 / draws).mean(axis=1)
        lo, hi = np.quantile(simulated, [0.0025, 0.9975])
        assert lo <= measured <= hi, (measured, lo, hi)


# ---------------------------------------------------------------------------
# 5. CPA convergence


def test_criterion_5_cpa_convergence():
    with criterion(5, "centroid alignment drops 90% on matched clusters"):
        start = time.time()
        spec = SyntheticSpec(
            users_per_domain=300, items_per_domain=200, overlap=200, clusters=2,
            correlation=1.0, interactions_per_user=15, seed=5,
        )
        dataset = generate_synthetic(spec)
        config = ExperimentConfig(
            data=DataConfig(synthetic=spec),
            encoder=EncoderConfig(num_layers=3, shallow_layers=2, embed_dim=8),
            cpa=CpaConfig(num_centroids=2, temperature=3.0),
            flow=FlowConfig(kind="ncsf", num_layers=2),
            train=TrainConfig(epochs=50, group_size=32, seed=7, learning_rate=3e-3,
                              weight_shallow=0.03, weight_deep=0.3),
            evaluation=EvalConfig(pool_size=100),
        )
        _, log = train(dataset, config)
        assert log.initial_alignment is not None and log.initial_alignment > 0
        final = log.epoch_alignment[-1]
        assert final <= 0.1 * log.initial_alignment, (log.initial_alignment, final)
        assert log.max_assignment_deviation < 1e-6
        assert time.time() - start < 120.0


# ---------------------------------------------------------------------------
# 6. Ablation ordering


def test_criterion_6_ablation_ordering(ablation_runs):
    with criterion(6, "variant ordering on the planted task"):
        med = {variant: float(np.median(values)) for variant, values in ablation_runs.items()}
        # full beats encoding-only by at least 10% relative
        assert med["full"] > 1.10 * med["A"], med
        # full is no worse than the flow-less variant, which in turn sits
        # within a small tolerance of the centroid-only variant
        assert med["full"] >= med["D"], med
        assert med["D"] >= 0.95 * med["C"], med


# ---------------------------------------------------------------------------
# 7. Overlap-ratio direction


def test_criterion_7_overlap_ratio_direction(task_dataset, task_pools, ablation_runs):
    with criterion(7, "more overlap does not hurt; 0% uses cross-domain inference"):
        zero_mrrs = []
        for seed in SEEDS:
            config = task_config("full", seed)
            pruned = apply_overlap_ratio(task_dataset, 0.0, seed=config.train.seed)
            # every overlap user must be cold in exactly one domain now
            degrees = {d: build_adjacency(pruned, d).user_degree for d in ("x", "y")}
            cold = [
                (ix, iy)
                for _, ix, iy in pruned.overlap_indices()
                if degrees["x"][ix] == 0 or degrees["y"][iy] == 0
            ]
            assert len(cold) == len(pruned.overlap_users)
            trained, _ = train(pruned, config)
            metrics, _ = evaluate(trained, pruned, task_pools, "test")
            zero_mrrs.append(_mean_mrr(metrics))
        full_overlap = float(np.median(ablation_runs["full"]))
        zero_overlap = float(np.median(zero_mrrs))
        assert full_overlap >= zero_overlap, (full_overlap, zero_overlap)


# ---------------------------------------------------------------------------
# 8. Gradient integrity


def _finite_difference_check(loss_fn, params, rel_tol=1e-4, eps=1e-5):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [
        torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)
    ]
    analytic = torch.cat([g.reshape(-1) for g in grads])
    fd_parts = []
    for p in params:
        flat = p.detach().reshape(-1)
        fd = torch.zeros_like(flat)
        for j in range(flat.numel()):
            original = float(flat[j])
            with torch.no_grad():
                flat[j] = original + eps
            hi = float(loss_fn().detach())
            with torch.no_grad():
                flat[j] = original - eps
            lo = float(loss_fn().detach())
            with torch.no_grad():
                flat[j] = original
            fd[j] = (hi - lo) / (2 * eps)
        fd_parts.append(fd)
    numeric = torch.cat(fd_parts)
    denom = max(float(analytic.norm()), 1e-10)
    assert float((analytic - numeric).norm()) / denom < rel_tol


def test_criterion_8_gradient_integrity():
    with criterion(8, "gradients of the three objectives match finite differences"):
        from cider.centroids import centroid_alignment_loss, init_paired_centroids, matching_score, soft_assign
        from cider.flows import flow_nll, reparameterize

        spec = SyntheticSpec(
            users_per_domain=5, items_per_domain=5, overlap=5, clusters=1,
            correlation=1.0, interactions_per_user=3, seed=2,
        )
        dataset = generate_synthetic(spec)
        config = ExperimentConfig(
            data=DataConfig(synthetic=spec),
            encoder=EncoderConfig(num_layers=2, shallow_layers=1, embed_dim=3),
            cpa=CpaConfig(num_centroids=2, temperature=3.0),
            flow=FlowConfig(kind="ncsf", num_layers=1, hidden=8, spline_bins=4),
            train=TrainConfig(epochs=1, group_size=5, seed=4),
            evaluation=EvalConfig(pool_size=1),
        )
        model = CiderModel(config, {"x": 5, "y": 5}, {"x": 5, "y": 5}, init_seed=9)
        adjacency = {d: build_adjacency(dataset, d) for d in ("x", "y")}
        rng = np.random.default_rng(0)

        with torch.no_grad():
            rep_ux, _ = model.encode(adjacency["x"], "x")
            rep_uy, _ = model.encode(adjacency["y"], "y")
        pairs = np.stack([np.arange(5), np.arange(5)], axis=1)
        cx, cy = init_paired_centroids(
            rep_ux.shallow_mean, rep_ux.shallow_var,
            rep_uy.shallow_mean, rep_uy.shallow_var, pairs, 2, rng,
        )
        resp_x = soft_assign(rep_ux.shallow_mean, rep_ux.shallow_var, cx, 3.0)
        resp_y = soft_assign(rep_uy.shallow_mean, rep_uy.shallow_var, cy, 3.0)

        model_params = [p for p in model.parameters()]
        centroid_params = cx.parameters() + cy.parameters()
        noise = torch.randn(5, model.deep_width, dtype=DTYPE, generator=torch_generator(3))
        pos_items = torch.from_numpy(rng.integers(0, 5, size=5))
        neg_items = torch.from_numpy(rng.integers(0, 5, size=(5, 1)))

        def shallow_loss():
            u_x, _ = model.encode(adjacency["x"], "x")
            u_y, _ = model.encode(adjacency["y"], "y")
            m_x, _ = matching_score(u_x.shallow_mean, u_x.shallow_var, cx, 3.0, responsibilities=resp_x)
            m_y, _ = matching_score(u_y.shallow_mean, u_y.shallow_var, cy, 3.0, responsibilities=resp_y)
            return m_x + m_y + centroid_alignment_loss(cx, cy)

        def deep_loss():
            u_x, _ = model.encode(adjacency["x"], "x")
            u_y, _ = model.encode(adjacency["y"], "y")
            dec = model.heads.decompose(u_x.deep_mean, u_y.deep_mean, pairs)
            return flow_nll(model.flow, dec.variant_x, dec.variant_y, bandwidth=0.1)

        def prediction_bound():
            u_x, i_x = model.encode(adjacency["x"], "x")
            u_y, _ = model.encode(adjacency["y"], "y")
            dec = model.heads.decompose(u_x.deep_mean, u_y.deep_mean, pairs)
            recon = reparameterize(dec.stable_x, dec.variant_x, noise=noise)
            return vib_bound(recon, i_x.deep_mean[pos_items], i_x.deep_mean[neg_items])

        _finite_difference_check(shallow_loss, model_params + centroid_params)
        _finite_difference_check(deep_loss, model_params)
        _finite_difference_check(prediction_bound, model_params)


# ---------------------------------------------------------------------------
# 9. Determinism


def test_criterion_9_determinism():
    with criterion(9, "identical seeds reproduce loss logs and reports"):
        spec = SyntheticSpec(
            users_per_domain=60, items_per_domain=60, overlap=30, clusters=2,
            correlation=1.0, interactions_per_user=6, seed=3,
        )
        dataset = generate_synthetic(spec)
        config = ExperimentConfig(
            data=DataConfig(synthetic=spec),
            encoder=EncoderConfig(num_layers=3, shallow_layers=2, embed_dim=4),
            cpa=CpaConfig(num_centroids=2),
            flow=FlowConfig(kind="ncsf", num_layers=1),
            train=TrainConfig(epochs=3, group_size=8, seed=6, learning_rate=3e-3),
            evaluation=EvalConfig(pool_size=20),
        )
        pools = build_pools(dataset, config.train.seed, 20)
        runs = []
        for _ in range(2):
            trained, log = train(dataset, config)
            metrics, _ = evaluate(trained, dataset, pools, "test")
            runs.append((log.rows, metrics))
        for row_a, row_b in zip(runs[0][0], runs[1][0]):
            for key in ("L_s", "L_d", "vib_x", "vib_y", "total"):
                assert abs(row_a[key] - row_b[key]) <= 1e-10
        for domain in ("x", "y"):
            for key in runs[0][1][domain]:
                assert abs(runs[0][1][domain][key] - runs[1][1][domain][key]) <= 1e-10


# ---------------------------------------------------------------------------
# 10. Dataset-contract suite


def test_criterion_10_dataset_contracts(tmp_path):
    with criterion(10, "splits, adjacency, negatives, serialization"):
        start = time.time()
        dataset = generate_synthetic(TASK_SPEC)

        counts = {s: sum(1 for v in dataset.split.values() if v == s) for s in ("train", "test", "validation")}
        assert counts == {"train": 240, "test": 30, "validation": 30}
        assert set(dataset.split) == set(dataset.overlap_users)

        for domain in ("x", "y"):
            adjacency = build_adjacency(dataset, domain)
            expected = 1.0 / np.sqrt(
                adjacency.user_degree[adjacency.user_idx] * adjacency.item_degree[adjacency.item_idx]
            )
            assert np.abs(adjacency.weights - expected).max() < 1e-12

            pool = sample_negatives(dataset, domain, seed=11, pool_size=100)
            interacted = dataset.interacted_items(domain)
            for user, negatives in pool.negatives.items():
                assert len(negatives) == 100
                assert len(set(negatives.tolist())) == 100
                assert not set(negatives.tolist()) & interacted[user]

        cache_a = tmp_path / "a.json"
        cache_b = tmp_path / "b.json"
        save_dataset(dataset, cache_a)
        reloaded = load_dataset(cache_a)
        save_dataset(reloaded, cache_b)
        assert cache_a.read_bytes() == cache_b.read_bytes()
        assert reloaded.split == dataset.split
        assert np.array_equal(reloaded.interactions_x, dataset.interactions_x)
        assert time.time() - start < 30.0
