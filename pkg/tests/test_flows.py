import math

import numpy as np
import pytest
import torch

from cider.errors import ConfigError, ContractError
from cider.flows import (
    FLOW_KINDS,
    DecompositionHeads,
    ElementwiseAffine,
    FlowTransform,
    build_flow,
    cross_domain_infer,
    flow_nll,
    reparameterize,
)
from cider.numerics import DTYPE, perturb_parameters, torch_generator
from cider.stats import rbf_mmd

WIDTH = 6


def perturbed_flow(kind, width=WIDTH, layers=2, seed=0, scale=0.4, **kwargs):
    gen = torch_generator(seed)
    flow = build_flow(kind, width, layers, gen, **kwargs)
    perturb_parameters(flow, scale, gen)
    return flow


class TestLayerContract:
    @pytest.mark.parametrize("kind", FLOW_KINDS)
    def test_identity_at_initialization(self, kind, gen):
        flow = build_flow(kind, WIDTH, 3, gen, ode_steps=32)
        z = torch.randn(64, WIDTH, dtype=DTYPE, generator=gen)
        out, logdet = flow.forward_transform(z)
        assert float((out - z).abs().max()) < 1e-9
        assert float(logdet.abs().max()) < 1e-9

    @pytest.mark.parametrize("kind", FLOW_KINDS)
    def test_round_trip_and_logdet_cancellation(self, kind, gen):
        flow = perturbed_flow(kind, seed=3, ode_steps=64)
        z = torch.randn(200, WIDTH, dtype=DTYPE, generator=gen)
        out, ld_fwd = flow.forward_transform(z)
        back, ld_inv = flow.inverse_transform(out)
        assert float((back - z).abs().max()) < 1e-4
        assert float((ld_fwd + ld_inv).abs().max()) < 1e-5

    @pytest.mark.parametrize("kind", FLOW_KINDS)
    def test_logdet_matches_finite_difference_jacobian(self, kind):
        width = 3
        flow = perturbed_flow(kind, width=width, layers=2, seed=11, ode_steps=64)
        gen = torch_generator(5)
        eps = 1e-6
        for _ in range(4):
            z = torch.randn(1, width, dtype=DTYPE, generator=gen)
            _, logdet = flow.forward_transform(z)
            jac = torch.zeros(width, width, dtype=DTYPE)
            for j in range(width):
                hi = z.clone()
                hi[0, j] += eps
                lo = z.clone()
                lo[0, j] -= eps
                jac[:, j] = (flow.forward_transform(hi)[0] - flow.forward_transform(lo)[0])[0] / (2 * eps)
            reference = float(torch.log(torch.det(jac).abs()))
            assert float(logdet[0]) == pytest.approx(reference, rel=1e-3, abs=1e-5)

    def test_affine_layer_logdet(self):
        layer = ElementwiseAffine(2.0, 1.0, width=3)
        z = torch.zeros(5, 3, dtype=DTYPE)
        out, logdet = layer.forward_transform(z)
        assert torch.allclose(out, torch.ones(5, 3, dtype=DTYPE))
        assert float(logdet[0]) == pytest.approx(3 * math.log(2), abs=1e-12)
        back, inv_logdet = layer.inverse_transform(out)
        assert torch.allclose(back, z)
        assert float((logdet + inv_logdet).abs().max()) == 0.0

    def test_unknown_kind_rejected(self, gen):
        with pytest.raises(ConfigError):
            build_flow("planar", 4, 2, gen)


def pushforward_integral(flow, half_width=8.0, cells=640, chunk=200_000):
    """Midpoint quadrature of p(F(z)) |det J| over a square grid; cell
    centers keep the nodes off the spline boundary kinks."""
    edges = torch.linspace(-half_width, half_width, cells + 1, dtype=DTYPE)
    centers = 0.5 * (edges[:-1] + edges[1:])
    grid = torch.cartesian_prod(centers, centers)
    area = float(edges[1] - edges[0]) ** 2
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(grid), chunk):
            block = grid[start : start + chunk]
            mapped, logdet = flow.forward_transform(block)
            log_density = -0.5 * (mapped**2).sum(1) - math.log(2 * math.pi)
            total += float(torch.exp(log_density + logdet).sum()) * area
    return total


class TestChangeOfVariables:
    @pytest.mark.parametrize("kind", ["maf", "naf", "ncsf"])
    def test_pushforward_density_integrates_to_one(self, kind):
        flow = perturbed_flow(kind, width=2, layers=2, seed=7, scale=0.3)
        assert pushforward_integral(flow) == pytest.approx(1.0, abs=0.01)


class TestDecomposition:
    def test_zero_input_hits_known_activations(self, gen):
        heads = DecompositionHeads(4, gen)
        zeros = torch.zeros(3, 4, dtype=DTYPE)
        dec = heads.decompose(zeros, zeros, np.zeros((0, 2)))
        assert torch.allclose(dec.stable_x, zeros)
        assert torch.allclose(dec.variant_x, torch.full((3, 4), 0.5, dtype=DTYPE))

    def test_identity_weights_one_dim(self, gen):
        heads = DecompositionHeads(1, gen)
        with torch.no_grad():
            for head in (heads.stable_x, heads.variant_x):
                head.weight.copy_(torch.eye(1, dtype=DTYPE))
        dec = heads.decompose(torch.ones(1, 1, dtype=DTYPE), torch.zeros(1, 1, dtype=DTYPE), np.zeros((0, 2)))
        assert float(dec.stable_x) == pytest.approx(1.0)
        assert float(dec.variant_x) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)

    def test_variant_latents_stay_in_unit_interval(self, gen):
        heads = DecompositionHeads(5, gen)
        wild = torch.randn(50, 5, dtype=DTYPE, generator=gen) * 30
        dec = heads.decompose(wild, -wild, np.zeros((0, 2)))
        for tensor in (dec.variant_x, dec.variant_y):
            assert float(tensor.min()) > 0.0 and float(tensor.max()) < 1.0

    def test_paired_rows_share_the_stable_latent(self, gen):
        heads = DecompositionHeads(3, gen)
        dx = torch.randn(4, 3, dtype=DTYPE, generator=gen)
        dy = torch.randn(4, 3, dtype=DTYPE, generator=gen)
        pairs = np.array([[0, 0], [2, 1]])
        dec = heads.decompose(dx, dy, pairs)
        assert torch.allclose(dec.stable_x[0], dec.stable_y[0])
        assert torch.allclose(dec.stable_x[2], dec.stable_y[1])
        assert not torch.allclose(dec.stable_x[1], dec.stable_y[2])


class TestReparameterize:
    def test_vanishing_scale_returns_stable(self):
        stable = torch.randn(5, 3, dtype=DTYPE, generator=torch_generator(0))
        variant = torch.full((5, 3), 1e-6, dtype=DTYPE)
        out = reparameterize(stable, variant, generator=torch_generator(1))
        assert float((out - stable).abs().max()) < 1e-4

    def test_evaluation_mode_is_exact(self):
        stable = torch.randn(5, 3, dtype=DTYPE, generator=torch_generator(0))
        variant = torch.rand(5, 3, dtype=DTYPE, generator=torch_generator(1))
        assert torch.equal(reparameterize(stable, variant), stable)

    def test_monte_carlo_variance_recovers_scale(self):
        gen = torch_generator(2)
        stable = torch.zeros(1, 4, dtype=DTYPE)
        variant = torch.tensor([[0.2, 0.5, 0.8, 0.35]], dtype=DTYPE)
        draws = torch.stack(
            [reparameterize(stable, variant, generator=gen) for _ in range(100_000)]
        ).squeeze(1)
        sample_var = draws.var(dim=0)
        assert torch.allclose(sample_var, variant.squeeze(0) ** 2, rtol=0.03)


class TestFlowNll:
    def test_identity_flow_zero_residual_hits_floor(self, gen):
        width, bandwidth = 3, 0.1
        flow = build_flow("maf", width, 2, gen)
        z = torch.rand(10, width, dtype=DTYPE, generator=gen)
        value = flow_nll(flow, z, z.clone(), bandwidth=bandwidth)
        floor = width * math.log(bandwidth * math.sqrt(2 * math.pi))
        assert float(value) == pytest.approx(floor, abs=1e-9)

    def test_loss_increases_with_residual_norm(self, gen):
        flow = build_flow("maf", 3, 2, gen)
        z = torch.rand(10, 3, dtype=DTYPE, generator=gen)
        last = None
        for shift in (0.0, 0.05, 0.1, 0.2, 0.4):
            value = float(flow_nll(flow, z, z + shift))
            if last is not None:
                assert value > last
            last = value

    def test_doubling_affine_contributes_logdet(self, gen):
        width = 4
        flow = FlowTransform("affine", [ElementwiseAffine(2.0, 0.0, width)])
        z = torch.rand(6, width, dtype=DTYPE, generator=gen)
        mapped = 2 * z
        with_det = float(flow_nll(flow, z, mapped))
        floor = width * math.log(0.1 * math.sqrt(2 * math.pi))
        assert with_det == pytest.approx(floor - width * math.log(2), abs=1e-9)

    def test_empty_pairs_yield_zero(self, gen):
        flow = build_flow("maf", 3, 1, gen)
        value = flow_nll(flow, torch.zeros(0, 3, dtype=DTYPE), torch.zeros(0, 3, dtype=DTYPE))
        assert float(value) == 0.0

    def test_base_likelihood_switch(self, gen):
        flow = build_flow("maf", 2, 1, gen)
        z = torch.zeros(4, 2, dtype=DTYPE)
        value = float(flow_nll(flow, z, z, likelihood="base"))
        assert value == pytest.approx(math.log(2 * math.pi), abs=1e-9)


class TestCrossDomainInfer:
    def test_identity_flow_matches_direct_path(self, gen):
        flow = build_flow("ncsf", 4, 2, gen)
        stable = torch.randn(5, 4, dtype=DTYPE, generator=gen)
        variant = torch.rand(5, 4, dtype=DTYPE, generator=gen)
        inferred = cross_domain_infer(flow, stable, variant, direction="x_to_y")
        assert torch.allclose(inferred, stable)  # evaluation mode eps = 0

    def test_round_trip_through_both_directions(self, gen):
        flow = perturbed_flow("ncsf", width=4, seed=9, scale=0.4)
        variant = torch.rand(20, 4, dtype=DTYPE, generator=gen)
        mapped, _ = flow.forward_transform(variant)
        back, _ = flow.inverse_transform(mapped)
        assert float((back - variant).abs().max()) < 1e-4

    def test_bad_direction_rejected(self, gen):
        flow = build_flow("maf", 2, 1, gen)
        with pytest.raises(ContractError):
            cross_domain_infer(flow, torch.zeros(1, 2, dtype=DTYPE), torch.zeros(1, 2, dtype=DTYPE), direction="sideways")


def _paired_latent_data(n, width, seed):
    """Synthetic correlated pair: target is a fixed smooth bijection of the source."""
    gen = torch_generator(seed)
    source = torch.sigmoid(torch.randn(n, width, dtype=DTYPE, generator=gen))
    mix = torch.eye(width, dtype=DTYPE) + 0.3 * torch.randn(width, width, dtype=DTYPE, generator=torch_generator(77))
    logits = torch.logit(source.clamp(1e-6, 1 - 1e-6)) @ mix.T + 0.4
    target = torch.sigmoid(logits)
    return source, target


def _fit_flow(kind, source, target, seed, steps=500):
    flow = build_flow(kind, source.shape[1], 3, torch_generator(seed), spline_bins=16)
    optimizer = torch.optim.Adam(flow.parameters(), lr=1e-2)
    for _ in range(steps):
        optimizer.zero_grad()
        loss = flow_nll(flow, source, target, bandwidth=0.05)
        loss.backward()
        optimizer.step()
    return flow


class TestIdentifiability:
    def test_trained_flow_matches_target_distribution(self):
        source, target = _paired_latent_data(2200, 3, seed=21)
        flow = _fit_flow("ncsf", source[:1200], target[:1200], seed=1)
        with torch.no_grad():
            mapped, _ = flow.forward_transform(source[1200:])
        assert float(rbf_mmd(mapped, target[1200:])) < 0.05

    def test_two_trainings_agree_up_to_the_data_map(self):
        # two flows fit on the same pairs push the same inputs to the same law
        source, target = _paired_latent_data(2200, 3, seed=33)
        flow_a = _fit_flow("ncsf", source[:1200], target[:1200], seed=2)
        flow_b = _fit_flow("ncsf", source[:1200], target[:1200], seed=3)
        with torch.no_grad():
            pushed_a, _ = flow_a.forward_transform(source[1200:])
            pushed_b, _ = flow_b.forward_transform(source[1200:])
        assert float(rbf_mmd(pushed_a, pushed_b)) < 0.05
