import numpy as np
import pytest

from cider.data import load_domain_pair
from cider.errors import ConfigError
from cider.synthetic import SyntheticSpec, generate_synthetic, write_domain_csvs


def modal_cluster(dataset, domain, user, clusters):
    """Recover a user's planted cluster from its interactions: items are
    partitioned into contiguous blocks, and 80% of draws stay in-block."""
    n_items = len(dataset.items(domain))
    item_cluster = (np.arange(n_items) * clusters) // n_items
    items = [v for u, v in dataset.interactions(domain) if u == user]
    return np.bincount(item_cluster[items], minlength=clusters).argmax()


class TestGenerator:
    def test_full_correlation_copies_clusters(self):
        spec = SyntheticSpec(
            users_per_domain=80, items_per_domain=100, overlap=60, clusters=2,
            correlation=1.0, interactions_per_user=12, seed=3,
        )
        dataset = generate_synthetic(spec)
        agree = sum(
            modal_cluster(dataset, "x", ix, 2) == modal_cluster(dataset, "y", iy, 2)
            for _, ix, iy in dataset.overlap_indices()
        )
        assert agree / 60 > 0.9  # modal recovery is itself slightly noisy

    def test_zero_correlation_matches_chance(self):
        clusters = 4
        spec = SyntheticSpec(
            users_per_domain=10_000, items_per_domain=200, overlap=10_000,
            clusters=clusters, correlation=0.0, interactions_per_user=12, seed=3,
        )
        dataset = generate_synthetic(spec)
        n_items = len(dataset.items("x"))
        item_cluster = (np.arange(n_items) * clusters) // n_items
        modal = {}
        for domain in ("x", "y"):
            inter = dataset.interactions(domain)
            counts = np.zeros((10_000, clusters), dtype=np.int64)
            np.add.at(counts, (inter[:, 0], item_cluster[inter[:, 1]]), 1)
            modal[domain] = counts.argmax(axis=1)
        agreement = float(np.mean(modal["x"] == modal["y"]))
        assert agreement == pytest.approx(1 / clusters, abs=0.03)

    def test_acceptance_scale_spec_is_valid(self):
        spec = SyntheticSpec(
            users_per_domain=500, items_per_domain=200, overlap=300, clusters=2,
            correlation=0.9, interactions_per_user=20, seed=0,
        )
        dataset = generate_synthetic(spec)
        dataset.validate()
        assert len(dataset.overlap_users) == 300
        counts = {s: sum(1 for v in dataset.split.values() if v == s) for s in ("train", "test", "validation")}
        assert counts == {"train": 240, "test": 30, "validation": 30}

    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(users_per_domain=30, items_per_domain=40, overlap=10,
                             clusters=2, correlation=0.5, interactions_per_user=5, seed=9)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert np.array_equal(a.interactions_x, b.interactions_x)
        assert a.split == b.split

    def test_infeasible_spec_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(users_per_domain=10, items_per_domain=5, overlap=3,
                          clusters=1, correlation=0.5, interactions_per_user=6, seed=0).validate()


class TestCsvExport:
    def test_written_files_reload_equivalently(self, tmp_path):
        # item vocabularies come back in first-appearance order, so compare
        # up to the item relabeling
        spec = SyntheticSpec(users_per_domain=30, items_per_domain=40, overlap=15,
                             clusters=2, correlation=1.0, interactions_per_user=5, seed=21)
        path_x, path_y = write_domain_csvs(spec, tmp_path)
        reloaded = load_domain_pair(path_x, path_y, seed=spec.seed)
        reference = generate_synthetic(spec)
        assert reloaded.domain_x_users == reference.domain_x_users
        assert set(reloaded.domain_y_items) <= set(reference.domain_y_items)
        assert reloaded.split == reference.split
        for domain in ("x", "y"):
            got = {
                (reloaded.users(domain)[u], reloaded.items(domain)[v])
                for u, v in reloaded.interactions(domain)
            }
            expected = {
                (reference.users(domain)[u], reference.items(domain)[v])
                for u, v in reference.interactions(domain)
            }
            assert got == expected
