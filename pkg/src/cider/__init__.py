"""Cross-domain recommender with centroid-aligned shallow subspaces and a
bijective flow linking the deep-subspace variant latents."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, save_config  # noqa: F401
from .data import InteractionDataset, load_domain_pair  # noqa: F401
from .evaluation import compute_metrics, evaluate, overlap_ratio_harness  # noqa: F401
from .synthetic import SyntheticSpec, generate_synthetic  # noqa: F401
from .training import train  # noqa: F401
