"""Two-domain interaction data: loading, splits, graphs, negative pools, batching.

The dataset is immutable after construction; samplers carry their own
state and must not be shared between threads.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, DataError, ParseError
from .numerics import DTYPE

DOMAINS = ("x", "y")
SPLITS = ("train", "test", "validation")

_CACHE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class InteractionDataset:
    """Vocabularies, implicit-feedback interactions and the overlap split.

    Interactions are (user index, item index) pairs in file order;
    ``timestamps_*`` is None unless every record of that domain carried one.
    """

    domain_x_users: tuple[str, ...]
    domain_y_users: tuple[str, ...]
    domain_x_items: tuple[str, ...]
    domain_y_items: tuple[str, ...]
    interactions_x: np.ndarray  # [n, 2] int64
    interactions_y: np.ndarray
    overlap_users: frozenset[str]
    split: dict[str, str]  # overlap user id -> train/test/validation
    timestamps_x: np.ndarray | None = None
    timestamps_y: np.ndarray | None = None

    def users(self, domain: str) -> tuple[str, ...]:
        return self.domain_x_users if domain == "x" else self.domain_y_users

    def items(self, domain: str) -> tuple[str, ...]:
        return self.domain_x_items if domain == "x" else self.domain_y_items

    def interactions(self, domain: str) -> np.ndarray:
        _check_domain(domain)
        return self.interactions_x if domain == "x" else self.interactions_y

    def timestamps(self, domain: str) -> np.ndarray | None:
        return self.timestamps_x if domain == "x" else self.timestamps_y

    def user_index(self, domain: str) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users(domain))}

    def validate(self) -> None:
        for domain in DOMAINS:
            inter = self.interactions(domain)
            n_users = len(self.users(domain))
            n_items = len(self.items(domain))
            if inter.size and (
                inter[:, 0].min() < 0
                or inter[:, 0].max() >= n_users
                or inter[:, 1].min() < 0
                or inter[:, 1].max() >= n_items
            ):
                raise DataError(f"domain {domain}: interaction index out of vocabulary bounds")
            if len({(int(u), int(v)) for u, v in inter}) != len(inter):
                raise DataError(f"domain {domain}: duplicated (user, item) pair")
        both = set(self.domain_x_users) & set(self.domain_y_users)
        if not self.overlap_users <= both:
            raise DataError("overlap_users not contained in both vocabularies")
        if set(self.split) != set(self.overlap_users):
            raise DataError("split must cover exactly the overlap users")
        if any(s not in SPLITS for s in self.split.values()):
            raise DataError("unknown split label")

    # -- derived views -------------------------------------------------

    def interacted_items(self, domain: str) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for u, v in self.interactions(domain):
            out.setdefault(int(u), set()).add(int(v))
        return out

    def overlap_indices(self, split: str | None = None) -> list[tuple[str, int, int]]:
        """(user id, index in X, index in Y) for overlap users, vocab order in X."""
        idx_x = self.user_index("x")
        idx_y = self.user_index("y")
        out = []
        for u in self.domain_x_users:
            if u in self.overlap_users and (split is None or self.split[u] == split):
                out.append((u, idx_x[u], idx_y[u]))
        return out

    def holdout_items(self, domain: str) -> dict[int, int]:
        """Leave-one-out positive per evaluation (test/validation) user.

        The held-out interaction is the user's last one: by timestamp when
        the file carried timestamps, by record order otherwise.
        """
        eval_users = {u for u, s in self.split.items() if s in ("test", "validation")}
        index = self.user_index(domain)
        eval_idx = {index[u] for u in eval_users}
        inter = self.interactions(domain)
        ts = self.timestamps(domain)
        order = np.arange(len(inter), dtype=np.float64) if ts is None else np.asarray(ts, dtype=np.float64)
        best: dict[int, tuple[float, int, int]] = {}
        for row, (u, v) in enumerate(inter):
            u = int(u)
            if u not in eval_idx:
                continue
            key = (float(order[row]), row)
            if u not in best or key > best[u][:2]:
                best[u] = (key[0], key[1], int(v))
        return {u: item for u, (_, _, item) in best.items()}

    def training_interactions(self, domain: str, exclude: tuple[str, ...] = ("test", "validation")) -> np.ndarray:
        """Interactions with held-out positives of the excluded splits removed."""
        held = {}
        if exclude:
            excl = set(exclude)
            all_held = self.holdout_items(domain)
            index = self.user_index(domain)
            keep_users = {index[u] for u, s in self.split.items() if s in excl}
            held = {u: v for u, v in all_held.items() if u in keep_users}
        inter = self.interactions(domain)
        if not held:
            return inter.copy()
        mask = np.ones(len(inter), dtype=bool)
        for row, (u, v) in enumerate(inter):
            if held.get(int(u)) == int(v):
                mask[row] = False
        return inter[mask]

    def training_users(self, domain: str) -> np.ndarray:
        """Indices eligible as batch anchors: non-overlap users plus train-split
        overlap users, restricted to those with at least one training interaction."""
        inter = self.training_interactions(domain)
        degree = np.zeros(len(self.users(domain)), dtype=np.int64)
        if inter.size:
            np.add.at(degree, inter[:, 0], 1)
        index = self.user_index(domain)
        blocked = {
            index[u]
            for u, s in self.split.items()
            if s in ("test", "validation") and u in index
        }
        return np.array(
            [i for i in range(len(degree)) if degree[i] > 0 and i not in blocked],
            dtype=np.int64,
        )

    def fingerprint(self) -> str:
        """Stable identity of the evaluation contract: vocabulary sizes plus
        held-out positives. Invariant under training-graph edits."""
        payload = {
            "sizes": [
                len(self.domain_x_users),
                len(self.domain_y_users),
                len(self.domain_x_items),
                len(self.domain_y_items),
            ],
            "holdout_x": sorted(self.holdout_items("x").items()),
            "holdout_y": sorted(self.holdout_items("y").items()),
            "split": sorted(self.split.items()),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_domain(domain: str) -> None:
    if domain not in DOMAINS:
        raise ContractError(f"domain must be one of {DOMAINS}, got {domain!r}")


# ---------------------------------------------------------------------------
# Loading


def _read_domain_csv(path: str | Path):
    """Parse one domain file: user/item vocab in first-appearance order,
    deduplicated interactions, optional timestamps (all-or-nothing)."""
    path = Path(path)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    pairs: list[tuple[int, int]] = []
    stamps: list[float] = []
    seen: set[tuple[int, int]] = set()
    any_missing_ts = False
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        for line_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line_no == 1 and row[0].strip().lower() == "user_id":
                continue
            if len(row) < 2:
                raise ParseError(path, line_no, f"expected user_id,item_id[,timestamp], got {row!r}")
            user, item = row[0].strip(), row[1].strip()
            if not user or not item:
                raise ParseError(path, line_no, "empty user_id or item_id")
            if len(row) >= 3 and row[2].strip():
                try:
                    ts = float(row[2])
                except ValueError as exc:
                    raise ParseError(path, line_no, f"bad timestamp {row[2]!r}") from exc
            else:
                ts = 0.0
                any_missing_ts = True
            u = users.setdefault(user, len(users))
            v = items.setdefault(item, len(items))
            if (u, v) in seen:
                continue
            seen.add((u, v))
            pairs.append((u, v))
            stamps.append(ts)
    if not pairs:
        raise DataError(f"{path}: empty domain")
    inter = np.array(pairs, dtype=np.int64)
    timestamps = None if any_missing_ts else np.array(stamps, dtype=np.float64)
    return tuple(users), tuple(items), inter, timestamps


def assign_split(overlap_users: list[str], seed: int) -> dict[str, str]:
    """80/10/10 split over overlap users by seeded shuffle; test and
    validation sizes are floored so rounding slack lands in train."""
    rng = np.random.default_rng(seed)
    order = list(overlap_users)
    rng.shuffle(order)
    n = len(order)
    n_test = n // 10
    n_val = n // 10
    split = {}
    for i, user in enumerate(order):
        if i < n_test:
            split[user] = "test"
        elif i < n_test + n_val:
            split[user] = "validation"
        else:
            split[user] = "train"
    return split


def load_domain_pair(path_x: str | Path, path_y: str | Path, seed: int) -> InteractionDataset:
    """Read two per-domain CSV files and assemble the paired dataset."""
    users_x, items_x, inter_x, ts_x = _read_domain_csv(path_x)
    users_y, items_y, inter_y, ts_y = _read_domain_csv(path_y)
    overlap = [u for u in users_x if u in set(users_y)]
    if not overlap:
        warnings.warn("no overlapping users between the two domains", stacklevel=2)
    dataset = InteractionDataset(
        domain_x_users=users_x,
        domain_y_users=users_y,
        domain_x_items=items_x,
        domain_y_items=items_y,
        interactions_x=inter_x,
        interactions_y=inter_y,
        overlap_users=frozenset(overlap),
        split=assign_split(overlap, seed),
        timestamps_x=ts_x,
        timestamps_y=ts_y,
    )
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# Cache round trip


def save_dataset(dataset: InteractionDataset, path: str | Path) -> None:
    payload = {
        "format_version": _CACHE_FORMAT_VERSION,
        "domain_x_users": list(dataset.domain_x_users),
        "domain_y_users": list(dataset.domain_y_users),
        "domain_x_items": list(dataset.domain_x_items),
        "domain_y_items": list(dataset.domain_y_items),
        "interactions_x": dataset.interactions_x.tolist(),
        "interactions_y": dataset.interactions_y.tolist(),
        "overlap_users": sorted(dataset.overlap_users),
        "split": dict(sorted(dataset.split.items())),
        "timestamps_x": None if dataset.timestamps_x is None else dataset.timestamps_x.tolist(),
        "timestamps_y": None if dataset.timestamps_y is None else dataset.timestamps_y.tolist(),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(blob + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> InteractionDataset:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != _CACHE_FORMAT_VERSION:
        raise DataError(f"unsupported dataset cache version {version!r}")
    dataset = InteractionDataset(
        domain_x_users=tuple(payload["domain_x_users"]),
        domain_y_users=tuple(payload["domain_y_users"]),
        domain_x_items=tuple(payload["domain_x_items"]),
        domain_y_items=tuple(payload["domain_y_items"]),
        interactions_x=np.array(payload["interactions_x"], dtype=np.int64).reshape(-1, 2),
        interactions_y=np.array(payload["interactions_y"], dtype=np.int64).reshape(-1, 2),
        overlap_users=frozenset(payload["overlap_users"]),
        split=dict(payload["split"]),
        timestamps_x=None if payload["timestamps_x"] is None else np.array(payload["timestamps_x"]),
        timestamps_y=None if payload["timestamps_y"] is None else np.array(payload["timestamps_y"]),
    )
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# Normalized bipartite adjacency


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Sparse user-item graph with symmetric degree normalization.

    Each stored weight equals 1/sqrt(deg(u) * deg(v)) over the training
    interaction pattern; users or items without training edges keep an
    all-zero row/column.
    """

    rows: int
    cols: int
    user_idx: np.ndarray
    item_idx: np.ndarray
    weights: np.ndarray
    user_degree: np.ndarray
    item_degree: np.ndarray

    @property
    def transpose_view(self) -> "NormalizedAdjacency":
        return NormalizedAdjacency(
            rows=self.cols,
            cols=self.rows,
            user_idx=self.item_idx,
            item_idx=self.user_idx,
            weights=self.weights,
            user_degree=self.item_degree,
            item_degree=self.user_degree,
        )

    def to_torch(self) -> torch.Tensor:
        indices = torch.from_numpy(np.stack([self.user_idx, self.item_idx]))
        values = torch.from_numpy(self.weights).to(DTYPE)
        return torch.sparse_coo_tensor(
            indices, values, (self.rows, self.cols), check_invariants=False
        ).coalesce()


def build_adjacency(
    dataset: InteractionDataset,
    domain: str,
    exclude: tuple[str, ...] = ("test", "validation"),
) -> NormalizedAdjacency:
    """Graph over training interactions only (held-out positives removed)."""
    _check_domain(domain)
    inter = dataset.training_interactions(domain, exclude=exclude)
    n_users = len(dataset.users(domain))
    n_items = len(dataset.items(domain))
    user_degree = np.zeros(n_users, dtype=np.int64)
    item_degree = np.zeros(n_items, dtype=np.int64)
    if inter.size:
        np.add.at(user_degree, inter[:, 0], 1)
        np.add.at(item_degree, inter[:, 1], 1)
        weights = 1.0 / np.sqrt(user_degree[inter[:, 0]] * item_degree[inter[:, 1]])
    else:
        weights = np.zeros(0)
    return NormalizedAdjacency(
        rows=n_users,
        cols=n_items,
        user_idx=inter[:, 0].copy() if inter.size else np.zeros(0, dtype=np.int64),
        item_idx=inter[:, 1].copy() if inter.size else np.zeros(0, dtype=np.int64),
        weights=np.asarray(weights, dtype=np.float64),
        user_degree=user_degree,
        item_degree=item_degree,
    )


# ---------------------------------------------------------------------------
# Negative pools


@dataclass(frozen=True)
class NegativeSamplePool:
    """Per evaluation user: fixed negatives never interacted with."""

    domain: str
    pool_size: int
    negatives: dict[int, np.ndarray]
    dataset_fingerprint: str

    def validate_against(self, dataset: InteractionDataset) -> None:
        if self.dataset_fingerprint != dataset.fingerprint():
            raise ContractError("negative pool was built for a different dataset")


def sample_negatives(
    dataset: InteractionDataset,
    domain: str,
    seed: int,
    pool_size: int = 999,
) -> NegativeSamplePool:
    """Sample ``pool_size`` negatives per evaluation user, without replacement,
    from the items that user never interacted with in this domain."""
    _check_domain(domain)
    rng = np.random.default_rng(seed)
    interacted = dataset.interacted_items(domain)
    n_items = len(dataset.items(domain))
    users = dataset.users(domain)
    holdout = dataset.holdout_items(domain)
    negatives: dict[int, np.ndarray] = {}
    for u in sorted(holdout):
        eligible = np.setdiff1d(np.arange(n_items, dtype=np.int64), np.fromiter(interacted.get(u, ()), dtype=np.int64))
        if len(eligible) < pool_size:
            raise DataError(
                f"user {users[u]!r} in domain {domain} has only {len(eligible)} eligible "
                f"negatives, needs {pool_size}"
            )
        negatives[u] = rng.choice(eligible, size=pool_size, replace=False)
    return NegativeSamplePool(
        domain=domain,
        pool_size=pool_size,
        negatives=negatives,
        dataset_fingerprint=dataset.fingerprint(),
    )


# ---------------------------------------------------------------------------
# Batch sampling


@dataclass
class UserBatch:
    x: np.ndarray  # [N] user indices in domain X
    y: np.ndarray  # [N] user indices in domain Y
    n_paired: int  # first n_paired positions hold the same user in both domains


class UserBatchSampler:
    """Stateful group sampler: paired overlap users first, the remainder filled
    with per-domain training users. Not safe to share across threads."""

    def __init__(
        self,
        dataset: InteractionDataset,
        group_size: int,
        seed: int,
        pair_fraction: float = 1.0,
    ):
        if group_size < 1:
            raise ContractError("group_size must be >= 1")
        if not 0.0 <= pair_fraction <= 1.0:
            raise ContractError("pair_fraction must be in [0, 1]")
        self.group_size = group_size
        self.pair_fraction = pair_fraction
        self._rng = np.random.default_rng(seed)
        self._warned = False

        train_x = set(dataset.training_users("x").tolist())
        train_y = set(dataset.training_users("y").tolist())
        pairs = [
            (ix, iy)
            for _, ix, iy in dataset.overlap_indices(split="train")
            if ix in train_x and iy in train_y
        ]
        self._pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        paired_x = set(self._pairs[:, 0].tolist())
        paired_y = set(self._pairs[:, 1].tolist())
        self._solo_x = np.array(sorted(train_x - paired_x), dtype=np.int64)
        self._solo_y = np.array(sorted(train_y - paired_y), dtype=np.int64)
        if not (len(self._pairs) or len(self._solo_x)) or not (len(self._pairs) or len(self._solo_y)):
            raise DataError("a domain has no training users to sample from")

    @property
    def n_pairable(self) -> int:
        return len(self._pairs)

    @property
    def pairable(self) -> np.ndarray:
        """[P, 2] array of (index in X, index in Y) for pairable training users."""
        return self._pairs.copy()

    def _fill(self, pool: np.ndarray, count: int) -> np.ndarray:
        if count == 0:
            return np.zeros(0, dtype=np.int64)
        if len(pool) >= count:
            return self._rng.choice(pool, size=count, replace=False)
        if not self._warned:
            warnings.warn(
                "group size exceeds the training population; sampling with replacement",
                stacklevel=3,
            )
            self._warned = True
        if len(pool) == 0:
            raise DataError("no users available to fill the batch")
        return self._rng.choice(pool, size=count, replace=True)

    def draw(self) -> UserBatch:
        n = self.group_size
        target_pairs = n if self.pair_fraction >= 1.0 else int(round(n * self.pair_fraction))
        n_paired = min(target_pairs, len(self._pairs))
        if n_paired > 0:
            rows = self._rng.choice(len(self._pairs), size=n_paired, replace=False)
            chosen = self._pairs[rows]
        else:
            chosen = np.zeros((0, 2), dtype=np.int64)
        rest = n - n_paired
        pool_x = self._solo_x if len(self._solo_x) else np.unique(self._pairs[:, 0])
        pool_y = self._solo_y if len(self._solo_y) else np.unique(self._pairs[:, 1])
        fill_x = self._fill(pool_x, rest)
        fill_y = self._fill(pool_y, rest)
        return UserBatch(
            x=np.concatenate([chosen[:, 0], fill_x]),
            y=np.concatenate([chosen[:, 1], fill_y]),
            n_paired=n_paired,
        )


def sample_user_batch(sampler: UserBatchSampler) -> tuple[np.ndarray, np.ndarray]:
    """Functional view of one sampler draw."""
    batch = sampler.draw()
    return batch.x, batch.y


# ---------------------------------------------------------------------------
# Overlap-ratio rewriting


def apply_overlap_ratio(dataset: InteractionDataset, ratio: float, seed: int) -> InteractionDataset:
    """Keep a fraction of overlap users fully paired; demote the rest to a
    single home domain by dropping their away-domain training interactions.

    Held-out evaluation positives are preserved so the test and validation
    sets stay identical across ratios. Home domains alternate over a seeded
    shuffle so both domains shed a similar amount of signal.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractError("ratio must be in [0, 1]")
    overlap = sorted(dataset.overlap_users)
    if ratio >= 1.0 or not overlap:
        return dataset
    rng = np.random.default_rng(seed)
    order = list(overlap)
    rng.shuffle(order)
    n_keep = int(round(ratio * len(order)))
    demoted = order[n_keep:]
    away = {}
    for pos, user in enumerate(demoted):
        away[user] = "y" if pos % 2 == 0 else "x"

    def prune(domain: str):
        index = dataset.user_index(domain)
        holdout = dataset.holdout_items(domain)
        drop_users = {index[u] for u, a in away.items() if a == domain}
        inter = dataset.interactions(domain)
        ts = dataset.timestamps(domain)
        mask = np.ones(len(inter), dtype=bool)
        for row, (u, v) in enumerate(inter):
            u, v = int(u), int(v)
            if u in drop_users and holdout.get(u) != v:
                mask[row] = False
        return inter[mask], None if ts is None else ts[mask]

    inter_x, ts_x = prune("x")
    inter_y, ts_y = prune("y")
    pruned = InteractionDataset(
        domain_x_users=dataset.domain_x_users,
        domain_y_users=dataset.domain_y_users,
        domain_x_items=dataset.domain_x_items,
        domain_y_items=dataset.domain_y_items,
        interactions_x=inter_x,
        interactions_y=inter_y,
        overlap_users=dataset.overlap_users,
        split=dict(dataset.split),
        timestamps_x=ts_x,
        timestamps_y=ts_y,
    )
    pruned.validate()
    return pruned
