"""Interaction ingestion, leave-one-out splitting, and batch serving.

Raw user/item keys are mapped to dense integer ids starting at 1; id 0 is
reserved for padding in both vocabularies. Per user, the chronologically last
positive interaction is the test target, the second-to-last the validation
target, and the rest form the training sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .artifacts import stable_hash64
from .numerics import Rng

log = logging.getLogger(__name__)


class DatasetEmptyError(ValueError):
    """Nothing survived filtering."""


@dataclass
class InteractionLog:
    users: np.ndarray       # dense ids, int64, 1-based
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_vocab: dict        # raw key -> dense id
    item_vocab: dict
    skipped: int = 0

    def __len__(self):
        return len(self.users)


@dataclass
class FeatureTable:
    kind: str                      # "user" | "item"
    fields: list
    rows: dict                     # entity id -> {field: value}

    def get(self, entity_id: int) -> dict:
        return self.rows.get(entity_id, {})


def _resolve_columns(header, columns):
    """Map the {user,item,rating,timestamp} schema onto column positions."""
    out = {}
    for key in ("user", "item", "rating", "timestamp"):
        spec = columns[key]
        if isinstance(spec, int):
            out[key] = spec
        else:
            if header is None or spec not in header:
                raise ValueError(f"column {spec!r} for {key!r} not found in header")
            out[key] = header.index(spec)
    return out


def load_interactions(path, fmt: str = "tsv", columns=None,
                      has_header: bool | None = None) -> InteractionLog:
    """Parse a delimited interaction file into a dense-id log.

    `columns` maps {user, item, rating, timestamp} to header names or
    0-based positions. Malformed lines are skipped and counted.
    """
    if fmt not in ("tsv", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    sep = "\t" if fmt == "tsv" else ","
    columns = columns or {"user": 0, "item": 1, "rating": 2, "timestamp": 3}
    by_name = any(isinstance(v, str) for v in columns.values())
    if has_header is None:
        has_header = by_name

    users, items, ratings, stamps = [], [], [], []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        header = None
        if has_header:
            header_line = fh.readline()
            if not header_line:
                raise ValueError(f"{path}: empty file")
            header = [c.strip() for c in header_line.rstrip("\n").split(sep)]
        idx = _resolve_columns(header, columns)
        need = max(idx.values()) + 1
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) < need:
                skipped += 1
                continue
            try:
                u = parts[idx["user"]].strip()
                i = parts[idx["item"]].strip()
                r = int(float(parts[idx["rating"]]))
                t = int(float(parts[idx["timestamp"]]))
            except (ValueError, IndexError):
                skipped += 1
                continue
            users.append(u)
            items.append(i)
            ratings.append(r)
            stamps.append(t)
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", path, skipped)
    if not users:
        raise DatasetEmptyError(f"{path}: no parseable interactions")

    user_vocab, item_vocab = {}, {}
    uid = np.empty(len(users), dtype=np.int64)
    iid = np.empty(len(items), dtype=np.int64)
    for n, (u, i) in enumerate(zip(users, items)):
        uid[n] = user_vocab.setdefault(u, len(user_vocab) + 1)
        iid[n] = item_vocab.setdefault(i, len(item_vocab) + 1)
    return InteractionLog(
        users=uid, items=iid,
        ratings=np.asarray(ratings, dtype=np.int64),
        timestamps=np.asarray(stamps, dtype=np.int64),
        user_vocab=user_vocab, item_vocab=item_vocab, skipped=skipped)


def load_features(path, kind: str, fmt: str = "tsv",
                  vocab: dict | None = None) -> FeatureTable:
    """First column is the entity key, remaining header-named columns are fields."""
    sep = "\t" if fmt == "tsv" else ","
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = [c.strip() for c in fh.readline().rstrip("\n").split(sep)]
        fields = header[1:]
        for line in fh:
            parts = line.rstrip("\n").split(sep)
            if len(parts) < 1 or not parts[0].strip():
                continue
            key = parts[0].strip()
            eid = vocab.get(key) if vocab is not None else int(key)
            if eid is None:
                continue
            rows[eid] = {f: (parts[k + 1] if k + 1 < len(parts) else "")
                         for k, f in enumerate(fields)}
    return FeatureTable(kind=kind, fields=fields, rows=rows)


@dataclass
class SplitDataset:
    """Per-user leave-one-out splits over positive interactions.

    `train` sequences are full length; `max_len` only caps the history view
    handed to the model (graph construction uses the full sequence).
    """

    train: dict                    # user id -> list[int], chronological
    valid_target: dict             # user id -> int
    test_target: dict              # user id -> int
    n_users: int                   # vocabulary size (dense ids 1..n_users)
    n_items: int
    positive_threshold: int
    max_len: int
    _rows: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def user_ids(self):
        return sorted(self.train.keys())

    def test_history(self, user: int) -> list:
        return self.train[user] + [self.valid_target[user]]

    def valid_history(self, user: int) -> list:
        return list(self.train[user])

    def model_view(self, seq) -> list:
        return list(seq)[-self.max_len:]

    def training_rows(self) -> np.ndarray:
        """(user, position) pairs: target train[pos], history train[:pos]."""
        if self._rows is None:
            rows = [(u, p)
                    for u in self.user_ids
                    for p in range(1, len(self.train[u]))]
            self._rows = np.asarray(rows, dtype=np.int64)
        return self._rows

    def fingerprint(self) -> int:
        parts = [f"n={self.n_users},{self.n_items}",
                 f"thr={self.positive_threshold}", f"len={self.max_len}"]
        for u in self.user_ids:
            seq = ",".join(map(str, self.train[u]))
            parts.append(f"{u}:{seq}|{self.valid_target[u]}|{self.test_target[u]}")
        return stable_hash64(parts)


def preprocess(log: InteractionLog, positive_threshold: int = 3,
               min_history: int = 5, max_len: int = 30) -> SplitDataset:
    """Filter to positives, order chronologically, and apply leave-one-out.

    Interactions with rating > positive_threshold are retained; users with
    fewer than min_history retained interactions are dropped. Timestamp ties
    keep the original file order (stable sort).
    """
    if len(log) == 0:
        raise DatasetEmptyError("empty interaction log")
    keep = log.ratings > positive_threshold
    users = log.users[keep]
    items = log.items[keep]
    stamps = log.timestamps[keep]
    if users.size == 0:
        raise DatasetEmptyError(
            f"no interaction with rating > {positive_threshold}")

    order = np.lexsort((np.arange(users.size), stamps, users))
    users, items = users[order], items[order]

    train, valid_t, test_t = {}, {}, {}
    boundaries = np.flatnonzero(np.diff(users)) + 1
    for chunk_items, u in zip(np.split(items, boundaries),
                              users[np.concatenate(([0], boundaries))]):
        if chunk_items.size < min_history:
            continue
        seq = chunk_items.tolist()
        train[int(u)] = seq[:-2]
        valid_t[int(u)] = seq[-2]
        test_t[int(u)] = seq[-1]
    if not train:
        raise DatasetEmptyError(
            f"no user has >= {min_history} positive interactions")
    return SplitDataset(
        train=train, valid_target=valid_t, test_target=test_t,
        n_users=len(log.user_vocab), n_items=len(log.item_vocab),
        positive_threshold=positive_threshold, max_len=max_len)


@dataclass
class TrainBatch:
    users: np.ndarray        # (B,)
    histories: np.ndarray    # (B, max_len), left-aligned, 0-padded
    lengths: np.ndarray      # (B,)
    targets: np.ndarray      # (B,)
    negatives: np.ndarray    # (B, n_neg)


def sample_batch(ds: SplitDataset, batch_size: int, n_neg: int = 50,
                 rng: Rng | None = None) -> TrainBatch:
    """Uniformly sample (user, position) training rows with fresh negatives.

    Negatives are drawn uniformly over the item vocabulary excluding only the
    row's target (collisions with other history items are allowed).
    """
    if rng is None:
        raise ValueError("sample_batch needs an explicit Rng")
    if ds.n_items < n_neg + 1:
        raise ValueError(
            f"item vocabulary ({ds.n_items}) smaller than n_neg+1 ({n_neg + 1})")
    rows = ds.training_rows()
    if rows.size == 0:
        raise DatasetEmptyError("no training rows")
    pick = rng.integers(0, len(rows), size=batch_size)
    users = rows[pick, 0]
    positions = rows[pick, 1]

    histories = np.zeros((batch_size, ds.max_len), dtype=np.int64)
    lengths = np.empty(batch_size, dtype=np.int64)
    targets = np.empty(batch_size, dtype=np.int64)
    for b in range(batch_size):
        seq = ds.train[int(users[b])]
        pos = int(positions[b])
        hist = seq[max(0, pos - ds.max_len):pos]
        histories[b, :len(hist)] = hist
        lengths[b] = len(hist)
        targets[b] = seq[pos]

    negatives = rng.integers(1, ds.n_items + 1, size=(batch_size, n_neg))
    clash = negatives == targets[:, None]
    while clash.any():
        negatives[clash] = rng.integers(1, ds.n_items + 1, size=int(clash.sum()))
        clash = negatives == targets[:, None]
    return TrainBatch(users=users, histories=histories, lengths=lengths,
                      targets=targets, negatives=negatives)


def build_candidates(ds: SplitDataset, mode: str = "full",
                     n_sampled: int = 1000, rng: Rng | None = None) -> dict:
    """Per-user test candidate arrays; ground truth sits at index 0.

    "full" ranks against the whole item vocabulary; "sampled" ranks against
    the ground truth plus n distinct sampled negatives.
    """
    if mode not in ("full", "sampled"):
        raise ValueError(f"unknown candidate mode {mode!r}")
    out = {}
    if mode == "full":
        all_items = np.arange(1, ds.n_items + 1, dtype=np.int64)
        for u in ds.user_ids:
            gt = ds.test_target[u]
            rest = all_items[all_items != gt]
            out[u] = np.concatenate(([gt], rest))
        return out
    if n_sampled > ds.n_items - 1:
        raise ValueError(
            f"cannot sample {n_sampled} negatives from {ds.n_items} items")
    if rng is None:
        raise ValueError("sampled mode needs an explicit Rng")
    for u in ds.user_ids:
        gt = ds.test_target[u]
        draw = rng.derive("candidates", u).choice(
            ds.n_items - 1, size=n_sampled, replace=False) + 1
        draw = np.where(draw >= gt, draw + 1, draw)  # skip over gt, stays in range
        out[u] = np.concatenate(([gt], draw.astype(np.int64)))
    return out


@dataclass
class SyntheticWorld:
    """Interactions driven by planted user/item clusters."""

    records: list                   # (user_key, item_key, rating, ts)
    user_clusters: np.ndarray       # index by dense id (entry 0 unused)
    item_clusters: np.ndarray
    n_users: int
    n_items: int
    n_clusters: int


def synthesize_interactions(n_users: int, n_items: int, n_clusters: int,
                            per_user: int = 24, own_cluster_prob: float = 0.85,
                            low_rating_frac: float = 0.1,
                            popularity_alpha: float = 0.8,
                            seed: int = 0) -> SyntheticWorld:
    """Generate a world where preferences follow planted latent clusters.

    Each user/item gets a cluster; a user mostly interacts with items of
    their own cluster (probability own_cluster_prob), with a within-cluster
    popularity skew item_rank^(-popularity_alpha). A low_rating_frac slice of
    interactions gets a non-positive rating so threshold filtering has work.
    """
    if n_clusters > min(n_users, n_items):
        raise ValueError("more clusters than entities")
    rng = Rng(seed).derive("synthetic-world")
    user_c = np.empty(n_users + 1, dtype=np.int64)
    item_c = np.empty(n_items + 1, dtype=np.int64)
    user_c[0] = item_c[0] = -1
    # round-robin base assignment keeps every cluster populated
    user_c[1:] = np.arange(n_users) % n_clusters
    item_c[1:] = np.arange(n_items) % n_clusters
    rng_u = rng.derive("perm-u")
    rng_i = rng.derive("perm-i")
    user_c[1:] = user_c[1:][rng_u.permutation(n_users)]
    item_c[1:] = item_c[1:][rng_i.permutation(n_items)]

    cluster_items = [np.flatnonzero(item_c == c) for c in range(n_clusters)]
    cluster_probs = []
    for members in cluster_items:
        w = (np.arange(len(members), dtype=np.float64) + 1.0) ** (-popularity_alpha)
        cluster_probs.append(w / w.sum())

    records = []
    draw = rng.derive("draws")
    for u in range(1, n_users + 1):
        own = int(user_c[u])
        for t in range(per_user):
            if draw.random() < own_cluster_prob or n_clusters == 1:
                c = own
            else:
                c = int(draw.integers(0, n_clusters - 1))
                if c >= own:
                    c += 1
            members = cluster_items[c]
            item = int(members[_weighted_pick(draw, cluster_probs[c])])
            rating = 5 if draw.random() >= low_rating_frac else int(draw.integers(1, 4))
            records.append((str(u), str(item), rating, t))
    return SyntheticWorld(records=records, user_clusters=user_c,
                          item_clusters=item_c, n_users=n_users,
                          n_items=n_items, n_clusters=n_clusters)


def _weighted_pick(rng: Rng, probs: np.ndarray) -> int:
    r = rng.random()
    return int(np.searchsorted(np.cumsum(probs), r).clip(0, len(probs) - 1))


def write_interactions(records, path, fmt: str = "tsv") -> None:
    sep = "\t" if fmt == "tsv" else ","
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(sep.join(["user", "item", "rating", "timestamp"]) + "\n")
        for u, i, r, t in records:
            fh.write(sep.join([str(u), str(i), str(r), str(t)]) + "\n")


def write_cluster_features(clusters: np.ndarray, kind: str, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{kind}\tcluster\n")
        for eid in range(1, len(clusters)):
            fh.write(f"{eid}\t{int(clusters[eid])}\n")
