"""Multi-level residual quantization of semantic vectors.

An encoder MLP maps a semantic vector v to x; level t snaps the running
residual r_t to its nearest codebook entry (r_1 = x, r_{t+1} = r_t - c_t),
and the decoder reconstructs v from the code sum. Training minimizes

    L = ||v - decode(sum_t c_t)||^2
      + sum_t ( ||sg[r_t] - c_t||^2 + beta * ||r_t - sg[c_t]||^2 )

with mean reduction over the batch and sum over vector dimensions. The
gradient of the reconstruction term reaches the encoder through a
straight-through identity across the non-differentiable nearest-code lookup;
sg[.] marks stop-gradient. Nearest-code ties break to the lowest index.

Two cheaper index-tuple extractors with the same (levels, K) interface are
provided for comparison experiments: hierarchical k-means and sign-bit random
projections.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .artifacts import read_container, write_container
from .numerics import (AdamW, Mlp, Rng, assign_nearest, default_dtype,
                       glorot, kmeans)
from .validation import check_fitted, check_vectors

log = logging.getLogger(__name__)

MODEL_MAGIC = b"RQVQ"
MODEL_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"quantizer loss became NaN at epoch {epoch}")


@dataclass
class QuantizerMetrics:
    epoch: int
    l_rec: float
    l_com: float
    active_ratio: list

    @property
    def l_rq(self) -> float:
        return self.l_rec + self.l_com


@dataclass
class QuantizeResult:
    indices: np.ndarray      # (n, T) int64
    x_hat: np.ndarray        # (n, D_q) code sum
    v_hat: np.ndarray        # (n, D_v) reconstruction
    residuals: list          # [r_1 .. r_{T+1}], each (n, D_q)


class ResidualQuantizer(BaseEstimator):
    """Learns T codebooks of K vectors over encoded semantic vectors.

    fit(X) trains encoder, decoder, and codebooks; transform(X) returns the
    (n, levels) integer index tuples via plain nearest-neighbor search, which
    is also the incremental-assignment path for entities that arrive after
    training (no retraining, O(levels * K * code_dim) per vector).

    The requested codebook_size is capped at n_samples // 4 so small corpora
    cannot allocate more codes than the data can support.
    """

    def __init__(self, levels: int = 3, codebook_size: int = 256,
                 code_dim: int = 32, hidden_sizes=(512, 256),
                 beta: float = 0.25, lr: float = 1e-3, batch_size: int = 256,
                 epochs: int = 20, seed: int = 0,
                 reseed_dead_codes: bool = True):
        self.levels = levels
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.hidden_sizes = hidden_sizes
        self.beta = beta
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.reseed_dead_codes = reseed_dead_codes

    def _validate(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.code_dim < 1:
            raise ValueError("code_dim must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    # -- model construction ------------------------------------------------

    def _build(self, input_dim: int, n_samples: int, rng: Rng):
        self.input_dim_ = input_dim
        self.codebook_size_ = min(self.codebook_size, max(2, n_samples // 4))
        hid = list(self.hidden_sizes)
        self.encoder_ = Mlp([input_dim] + hid + [self.code_dim],
                            rng.derive("enc"), "enc")
        self.decoder_ = Mlp([self.code_dim] + hid[::-1] + [input_dim],
                            rng.derive("dec"), "dec")
        self.codebooks_ = [
            glorot(rng.derive("cb", t), (self.codebook_size_, self.code_dim),
                   f"codebook{t}")
            for t in range(self.levels)]

    @property
    def params_(self):
        return self.encoder_.params + self.decoder_.params + self.codebooks_

    def _init_codebooks(self, first_batch: np.ndarray, rng: Rng):
        # k-means over the encoded first batch, level by level on residuals,
        # guards against codebook collapse at the start of training
        x, _ = self.encoder_.forward(first_batch)
        residual = x.astype(np.float64)
        for t, cb in enumerate(self.codebooks_):
            res = kmeans(residual, self.codebook_size_, iters=10,
                         rng=rng.derive("init-km", t))
            cb.value[...] = res.centroids.astype(cb.value.dtype)
            residual = residual - res.centroids[res.assignments].astype(np.float64)

    # -- forward / backward ------------------------------------------------

    def _forward(self, V: np.ndarray):
        x, enc_cache = self.encoder_.forward(V)
        n = V.shape[0]
        indices = np.empty((n, self.levels), dtype=np.int64)
        chosen = []
        residuals = [x]
        r = x
        for t, cb in enumerate(self.codebooks_):
            idx = assign_nearest(r, cb.value)
            c = cb.value[idx]
            indices[:, t] = idx
            chosen.append(c)
            r = r - c
            residuals.append(r)
        x_hat = np.sum(chosen, axis=0)
        v_hat, dec_cache = self.decoder_.forward(x_hat)
        return {
            "x": x, "enc_cache": enc_cache, "indices": indices,
            "chosen": chosen, "residuals": residuals, "x_hat": x_hat,
            "v_hat": v_hat, "dec_cache": dec_cache, "V": V,
        }

    def _losses(self, fwd):
        n = fwd["V"].shape[0]
        rec = float(((fwd["V"] - fwd["v_hat"]) ** 2).sum()) / n
        com = 0.0
        for t in range(self.levels):
            diff = fwd["residuals"][t] - fwd["chosen"][t]
            com += (1.0 + self.beta) * float((diff ** 2).sum()) / n
        return rec, com

    def _backward(self, fwd):
        """Accumulates gradients for L_rec + L_com into all parameters."""
        V, n = fwd["V"], fwd["V"].shape[0]
        # reconstruction: decoder, then straight-through identity to the encoder
        dv_hat = 2.0 * (fwd["v_hat"] - V) / n
        dx = self.decoder_.backward(fwd["dec_cache"], dv_hat)
        dx = dx.copy()
        for t in range(self.levels):
            diff = fwd["residuals"][t] - fwd["chosen"][t]   # r_t - c_t
            idx = fwd["indices"][:, t]
            # codebook-pull term: d/dc ||sg[r_t] - c||^2
            np.add.at(self.codebooks_[t].grad, idx, -2.0 * diff / n)
            # commitment term: d/dr_t beta ||r_t - sg[c_t]||^2, where
            # r_t = x - sum_{s<t} c_s, so it also reaches earlier codebooks
            g = 2.0 * self.beta * diff / n
            dx += g
            for s in range(t):
                np.add.at(self.codebooks_[s].grad, fwd["indices"][:, s], -g)
        self.encoder_.backward(fwd["enc_cache"], dx)

    # -- public API ----------------------------------------------------------

    def fit(self, X, y=None):
        self._validate()
        X = check_vectors(X, name="X")
        n = X.shape[0]
        if n < self.codebook_size and n < 8:
            raise ValueError(f"need at least a handful of vectors, got {n}")
        rng = Rng(self.seed)
        self._build(X.shape[1], n, rng)
        if n < self.codebook_size_:
            raise ValueError(
                f"{n} vectors cannot initialize {self.codebook_size_} codes")
        log.info("quantizer fit: n=%d levels=%d K=%d code_dim=%d beta=%.3g",
                 n, self.levels, self.codebook_size_, self.code_dim, self.beta)

        first = X[:max(self.batch_size, self.codebook_size_)]
        self._init_codebooks(first, rng)

        opt = AdamW(self.params_, lr=self.lr)
        shuffle_rng = rng.derive("shuffle")
        reseed_rng = rng.derive("reseed")
        self.history_ = []
        for epoch in range(self.epochs):
            order = shuffle_rng.permutation(n)
            usage = [np.zeros(self.codebook_size_, dtype=np.int64)
                     for _ in range(self.levels)]
            rec_sum = com_sum = 0.0
            batches = 0
            last_x = None
            for start in range(0, n, self.batch_size):
                batch = X[order[start:start + self.batch_size]]
                fwd = self._forward(batch)
                rec, com = self._losses(fwd)
                if not np.isfinite(rec + com):
                    raise TrainingDivergedError(epoch)
                self._backward(fwd)
                opt.step()
                rec_sum += rec
                com_sum += com
                batches += 1
                last_x = fwd["x"]
                for t in range(self.levels):
                    np.add.at(usage[t], fwd["indices"][:, t], 1)
            if self.reseed_dead_codes and last_x is not None:
                self._reseed_dead(usage, last_x, reseed_rng)
            self.history_.append(QuantizerMetrics(
                epoch=epoch, l_rec=rec_sum / batches, l_com=com_sum / batches,
                active_ratio=[float((u > 0).mean()) for u in usage]))
        return self

    def _reseed_dead(self, usage, encoded_batch: np.ndarray, rng: Rng):
        for t, u in enumerate(usage):
            dead = np.flatnonzero(u == 0)
            if dead.size == 0:
                continue
            picks = rng.integers(0, encoded_batch.shape[0], size=dead.size)
            self.codebooks_[t].value[dead] = encoded_batch[picks]
            log.debug("reseeded %d dead codes at level %d", dead.size, t)

    def quantize(self, X) -> QuantizeResult:
        """Full forward pass: index tuples, code sum, reconstruction, residuals."""
        check_fitted(self, "codebooks_")
        X = check_vectors(X, expected_dim=self.input_dim_, name="X")
        fwd = self._forward(X)
        return QuantizeResult(indices=fwd["indices"], x_hat=fwd["x_hat"],
                              v_hat=fwd["v_hat"], residuals=fwd["residuals"])

    def transform(self, X) -> np.ndarray:
        """Index tuples only: encoder plus per-level nearest-code search.

        This is the incremental-assignment path for new entities; it matches
        quantize().indices exactly and never mutates the model.
        """
        check_fitted(self, "codebooks_")
        X = check_vectors(X, expected_dim=self.input_dim_, name="X")
        x, _ = self.encoder_.forward(X)
        out = np.empty((X.shape[0], self.levels), dtype=np.int64)
        r = x
        for t, cb in enumerate(self.codebooks_):
            idx = assign_nearest(r, cb.value)
            out[:, t] = idx
            r = r - cb.value[idx]
        return out

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)

    def evaluate(self, X) -> QuantizerMetrics:
        """Losses and active ratio on a reference set, without training."""
        check_fitted(self, "codebooks_")
        X = check_vectors(X, expected_dim=self.input_dim_, name="X")
        fwd = self._forward(X)
        rec, com = self._losses(fwd)
        ratios = [float(np.isin(np.arange(self.codebook_size_),
                                fwd["indices"][:, t]).mean())
                  for t in range(self.levels)]
        return QuantizerMetrics(epoch=-1, l_rec=rec, l_com=com,
                                active_ratio=ratios)

    def reconstruction_loss(self, X) -> float:
        return self.evaluate(X).l_rec

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        check_fitted(self, "codebooks_")
        config = {
            "params": self.get_params(),
            "input_dim": self.input_dim_,
            "codebook_size_effective": self.codebook_size_,
        }
        config["params"]["hidden_sizes"] = list(self.hidden_sizes)
        arrays = []
        for p in self.encoder_.params + self.decoder_.params:
            arrays.append((p.name, p.value))
        for t, cb in enumerate(self.codebooks_):
            arrays.append((cb.name, cb.value))
        write_container(path, MODEL_MAGIC, MODEL_VERSION, config, arrays)

    @classmethod
    def load(cls, path) -> "ResidualQuantizer":
        config, arrays = read_container(path, MODEL_MAGIC, MODEL_VERSION)
        params = dict(config["params"])
        params["hidden_sizes"] = tuple(params["hidden_sizes"])
        model = cls(**params)
        model._validate()
        model.input_dim_ = int(config["input_dim"])
        rng = Rng(model.seed)
        model._build(model.input_dim_, 10 ** 9, rng)
        model.codebook_size_ = int(config["codebook_size_effective"])
        model.codebooks_ = [
            glorot(rng.derive("cb", t), (model.codebook_size_, model.code_dim),
                   f"codebook{t}")
            for t in range(model.levels)]
        table = dict(arrays)
        dt = default_dtype()
        for p in model.encoder_.params + model.decoder_.params:
            loaded = table[p.name]
            p.value = loaded.reshape(p.value.shape).astype(dt)
            p.grad = np.zeros_like(p.value)
        for cb in model.codebooks_:
            cb.value = table[cb.name].astype(dt)
            cb.grad = np.zeros_like(cb.value)
        model.history_ = []
        return model


def assign_incremental(model: ResidualQuantizer, X) -> np.ndarray:
    """Nearest-code assignment for new vectors on a trained model."""
    return model.transform(X)


def export_assignments(path, ids, indices: np.ndarray) -> None:
    """TSV export: entity_id, then one column per level."""
    indices = np.asarray(indices)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# qgrec-assignments v1 levels=%d\n" % indices.shape[1])
        for eid, row in zip(ids, indices):
            fh.write(str(int(eid)) + "\t" + "\t".join(str(int(m)) for m in row) + "\n")


def load_assignments(path) -> dict:
    """Returns {entity_id: (m_1, ..., m_T)}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("# qgrec-assignments v1"):
            raise ValueError(f"{path}: not an assignment export")
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            out[int(parts[0])] = tuple(int(x) for x in parts[1:])
    return out


class HierarchicalKmeansCoder(BaseEstimator):
    """Index tuples from k-means applied recursively inside parent clusters.

    Level 0 clusters all vectors; level t clusters each level-(t-1) group
    separately, so an index path (m_0, .., m_{T-1}) names a leaf. Groups too
    small to split keep index 0 at that level (with a warning).
    """

    def __init__(self, levels: int = 3, branch_factor: int = 8,
                 iters: int = 10, seed: int = 0):
        self.levels = levels
        self.branch_factor = branch_factor
        self.iters = iters
        self.seed = seed

    def fit(self, X, y=None):
        if self.branch_factor < 2:
            raise ValueError("branch_factor must be >= 2")
        X = check_vectors(X, name="X")
        rng = Rng(self.seed)
        self.input_dim_ = X.shape[1]
        self.tree_ = {}          # path tuple -> centroid matrix
        self.labels_ = np.zeros((X.shape[0], self.levels), dtype=np.int64)
        groups = {(): np.arange(X.shape[0])}
        for t in range(self.levels):
            next_groups = {}
            for path in sorted(groups):
                members = groups[path]
                if len(members) < self.branch_factor:
                    if len(members) and self.levels > 1:
                        warnings.warn(
                            f"group {path} too small to split at level {t}; reusing index 0")
                    self.labels_[members, t] = 0
                    next_groups[path + (0,)] = members
                    continue
                res = kmeans(X[members], self.branch_factor, self.iters,
                             rng.derive("hc", t, *path))
                self.tree_[path] = res.centroids
                self.labels_[members, t] = res.assignments
                for j in range(self.branch_factor):
                    sub = members[res.assignments == j]
                    if len(sub):
                        next_groups[path + (j,)] = sub
            groups = next_groups
        return self

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "tree_")
        X = check_vectors(X, expected_dim=self.input_dim_, name="X")
        out = np.zeros((X.shape[0], self.levels), dtype=np.int64)
        for i in range(X.shape[0]):
            path = ()
            for t in range(self.levels):
                centroids = self.tree_.get(path)
                if centroids is None:
                    idx = 0
                else:
                    idx = int(assign_nearest(X[i:i + 1], centroids)[0])
                out[i, t] = idx
                path = path + (idx,)
        return out

    def fit_transform(self, X, y=None):
        return self.fit(X).labels_


class RandomProjectionCoder(BaseEstimator):
    """Index tuples from sign bits of per-level Gaussian random projections.

    Level t uses its own `bits` projection directions; the index is the
    integer whose b-th bit records sign(x . p_b) >= 0.
    """

    def __init__(self, levels: int = 3, bits: int = 8, seed: int = 0):
        self.levels = levels
        self.bits = bits
        self.seed = seed

    def fit(self, X, y=None):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        X = check_vectors(X, name="X")
        rng = Rng(self.seed)
        self.input_dim_ = X.shape[1]
        self.projections_ = [
            rng.derive("proj", t).normal(size=(self.input_dim_, self.bits)).astype(np.float64)
            for t in range(self.levels)]
        return self

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "projections_")
        X = check_vectors(X, expected_dim=self.input_dim_, name="X").astype(np.float64)
        weights = (2 ** np.arange(self.bits)).astype(np.int64)
        out = np.empty((X.shape[0], self.levels), dtype=np.int64)
        for t, proj in enumerate(self.projections_):
            bits = (X @ proj) >= 0.0
            out[:, t] = bits @ weights
        return out

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)
