"""Dense numerics shared by every learning module.

All arrays are plain numpy `ndarray`s in row-major order. Default arithmetic
is float32; gradient checking runs under the float64 precision context. Every
backward pass in this package is hand written per layer (no autodiff graph)
and validated against central finite differences.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field

import numpy as np

_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes do not chain."""


class EmptyNeighborhoodError(ValueError):
    """A softmax row has no unmasked entry."""


def set_precision(kind: str) -> None:
    """Switch the default dtype: "float32" (default) or "float64"."""
    global _DTYPE
    if kind not in ("float32", "float64"):
        raise ValueError(f"unknown precision {kind!r}")
    _DTYPE = np.float32 if kind == "float32" else np.float64


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(kind: str):
    """Temporarily switch the default dtype (used by gradient checks)."""
    global _DTYPE
    saved = _DTYPE
    set_precision(kind)
    try:
        yield
    finally:
        _DTYPE = saved


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce to a 2-D array in the default dtype, rejecting NaN/Inf."""
    a = np.asarray(x, dtype=_DTYPE)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected a matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains NaN or Inf entries")
    return a


class Rng:
    """Seeded random source backed by numpy's PCG64 bit generator.

    PCG64 has a published algorithm and a fixed stream for a given seed, so
    identical seeds reproduce identical draws across runs and platforms.
    Child streams (see `derive`) are keyed by seed plus a hashed tag, which
    keeps consumers order-independent of each other.
    """

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        ss = _ss if _ss is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *tags) -> "Rng":
        """Independent child stream identified by (seed, tags)."""
        text = "/".join(str(t) for t in tags)
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
        key = int.from_bytes(digest, "little")
        return Rng(self.seed, _ss=np.random.SeedSequence([self.seed, key]))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high=high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size).astype(_DTYPE)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size).astype(_DTYPE)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size=size)


class Parameter:
    """Trainable matrix plus its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value: np.ndarray, name: str):
        self.name = name
        self.value = np.asarray(value, dtype=_DTYPE)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def glorot(rng: Rng, shape, name: str) -> Parameter:
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0]
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return Parameter(rng.uniform(-limit, limit, size=shape), name)


def zeros_param(shape, name: str) -> Parameter:
    return Parameter(np.zeros(shape, dtype=_DTYPE), name)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape} do not chain")
    return a @ b


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x >= 0, 1.0, slope).astype(x.dtype)


def softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the unmasked entries of one row; masked entries are 0."""
    logits = np.asarray(logits)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape or logits.ndim != 1:
        raise DimensionError("softmax_masked expects matching 1-D logits/mask")
    if not mask.any():
        raise EmptyNeighborhoodError("softmax over an all-masked row")
    out = np.zeros_like(logits, dtype=logits.dtype)
    sel = logits[mask]
    z = np.exp(sel - sel.max())
    out[mask] = z / z.sum()
    return out


_ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(x.dtype)),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


class Mlp:
    """Fully connected stack with cached forward and exact backward.

    `dims` lists the layer widths, e.g. [64, 512, 256, 32]. The hidden
    activation applies between layers; `output_activation` applies after the
    last one (linear by default).
    """

    def __init__(self, dims, rng: Rng, name: str,
                 activation: str = "relu", output_activation: str = "linear"):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        if activation not in _ACTIVATIONS or output_activation not in _ACTIVATIONS:
            raise ValueError("unknown activation")
        self.activation = activation
        self.output_activation = output_activation
        self.weights = []
        self.biases = []
        for li, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            self.weights.append(glorot(rng, (dout, din), f"{name}.w{li}"))
            self.biases.append(zeros_param((dout,), f"{name}.b{li}"))

    @property
    def params(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: np.ndarray):
        """Returns (output, cache); x is (n, dims[0])."""
        if x.ndim != 2 or x.shape[1] != self.weights[0].shape[1]:
            raise DimensionError(
                f"Mlp input shape {x.shape} does not match dim {self.weights[0].shape[1]}")
        last = len(self.weights) - 1
        inputs, pre = [], []
        h = x
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w.value.T + b.value
            pre.append(z)
            act = self.output_activation if li == last else self.activation
            h = _ACTIVATIONS[act][0](z)
        return h, (inputs, pre)

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        """Accumulates parameter gradients, returns gradient wrt the input."""
        inputs, pre = cache
        last = len(self.weights) - 1
        d = dout
        for li in range(last, -1, -1):
            act = self.output_activation if li == last else self.activation
            dz = d * _ACTIVATIONS[act][1](pre[li])
            self.weights[li].grad += dz.T @ inputs[li]
            self.biases[li].grad += dz.sum(axis=0)
            d = dz @ self.weights[li].value
        return d


class AdamW:
    """Adaptive moments with decoupled weight decay.

    step(): p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p),
    then zeroes every gradient.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= self.lr * update
            p.zero_grad()


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    wcss: list = field(default_factory=list)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) table of squared euclidean distances, computed in float64 so the
    # argmin tie rule is not at the mercy of fp32 cancellation
    p = points.astype(np.float64)
    c = centroids.astype(np.float64)
    d2 = (p * p).sum(1)[:, None] - 2.0 * p @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans(points: np.ndarray, k: int, iters: int, rng: Rng) -> KmeansResult:
    """Lloyd iterations with greedy D^2-weighted seeding.

    Seeding picks the first centroid uniformly, then each next one with
    probability proportional to the squared distance to the nearest chosen
    centroid. Nearest-centroid ties break toward the lowest index. Empty
    clusters keep their previous centroid, which keeps the within-cluster sum
    of squares non-increasing across iterations.
    """
    points = np.asarray(points, dtype=_DTYPE)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"kmeans: k={k} out of range for {n} points")

    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    if k > 1:
        d2 = _squared_distances(points, centroids[:1]).min(axis=1)
        for j in range(1, k):
            total = d2.sum()
            if total <= 0:
                idx = int(rng.integers(0, n))  # all points coincide with chosen centroids
            else:
                r = rng.random() * total
                idx = int(np.searchsorted(np.cumsum(d2), r))
                idx = min(idx, n - 1)
            centroids[j] = points[idx]
            d2 = np.minimum(d2, _squared_distances(points, centroids[j:j + 1]).min(axis=1))

    assignments = np.zeros(n, dtype=np.int64)
    wcss_history = []
    for _ in range(max(iters, 1)):
        d2 = _squared_distances(points, centroids)
        assignments = d2.argmin(axis=1)
        wcss_history.append(float(d2[np.arange(n), assignments].sum()))
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                centroids[j] = members.astype(np.float64).mean(axis=0)
    d2 = _squared_distances(points, centroids)
    assignments = d2.argmin(axis=1)
    wcss_history.append(float(d2[np.arange(n), assignments].sum()))
    return KmeansResult(centroids.astype(_DTYPE), assignments, wcss_history)


def assign_nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per point; ties break to the lowest index."""
    return _squared_distances(points, centroids).argmin(axis=1)


def finite_difference_check(f, p: Parameter, eps: float = 1e-5) -> float:
    """Max relative error between f's accumulated gradient and central FD.

    `f()` must run forward + backward, leaving the analytic gradient in
    `p.grad`, and return the scalar loss. Requires the float64 precision
    context; fp32 has no headroom for the difference quotient.
    """
    if p.value.dtype != np.float64:
        raise ValueError("finite_difference_check requires float64 parameters")
    p.zero_grad()
    f()
    analytic = p.grad.copy()
    flat = p.value.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        p.zero_grad()
        up = f()
        flat[i] = orig - eps
        p.zero_grad()
        down = f()
        flat[i] = orig
        cd = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
        worst = max(worst, err)
    p.zero_grad()
    return worst
