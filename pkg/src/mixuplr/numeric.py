"""Numeric primitives: array checks, seeded random streams, softmax, KL, L2.

Arrays are plain ``numpy.ndarray`` of float64.  The random stream wraps a
PCG64 bit generator for raw uniforms; Gaussian and Beta variates are drawn
on top of it (Box-Muller and Marsaglia-Tsang respectively) so the draw
sequence depends only on the seed and the call order.
"""

from __future__ import annotations

import numpy as np

KL_LOG_FLOOR = 1e-12


def as_tensor(x, name: str = "input") -> np.ndarray:
    """Convert to a float64 array and reject NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


class Rng:
    """Single-owner deterministic random stream.

    Identical seed and identical call sequence give bit-identical output.
    Use :meth:`child` to derive independent streams for parallel work.
    """

    def __init__(self, seed: int = 0, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        self._bitgen = np.random.Generator(np.random.PCG64(seq))

    def child(self, stream_id: int) -> "Rng":
        # Depends only on (seed, path, stream_id), not on how much of self was consumed.
        return Rng(self.seed, self.path + (int(stream_id),))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return low + (high - low) * self._bitgen.random(size)

    def uniform_open(self, size=None):
        """Uniform on (0, 1]; safe as a log argument."""
        return 1.0 - self._bitgen.random(size)

    def integers(self, high: int, size=None):
        return self._bitgen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._bitgen.permutation(n)

    def normal(self, size=None, sigma: float = 1.0):
        """Standard normal draws via the Box-Muller transform."""
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = self.uniform_open(pairs)
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(2.0 * np.pi * u2)
        z[1::2] = radius * np.sin(2.0 * np.pi * u2)
        z = sigma * z[:count]
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def gamma(self, shape_k: float, size: int) -> np.ndarray:
        return sample_gamma(shape_k, size, self)

    def beta(self, alpha: float, size=None):
        return sample_beta(alpha, self, size)


def sample_gamma(shape_k: float, size: int, rng: Rng) -> np.ndarray:
    """Gamma(k, 1) draws by Marsaglia-Tsang squeeze/rejection.

    For k < 1 a Gamma(k + 1) draw is scaled by U^(1/k).
    """
    if not shape_k > 0:
        raise ValueError(f"gamma shape must be positive, got {shape_k}")
    boost = shape_k < 1.0
    k = shape_k + 1.0 if boost else shape_k
    d = k - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(size)
    todo = np.arange(size)
    while todo.size:
        n = todo.size
        z = rng.normal(n)
        u = rng.uniform_open(n)
        v = (1.0 + c * z) ** 3
        ok = v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = ok & (
                (u < 1.0 - 0.0331 * z**4)
                | (np.log(u) < 0.5 * z**2 + d * (1.0 - v + np.log(np.where(ok, v, 1.0))))
            )
        out[todo[accept]] = d * v[accept]
        todo = todo[~accept]
    if boost:
        out *= rng.uniform_open(size) ** (1.0 / shape_k)
    return out


def sample_beta(alpha: float, rng: Rng, size=None):
    """Symmetric Beta(alpha, alpha) as G1 / (G1 + G2)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    n = 1 if size is None else int(size)
    g1 = sample_gamma(alpha, n, rng)
    g2 = sample_gamma(alpha, n, rng)
    total = g1 + g2
    # Tiny alpha can underflow both gammas; the limit distribution puts mass on {0, 1}.
    lam = np.where(total > 0, g1 / np.where(total > 0, total, 1.0), (g1 >= g2).astype(float))
    lam = np.clip(lam, 0.0, 1.0)
    return float(lam[0]) if size is None else lam


def sample_gaussian_vector(dim: int, sigma: float, rng: Rng) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return rng.normal(dim, sigma=sigma)


def softmax(logits) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    z = as_tensor(logits, "logits")
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of empty input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p, q, floor: float = KL_LOG_FLOOR):
    """KL(p || q) along the last axis, with 0 log 0 = 0 and q floored before the log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, floor))), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def l2_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
