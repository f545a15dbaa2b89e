"""Lipschitz ratios, adversarial perturbations, penalties and sampled estimators.

Output distance ``d_y_kind``:
  * ``kl-softmax``: KL(softmax(f(x1)) || softmax(f(x2)))
  * ``l2-logits``: Euclidean distance between logit vectors
Input distance is always Euclidean.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .net import Model, backward, forward, gradient_penalty_and_grads
from .numeric import KL_LOG_FLOOR, Rng, kl_divergence, log_softmax, softmax

D_Y_KINDS = ("kl-softmax", "l2-logits")


@dataclass(frozen=True)
class AlpConfig:
    eps_r: float = 0.5
    xi: float = 1e-6
    k_iters: int = 1
    gamma: float = 0.0
    d_y_kind: str = "kl-softmax"
    squared: bool = False
    on_degenerate: str = "raise"  # or "keep-random": keep the re-drawn direction

    def __post_init__(self):
        if not (self.eps_r > 0 and self.xi > 0):
            raise ValueError("eps_r and xi must be positive")
        if self.k_iters < 1:
            raise ValueError("k_iters must be >= 1")
        if self.d_y_kind not in D_Y_KINDS:
            raise ValueError(f"unknown d_y_kind {self.d_y_kind!r}")
        if self.on_degenerate not in ("raise", "keep-random"):
            raise ValueError(f"unknown on_degenerate policy {self.on_degenerate!r}")


class DegeneratePerturbation(RuntimeError):
    """Power iteration hit a zero gradient twice in a row."""


def output_distance(a, b, kind: str) -> np.ndarray:
    """Row-wise d_Y between two batches of logits."""
    if kind == "kl-softmax":
        return np.atleast_1d(kl_divergence(softmax(a), softmax(b)))
    if kind == "l2-logits":
        return np.sqrt(((np.asarray(a) - np.asarray(b)) ** 2).sum(axis=-1))
    raise ValueError(f"unknown d_y_kind {kind!r}")


def output_distance_grads(a, b, kind: str):
    """Row-wise d_Y and its gradients w.r.t. both logit batches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kind == "kl-softmax":
        p, logp = softmax(a), log_softmax(a)
        q = softmax(b)
        active = q >= KL_LOG_FLOOR
        logq = np.log(np.maximum(q, KL_LOG_FLOOR))
        value = np.where(p > 0, p * (logp - logq), 0.0).sum(axis=1)
        g = logp - logq
        da = p * (g - (p * g).sum(axis=1, keepdims=True))
        w = p * active
        db = q * w.sum(axis=1, keepdims=True) - w
        return value, da, db
    if kind == "l2-logits":
        diff = a - b
        value = np.sqrt((diff**2).sum(axis=1))
        unit = np.where(value[:, None] > 0, diff / np.where(value > 0, value, 1.0)[:, None], 0.0)
        return value, unit, -unit
    raise ValueError(f"unknown d_y_kind {kind!r}")


def lipschitz_ratios(model, x1, x2, d_y_kind: str = "l2-logits") -> np.ndarray:
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    dx = np.sqrt(((x1 - x2) ** 2).sum(axis=1))
    if np.any(dx < 1e-12):
        raise ValueError("coincident points: input distance below 1e-12")
    return output_distance(model(x1), model(x2), d_y_kind) / dx


def lipschitz_ratio(model, x1, x2, d_y_kind: str = "l2-logits") -> float:
    return float(lipschitz_ratios(model, x1, x2, d_y_kind)[0])


def _normalize_rows(d):
    n = np.sqrt((d * d).sum(axis=1))
    return d / np.where(n > 0, n, 1.0)[:, None], n


def adv_perturbation(model: Model, x_batch, cfg: AlpConfig, rng: Rng) -> np.ndarray:
    """Power-iteration estimate of the per-row direction maximizing d_Y, scaled to eps_r."""
    x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    spec, params = model.spec, model.params
    ref = forward(spec, params, x)
    d, _ = _normalize_rows(rng.normal(x.shape))
    for _ in range(cfg.k_iters):
        g = _probe_gradient(spec, params, x, ref, d, cfg)
        g, norms = _normalize_rows(g)
        dead = norms == 0
        if np.any(dead):
            retry, _ = _normalize_rows(rng.normal((int(dead.sum()), x.shape[1])))
            d = d.copy()
            d[dead] = retry
            g2, norms2 = _normalize_rows(_probe_gradient(spec, params, x[dead], ref[dead], d[dead], cfg))
            still = norms2 == 0
            if np.any(still):
                if cfg.on_degenerate == "raise":
                    raise DegeneratePerturbation("zero d_Y gradient in power iteration after re-randomizing")
                # locally constant output: every direction is equally (un)informative
                g2[still] = d[dead][still]
            g[dead] = g2
        d = g
    return cfg.eps_r * d


def _probe_gradient(spec, params, x, ref, d, cfg):
    # Gradient w.r.t. the probe d of d_Y(f(x), f(x + xi d)), f(x) held fixed.
    probe, cache = forward(spec, params, x + cfg.xi * d, return_cache=True)
    _, _, db = output_distance_grads(ref, probe, cfg.d_y_kind)
    _, dx = backward(spec, params, cache, db)
    return cfg.xi * dx


def alp_loss_and_grads(model: Model, x_batch, r_adv, gamma: float = 0.0,
                       d_y_kind: str = "kl-softmax", squared: bool = False):
    """Batch mean of (d_Y(f(x), f(x + r)) / ||r|| - gamma), optionally squared.

    Returns ``(value, d_params)``; the gradient flows through both forward passes.
    """
    x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r_adv, dtype=np.float64))
    rn = np.sqrt((r * r).sum(axis=1))
    if np.any(rn == 0):
        raise ValueError("r_adv rows must be nonzero")
    spec, params = model.spec, model.params
    a, cache_a = forward(spec, params, x, return_cache=True)
    b, cache_b = forward(spec, params, x + r, return_cache=True)
    dist, da, db = output_distance_grads(a, b, d_y_kind)
    excess = dist / rn - gamma
    B = len(x)
    if squared:
        value = float((excess**2).mean())
        w = 2.0 * excess / rn / B
    else:
        value = float(excess.mean())
        w = 1.0 / rn / B
    ga, _ = backward(spec, params, cache_a, w[:, None] * da)
    gb, _ = backward(spec, params, cache_b, w[:, None] * db)
    return value, ga + gb


def alp_loss(model, x_batch, r_adv, gamma: float = 0.0, d_y_kind: str = "kl-softmax", squared: bool = False) -> float:
    return alp_loss_and_grads(model, x_batch, r_adv, gamma, d_y_kind, squared)[0]


def pair_lipschitz_penalty(model, x1, x2, gamma: float = 0.0, d_y_kind: str = "l2-logits", squared: bool = True) -> float:
    """Free-pair penalty on arbitrary (x1, x2); diagnostic only, never trained on."""
    excess = lipschitz_ratios(model, x1, x2, d_y_kind) - gamma
    return float((excess**2).mean() if squared else excess.mean())


def gradient_penalty(model: Model, x_batch, target_norm: float = 0.0, scalar_head: str = "max-logit") -> float:
    return gradient_penalty_and_grads(model.spec, model.params, x_batch, target_norm, scalar_head)[0]


class DomainSampler:
    """Pairs of input points for Monte-Carlo Lipschitz estimation.

    Pair i is of type ``i % 3``: two uniform points in the data bounding
    box enlarged by 20%, two data points, or a data point and a neighbour at
    distance ``close_dist`` in a uniformly random direction.  Pairs are built
    in fixed-size blocks from per-block child streams, so the first N pairs
    are the same for any request of N or more.
    """

    BLOCK = 4096

    def __init__(self, data, close_dist: float = 1e-3, inflate: float = 0.2):
        self.data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        lo, hi = self.data.min(axis=0), self.data.max(axis=0)
        center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        half = np.where(half > 0, half, 0.5)
        self.lo = center - (1.0 + inflate) * half
        self.hi = center + (1.0 + inflate) * half
        self.close_dist = close_dist

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def _block(self, b: int, rng: Rng):
        r = rng.child(b)
        n, d = self.BLOCK, self.dim
        box1 = r.uniform((n, d)) * (self.hi - self.lo) + self.lo
        box2 = r.uniform((n, d)) * (self.hi - self.lo) + self.lo
        dat1 = self.data[r.integers(len(self.data), n)]
        dat2 = self.data[r.integers(len(self.data), n)]
        anchor = self.data[r.integers(len(self.data), n)]
        u, _ = _normalize_rows(r.normal((n, d)))
        close2 = anchor + self.close_dist * u
        kind = (np.arange(n) + b * n) % 3
        x1 = np.where((kind == 0)[:, None], box1, np.where((kind == 1)[:, None], dat1, anchor))
        x2 = np.where((kind == 0)[:, None], box2, np.where((kind == 1)[:, None], dat2, close2))
        return x1, x2

    def pairs(self, n_pairs: int, rng: Rng):
        """Yield ``(x1, x2)`` chunks totalling ``n_pairs`` rows; coincident pairs dropped."""
        done, b = 0, 0
        while done < n_pairs:
            x1, x2 = self._block(b, rng)
            take = min(self.BLOCK, n_pairs - done)
            x1, x2 = x1[:take], x2[:take]
            keep = np.sqrt(((x1 - x2) ** 2).sum(axis=1)) >= 1e-12
            yield x1[keep], x2[keep]
            done += take
            b += 1


def _as_fn(model):
    return model if callable(model) else model.__call__


def estimate_function_lipschitz(model, sampler: DomainSampler, n_pairs: int, rng: Rng,
                                d_y_kind: str = "l2-logits", return_pair: bool = False):
    """Largest sampled ratio d_Y(f(x1), f(x2)) / ||x1 - x2|| (a lower estimate of K)."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    best, pair = 0.0, None
    for x1, x2 in sampler.pairs(n_pairs, rng):
        if len(x1) == 0:
            continue
        ratios = lipschitz_ratios(model, x1, x2, d_y_kind)
        i = int(np.argmax(ratios))
        if pair is None or ratios[i] > best:
            best, pair = float(ratios[i]), (x1[i].copy(), x2[i].copy())
    return (best, pair) if return_pair else best


def estimate_gradient_lipschitz(model_or_grad, sampler: DomainSampler, n_pairs: int, rng: Rng,
                                return_pair: bool = False):
    """Largest sampled ||grad f_j(x1) - grad f_j(x2)|| / ||x1 - x2|| over pairs and outputs j.

    ``model_or_grad`` is a :class:`Model` (its input Jacobian is used) or a
    callable mapping a batch ``(B, d)`` to gradients ``(B, S, d)``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    grad_fn = model_or_grad.input_jacobian if isinstance(model_or_grad, Model) else model_or_grad
    best, pair = 0.0, None
    for x1, x2 in sampler.pairs(n_pairs, rng):
        if len(x1) == 0:
            continue
        g1, g2 = grad_fn(x1), grad_fn(x2)
        num = np.sqrt(((g1 - g2) ** 2).sum(axis=2)).max(axis=1)
        ratios = num / np.sqrt(((x1 - x2) ** 2).sum(axis=1))
        i = int(np.argmax(ratios))
        if pair is None or ratios[i] > best:
            best, pair = float(ratios[i]), (x1[i].copy(), x2[i].copy())
    return (best, pair) if return_pair else best


@dataclass
class GapAuditReport:
    violation_rate: float
    worst_margin: float
    n_triples: int
    n_checks: int
    l_bound: float


def convexity_gaps(model, x1, x2, alpha):
    """Per-coordinate f(a x1 + (1-a) x2) - (a f(x1) + (1-a) f(x2)), shape (B, S)."""
    f = _as_fn(model)
    a = np.asarray(alpha, dtype=np.float64)[:, None]
    return f(a * x1 + (1.0 - a) * x2) - (a * f(x1) + (1.0 - a) * f(x2))


def mixup_gap_audit(model, sampler: DomainSampler, l_hat: float, n_triples: int, rng: Rng,
                safety: float = 1.05, tol: float = 1e-9) -> GapAuditReport:
    """Check the mixup gap against alpha (1 - alpha) L / 2 ||x1 - x2||^2 per output coordinate.

    ``L`` is ``l_hat * safety``.  A coordinate-triple violates when the gap
    exceeds the bound by more than ``tol``; the worst margin is the largest
    signed (gap - bound).
    """
    L = l_hat * safety
    alpha_rng = rng.child(7_777)
    violations, checks, worst = 0, 0, -np.inf
    for x1, x2 in sampler.pairs(n_triples, rng):
        alpha = alpha_rng.uniform(len(x1))
        gap = convexity_gaps(model, x1, x2, alpha)
        bound = alpha * (1.0 - alpha) * L / 2.0 * ((x1 - x2) ** 2).sum(axis=1)
        margin = gap - bound[:, None]
        violations += int((margin > tol).sum())
        checks += margin.size
        worst = max(worst, float(margin.max()))
    return GapAuditReport(violations / checks if checks else 0.0, worst, n_triples, checks, L)


@dataclass
class LipschitzReport:
    k_hat: float
    l_hat: float
    n_pairs: int
    n_triples: int
    violation_rate: float
    worst_margin: float
    seed: int
    max_ratio_pair: tuple | None = None

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d.pop("max_ratio_pair")
        return d


def audit_model(model: Model, data, n_pairs: int, n_triples: int, seed: int, safety: float = 1.05) -> LipschitzReport:
    """Function- and gradient-Lipschitz estimates plus the mixup-gap audit."""
    rng = Rng(seed)
    sampler = DomainSampler(data)
    k_hat, pair = estimate_function_lipschitz(model, sampler, n_pairs, rng.child(1), return_pair=True)
    l_hat = estimate_gradient_lipschitz(model, sampler, n_pairs, rng.child(2))
    rep = mixup_gap_audit(model, sampler, l_hat, n_triples, rng.child(3), safety=safety)
    return LipschitzReport(k_hat, l_hat, n_pairs, n_triples, rep.violation_rate, rep.worst_margin, seed, pair)


def report_json(report: LipschitzReport) -> str:
    return json.dumps(report.to_json_dict(), sort_keys=True)
