"""Semi-supervised training loop: mixup losses plus an adversarial Lipschitz penalty.

Per step the objective is ``L_X + lambda_u(t) * L_U + zeta * L_ALP``:

* ``L_X``: soft-target cross-entropy on mixed rows whose dominant endpoint is labeled,
* ``L_U``: squared error between softmax and target on the remaining mixed rows,
* ``L_ALP``: Lipschitz ratio at the power-iteration perturbation of the raw batch.

Modes: ``supervised-only`` (labeled cross-entropy, no mixing),
``mixup-only``, ``mixup-lr`` (ALP term) and ``mixup-gp`` (gradient penalty
in place of ALP).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import DEFAULT_AUGMENT, AugmentSpec, Dataset, SslData, SslSplit, augment
from .lipschitz import AlpConfig, DomainSampler, adv_perturbation, alp_loss_and_grads, estimate_function_lipschitz
from .mixup import MixedBatch, guess_labels, mixmatch_mix, sharpen
from .net import Model, OptimizerConfig, backward, forward, gradient_penalty_and_grads, init_optimizer, sgd_adam_step
from .numeric import Rng, log_softmax, softmax

log = logging.getLogger(__name__)

MODES = ("supervised-only", "mixup-only", "mixup-lr", "mixup-gp")
METRICS_HEADER = ("step", "loss_x", "loss_u", "loss_alp", "total", "lambda_u", "error_rate", "wall_ms")

# child-stream ids, one per source of randomness within a step
_S_AUG, _S_MIX, _S_ADV = 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mixup-lr"
    widths: tuple = (2, 64, 64, 2)
    activation: str = "relu"
    alpha: float = 0.75
    tau: float = 0.5
    P: int = 2
    lambda_u_max: float = 10.0
    ramp_steps: int = 1000
    zeta: float = 2.0
    alp: AlpConfig = field(default_factory=lambda: AlpConfig(on_degenerate="keep-random"))
    alp_on_mixed: bool = False
    gp_target: float = 0.0
    augment: AugmentSpec = DEFAULT_AUGMENT
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    total_steps: int = 4000
    eval_every: int = 100
    khat_pairs: int = 0
    record_wall_time: bool = False
    seed: int = 0
    eval_target: str = "holdout"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.P, self.batch_size, self.total_steps, self.eval_every) < 1:
            raise ValueError("P, batch_size, total_steps and eval_every must be positive")
        if self.zeta < 0 or self.lambda_u_max < 0 or self.ramp_steps < 0:
            raise ValueError("zeta, lambda_u_max and ramp_steps must be nonnegative")
        if self.eval_target not in ("holdout", "unlabeled-pool"):
            raise ValueError(f"unknown eval_target {self.eval_target!r}")
        if self.mode in ("supervised-only", "mixup-only") and self.zeta != 0:
            object.__setattr__(self, "zeta", 0.0)


@dataclass
class MetricsRecord:
    step: int
    loss_x: float
    loss_u: float
    loss_alp: float
    total: float
    lambda_u: float
    error_rate: float
    wall_ms: float = 0.0
    k_hat: float | None = None

    def row(self):
        return [getattr(self, k) for k in METRICS_HEADER]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, record: MetricsRecord):
        super().__init__(message)
        self.record = record


def ramp_lambda(step: int, ramp_steps: int, lambda_u_max: float) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if ramp_steps == 0:
        return float(lambda_u_max)
    return float(lambda_u_max) * min(1.0, step / ramp_steps)


def supervised_loss(pred_logits, y_tilde, mask=None):
    """Mean soft-target cross-entropy over masked rows; returns (value, dlogits)."""
    z = np.asarray(pred_logits, dtype=np.float64)
    mask = np.ones(len(z), bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    grad = np.zeros_like(z)
    if n == 0:
        log.warning("supervised loss: no labeled-near rows in batch")
        return 0.0, grad
    y = np.asarray(y_tilde, dtype=np.float64)[mask]
    value = float(-(y * log_softmax(z[mask])).sum() / n)
    grad[mask] = (softmax(z[mask]) * y.sum(axis=1, keepdims=True) - y) / n
    return value, grad


def unsupervised_loss(pred_logits, y_tilde, mask=None):
    """Mean squared distance ||softmax(pred) - target||^2 over masked rows; returns (value, dlogits)."""
    z = np.asarray(pred_logits, dtype=np.float64)
    mask = np.ones(len(z), bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    grad = np.zeros_like(z)
    if n == 0:
        log.warning("unsupervised loss: no unlabeled-near rows in batch")
        return 0.0, grad
    p = softmax(z[mask])
    diff = p - np.asarray(y_tilde, dtype=np.float64)[mask]
    value = float((diff**2).sum() / n)
    g = 2.0 * diff / n
    grad[mask] = p * (g - (g * p).sum(axis=1, keepdims=True))
    return value, grad


@dataclass
class LossParts:
    loss_x: float
    loss_u: float
    loss_alp: float
    total: float


def combined_loss(model: Model, mixed: MixedBatch, lambda_u: float, zeta: float = 0.0,
                  reg_x=None, r_adv=None, alp: AlpConfig | None = None,
                  reg_kind: str = "alp", gp_target: float = 0.0):
    """Total step loss and its parameter gradient for fixed batch ingredients.

    Targets in ``mixed`` are constants.  ``reg_x`` holds the points the
    Lipschitz term is evaluated at (with ``r_adv`` for ALP).
    """
    spec, params = model.spec, model.params
    logits, cache = forward(spec, params, mixed.x_tilde, return_cache=True)
    lx, gx = supervised_loss(logits, mixed.y_tilde, mixed.labeled_mask)
    lu, gu = unsupervised_loss(logits, mixed.y_tilde, ~mixed.labeled_mask)
    grad, _ = backward(spec, params, cache, gx + lambda_u * gu)
    l_reg = 0.0
    if zeta != 0.0 and reg_x is not None:
        if reg_kind == "alp":
            alp = alp or AlpConfig()
            l_reg, g_reg = alp_loss_and_grads(model, reg_x, r_adv, alp.gamma, alp.d_y_kind, alp.squared)
        elif reg_kind == "gp":
            l_reg, g_reg, _ = gradient_penalty_and_grads(spec, params, reg_x, gp_target)
        else:
            raise ValueError(f"unknown regularizer {reg_kind!r}")
        grad = grad + zeta * g_reg
    total = lx + lambda_u * lu + zeta * l_reg
    return LossParts(lx, lu, l_reg, total), grad


def evaluate(model, features, labels) -> dict:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("empty evaluation set")
    logits = model(features)
    wrong = np.argmax(logits, axis=1) != np.argmax(labels, axis=1)
    err = float(wrong.mean())
    ce = float(-(labels * log_softmax(logits)).sum(axis=1).mean())
    return {"error_rate": err, "accuracy": 1.0 - err, "mean_ce": ce}


def median_of_last_k(series, k: int = 20) -> float:
    values = list(series)
    if not values:
        raise ValueError("empty series")
    return float(np.median(np.asarray(values[-k:], dtype=np.float64)))


class CyclicSampler:
    """Endless index stream over ``n`` items, reshuffled every epoch."""

    def __init__(self, n: int, rng: Rng):
        self.n, self.rng = n, rng
        self._buf = np.empty(0, dtype=int)

    def take(self, k: int) -> np.ndarray:
        while len(self._buf) < k:
            self._buf = np.concatenate([self._buf, self.rng.permutation(self.n)])
        out, self._buf = self._buf[:k], self._buf[k:]
        return out


@dataclass
class TrainResult:
    model: Model
    metrics: list
    config: TrainConfig

    def final_median_error(self, k: int = 20) -> float:
        return median_of_last_k([m.error_rate for m in self.metrics], k)


def eval_arrays(dataset: Dataset, split: SslSplit, target: str):
    idx = split.holdout_idx if target == "holdout" else split.unlabeled_idx
    if len(idx) == 0:
        raise ValueError(f"evaluation target {target!r} is empty")
    return dataset.features[idx], dataset.labels[idx]


def train(config: TrainConfig, dataset: Dataset, split: SslSplit) -> TrainResult:
    split.check_disjoint()
    data = SslData.from_split(dataset, split)
    eval_x, eval_y = eval_arrays(dataset, split, config.eval_target)
    return train_on(config, data, lambda m: evaluate(m, eval_x, eval_y))


def train_on(config: TrainConfig, data: SslData, evaluator) -> TrainResult:
    """Training loop over the label-free view ``data``; ``evaluator(model)`` scores checkpoints."""
    root = Rng(config.seed)
    model = Model.create(config.widths, config.activation, root.child(0))
    opt_state = init_optimizer(model.params)
    lab_sampler = CyclicSampler(len(data.labeled_x), root.child(10))
    unl_sampler = CyclicSampler(max(len(data.unlabeled_x), 1), root.child(11))
    semi = config.mode != "supervised-only"
    if semi and len(data.unlabeled_x) == 0:
        raise ValueError(f"mode {config.mode} needs unlabeled data")
    reg_kind = {"mixup-lr": "alp", "mixup-gp": "gp"}.get(config.mode)
    khat_sampler = DomainSampler(np.vstack([data.labeled_x, data.unlabeled_x])) if config.khat_pairs else None
    metrics = []
    t0 = time.perf_counter()
    B = config.batch_size
    for step in range(1, config.total_steps + 1):
        srng = root.child(1000 + step)
        lam_u = ramp_lambda(step, config.ramp_steps, config.lambda_u_max)
        lab = lab_sampler.take(B)
        xb, yb = data.labeled_x[lab], data.labeled_y[lab]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                parts, grad = _step(model, config, data, xb, yb, unl_sampler, srng, lam_u, reg_kind, semi)
        except ValueError as exc:
            if "non-finite" not in str(exc):
                raise
            rec = MetricsRecord(step, float("nan"), float("nan"), float("nan"), float("nan"), lam_u, float("nan"))
            raise TrainingDiverged(f"non-finite values at step {step}: {exc}", rec) from exc
        if not np.isfinite(parts.total) or not np.all(np.isfinite(grad)):
            rec = MetricsRecord(step, parts.loss_x, parts.loss_u, parts.loss_alp, parts.total, lam_u, float("nan"))
            raise TrainingDiverged(f"non-finite loss at step {step}", rec)
        params, opt_state = sgd_adam_step(model.params, grad, opt_state, config.optimizer)
        if not np.all(np.isfinite(params)):
            rec = MetricsRecord(step, parts.loss_x, parts.loss_u, parts.loss_alp, parts.total, lam_u, float("nan"))
            raise TrainingDiverged(f"non-finite parameters after step {step}", rec)
        model = model.with_params(params)
        if step % config.eval_every == 0 or step == config.total_steps:
            ev = evaluator(model)
            wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
            k_hat = None
            if khat_sampler is not None:
                k_hat = estimate_function_lipschitz(model, khat_sampler, config.khat_pairs, root.child(5))
            metrics.append(MetricsRecord(step, parts.loss_x, parts.loss_u, parts.loss_alp, parts.total,
                                         lam_u, ev["error_rate"], wall, k_hat))
    return TrainResult(model, metrics, config)


def _step(model, config, data, xb, yb, unl_sampler, srng, lam_u, reg_kind, semi):
    if semi:
        ub = data.unlabeled_x[unl_sampler.take(len(xb))]
        return _semi_step(model, config, xb, yb, ub, srng, lam_u, reg_kind)
    logits, cache = forward(model.spec, model.params, xb, return_cache=True)
    lx, g = supervised_loss(logits, yb)
    grad, _ = backward(model.spec, model.params, cache, g)
    return LossParts(lx, 0.0, 0.0, lx), grad


def _semi_step(model, config, xb, yb, ub, srng, lam_u, reg_kind):
    """Guess, sharpen, mix, then the combined loss; the regularizer draws from its own stream."""
    aug_rng = srng.child(_S_AUG)
    xb_aug = augment(xb, config.augment, aug_rng)
    q, views = guess_labels(model, ub, config.P, config.augment, aug_rng, return_views=True)
    q = sharpen(q, config.tau)
    mixed = mixmatch_mix(xb_aug, yb, views[0], q, config.alpha, srng.child(_S_MIX))
    reg_x = r_adv = None
    if reg_kind is not None and config.zeta != 0:
        reg_x = mixed.x_tilde if config.alp_on_mixed else np.vstack([xb, ub])
        if reg_kind == "alp":
            r_adv = adv_perturbation(model, reg_x, config.alp, srng.child(_S_ADV))
    return combined_loss(model, mixed, lam_u, config.zeta, reg_x, r_adv, config.alp,
                         reg_kind or "alp", config.gp_target)
