"""Single-step FGSM attack and clean-vs-adversarial accuracy reports."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .net import LossHead, Model

SWEEP_HEADER = ("epsilon", "clean", "adv", "drop", "seed", "mode")
DEFAULT_EPSILONS = (0.007, 0.07)


def fgsm(model: Model, x, y_onehot, epsilon: float) -> np.ndarray:
    """x + epsilon * sign(grad_x CE(softmax(f(x)), y)), with sign(0) = 0 and no clipping."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = model.input_gradient(x, LossHead("soft-ce", np.atleast_2d(y_onehot)))
    return x + epsilon * np.sign(g)


@dataclass
class AttackReport:
    epsilon: float
    clean_accuracy: float
    adversarial_accuracy: float
    percent_drop: float
    n_examples: int
    seed: int
    mode: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _accuracy(model, x, labels) -> float:
    return float(np.mean(np.argmax(model(x), axis=1) == np.argmax(labels, axis=1)))


def attack_eval(model: Model, features, labels, epsilon: float, seed: int = 0, mode: str = "") -> AttackReport:
    """White-box untargeted FGSM against the true labels on the same examples."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("empty evaluation set")
    clean = _accuracy(model, features, labels)
    adv = _accuracy(model, fgsm(model, features, labels, epsilon), labels)
    drop = 100.0 * (clean - adv) / clean if clean > 0 else 0.0
    return AttackReport(epsilon, clean, adv, drop, len(features), seed, mode)


def append_sweep_rows(path, reports, fmt=repr) -> None:
    """Append reports to the sweep CSV, writing the header when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(SWEEP_HEADER)
        for r in reports:
            w.writerow([fmt(r.epsilon), fmt(r.clean_accuracy), fmt(r.adversarial_accuracy),
                        fmt(r.percent_drop), r.seed, r.mode])
