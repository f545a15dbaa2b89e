"""Mixup with adversarial Lipschitz regularization for semi-supervised learning."""

__version__ = "0.1.0"
