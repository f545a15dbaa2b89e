"""Multilayer perceptron with hand-written reverse-mode gradients.

Parameter layout (flat float64 vector), layer by layer: the weight matrix
of shape ``(fan_in, fan_out)`` in row-major order followed by the bias of
length ``fan_out``.  A layer computes ``z = h @ W + b``; hidden layers apply
the activation, the last layer returns raw logits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .numeric import KL_LOG_FLOOR, Rng, as_tensor, log_softmax, softmax

ACTIVATIONS = ("relu", "tanh", "linear")
CHECKPOINT_MAGIC = b"MLRLAB1"


@numba.njit(cache=True)
def _affine(h, W, b):
    # Fixed k-order accumulation per output element: row i of a batch is
    # bit-identical to the same row evaluated alone (BLAS gemm/gemv differ).
    B, n = h.shape
    m = W.shape[1]
    out = np.empty((B, m))
    for r in range(B):
        for j in range(m):
            out[r, j] = 0.0
        for k in range(n):
            a = h[r, k]
            for j in range(m):
                out[r, j] += a * W[k, j]
        for j in range(m):
            out[r, j] += b[j]
    return out


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layer_slices(self):
        """Yield ``(weight_slice, weight_shape, bias_slice)`` per layer."""
        off = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            n_w = w[i] * w[i + 1]
            yield slice(off, off + n_w), (w[i], w[i + 1]), slice(off + n_w, off + n_w + w[i + 1])
            off += n_w + w[i + 1]


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_d1(kind, z):
    # relu'(0) := 0
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def _act_d2(kind, z):
    if kind == "tanh":
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(z)


def unpack(spec: MlpSpec, params: np.ndarray):
    return [(params[ws].reshape(shape), params[bs]) for ws, shape, bs in spec.layer_slices()]


def init_params(spec: MlpSpec, rng: Rng) -> np.ndarray:
    """He init (std sqrt(2/fan_in)) for relu, Glorot normal otherwise; zero biases."""
    params = np.zeros(spec.n_params)
    for ws, (fan_in, fan_out), _ in spec.layer_slices():
        if spec.activation == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        params[ws] = rng.normal(fan_in * fan_out, sigma=std)
    return params


def _check_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"expected batch of width {spec.n_in}, got shape {x.shape}")
    return np.ascontiguousarray(x)


def forward(spec: MlpSpec, params: np.ndarray, x, return_cache: bool = False):
    x = _check_batch(spec, x)
    layers = unpack(spec, params)
    hs, zs = [x], []
    h = x
    for i, (W, b) in enumerate(layers):
        z = _affine(h, np.ascontiguousarray(W), b)
        zs.append(z)
        h = z if i == len(layers) - 1 else _act(spec.activation, z)
        hs.append(h)
    if return_cache:
        return h, (hs, zs)
    return h


def backward(spec: MlpSpec, params: np.ndarray, cache, dlogits: np.ndarray):
    """Vector-Jacobian product: returns (d_params, d_input) for upstream ``dlogits``."""
    hs, zs = cache
    layers = unpack(spec, params)
    grad = np.zeros_like(params)
    slices = list(spec.layer_slices())
    dz = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        ws, _, bs = slices[i]
        grad[ws] = (hs[i].T @ dz).ravel()
        grad[bs] = dz.sum(axis=0)
        dh = dz @ W.T
        if i > 0:
            dz = dh * _act_d1(spec.activation, zs[i - 1])
    return grad, dh


@dataclass
class LossHead:
    """Scalar loss of the logits.

    kinds: ``soft-ce`` (cross-entropy to soft targets, batch mean),
    ``mse-prob`` (squared distance of softmax to targets, batch mean),
    ``kl-ref`` (KL(target || softmax(logits)), batch mean),
    ``sum`` (sum of all logits, or of ``target``-weighted logits if given),
    ``constant``.
    """

    kind: str
    target: np.ndarray | None = None

    def __call__(self, logits):
        z = np.asarray(logits, dtype=np.float64)
        B = z.shape[0]
        if self.kind == "soft-ce":
            y = self.target
            value = float(-(y * log_softmax(z)).sum() / B)
            return value, (softmax(z) * y.sum(axis=1, keepdims=True) - y) / B
        if self.kind == "mse-prob":
            p = softmax(z)
            g = 2.0 * (p - self.target) / B
            value = float(((p - self.target) ** 2).sum() / B)
            return value, p * (g - (g * p).sum(axis=1, keepdims=True))
        if self.kind == "kl-ref":
            r = self.target
            q = softmax(z)
            active = q >= KL_LOG_FLOOR
            safe_r = np.where(r > 0, r, 1.0)
            terms = np.where(r > 0, r * (np.log(safe_r) - np.log(np.maximum(q, KL_LOG_FLOOR))), 0.0)
            w = r * active
            return float(terms.sum() / B), (q * w.sum(axis=1, keepdims=True) - w) / B
        if self.kind == "sum":
            c = np.ones_like(z) if self.target is None else self.target
            return float((c * z).sum()), np.array(c, dtype=np.float64, copy=True)
        if self.kind == "constant":
            return 0.0, np.zeros_like(z)
        raise ValueError(f"unknown loss head {self.kind!r}")


@dataclass
class GradBundle:
    loss_value: float
    d_params: np.ndarray
    d_input: np.ndarray


def loss_and_grads(spec, params, x, head: LossHead) -> GradBundle:
    logits, cache = forward(spec, params, x, return_cache=True)
    value, dlogits = head(logits)
    d_params, d_input = backward(spec, params, cache, dlogits)
    return GradBundle(value, d_params, d_input)


def input_gradient(spec, params, x, head: LossHead) -> np.ndarray:
    return loss_and_grads(spec, params, x, head).d_input


def input_jacobian(spec, params, x) -> np.ndarray:
    """Jacobian of the logits w.r.t. the inputs, shape ``(B, S, d)``."""
    x = _check_batch(spec, x)
    tangents, _ = _tangent_forward(spec, params, x)
    return np.transpose(tangents[-1], (0, 2, 1))


def _tangent_forward(spec, params, x):
    """Forward pass carrying tangents along every input basis direction."""
    B, d = x.shape
    layers = unpack(spec, params)
    h = x
    hdot = np.broadcast_to(np.eye(d), (B, d, d))
    hs, zs, hdots, zdots = [x], [], [hdot], []
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        zdot = hdot @ W
        zs.append(z)
        zdots.append(zdot)
        if i < len(layers) - 1:
            h = _act(spec.activation, z)
            hdot = _act_d1(spec.activation, z)[:, None, :] * zdot
            hs.append(h)
            hdots.append(hdot)
    return zdots, (hs, zs, hdots, zdots)


def scalar_head_weights(logits: np.ndarray, kind: str = "max-logit") -> np.ndarray:
    """Per-row weights c such that the scalar head is s(x) = c . logits."""
    if kind == "max-logit":
        c = np.zeros_like(logits)
        c[np.arange(len(logits)), np.argmax(logits, axis=1)] = 1.0
        return c
    if kind == "sum":
        return np.ones_like(logits)
    raise ValueError(f"unknown scalar head {kind!r}")


def gradient_penalty_and_grads(spec, params, x, target_norm=0.0, scalar_head="max-logit"):
    """Mean over rows of (||grad_x s(x)|| - target)^2 and its parameter gradient.

    The head selection (argmax row) is held fixed.  Returns
    ``(value, d_params, input_grads)`` with ``input_grads`` of shape (B, d).
    """
    x = _check_batch(spec, x)
    B = x.shape[0]
    zdots, (hs, zs, hdots, _) = _tangent_forward(spec, params, x)
    # Reverse pass through the forward+tangent graph; the tangent of a hidden
    # pre-activation feeds back into its primal via the activation's curvature.
    c = scalar_head_weights(zs[-1], scalar_head)
    g = np.einsum("bdo,bo->bd", zdots[-1], c)
    norms = np.sqrt((g * g).sum(axis=1))
    value = float(((norms - target_norm) ** 2).mean())
    scale = np.where(norms > 0, 2.0 * (norms - target_norm) / np.where(norms > 0, norms, 1.0), 0.0) / B
    g_bar = scale[:, None] * g

    layers = unpack(spec, params)
    slices = list(spec.layer_slices())
    grad = np.zeros_like(params)
    act = spec.activation
    zdot_bar = g_bar[:, :, None] * c[:, None, :]
    z_bar = np.zeros_like(zs[-1])
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        ws, _, bs = slices[i]
        d = zdot_bar.shape[1]
        gW = hs[i].T @ z_bar
        gW += hdots[i].reshape(B * d, -1).T @ zdot_bar.reshape(B * d, -1)
        grad[ws] = gW.ravel()
        grad[bs] = z_bar.sum(axis=0)
        if i == 0:
            break
        h_bar = z_bar @ W.T
        hdot_bar = zdot_bar @ W.T
        zp = zs[i - 1]
        d1 = _act_d1(act, zp)
        z_bar = d1 * h_bar + (_act_d2(act, zp)[:, None, :] * zdots[i - 1] * hdot_bar).sum(axis=1)
        zdot_bar = d1[:, None, :] * hdot_bar
    return value, grad, g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: np.ndarray) -> AdamState:
    return AdamState(np.zeros_like(params), np.zeros_like(params), 0)


def sgd_adam_step(params, grads, state: AdamState, hyper: OptimizerConfig):
    """One optimizer update; returns (new_params, new_state)."""
    if params.shape != grads.shape:
        raise ValueError("params/grads shape mismatch")
    if hyper.kind == "sgd":
        return params - hyper.lr * grads, AdamState(state.m, state.v, state.t + 1)
    if hyper.kind != "adam":
        raise ValueError(f"unknown optimizer {hyper.kind!r}")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grads * grads
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    return params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps), AdamState(m, v, t)


@dataclass
class Model:
    """An MLP spec paired with its parameter vector."""

    spec: MlpSpec
    params: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, widths, activation="relu", rng: Rng | None = None):
        spec = MlpSpec(tuple(widths), activation)
        params = init_params(spec, rng if rng is not None else Rng(0))
        return cls(spec, params)

    @classmethod
    def linear(cls, W, bias=None):
        """Activation-free single layer computing ``x @ W + bias``."""
        W = as_tensor(W, "W")
        spec = MlpSpec((W.shape[0], W.shape[1]), "linear")
        b = np.zeros(W.shape[1]) if bias is None else as_tensor(bias, "bias")
        return cls(spec, np.concatenate([W.ravel(), b]))

    def __call__(self, x):
        return forward(self.spec, self.params, x)

    def with_params(self, params):
        return Model(self.spec, params)

    def loss_and_grads(self, x, head):
        return loss_and_grads(self.spec, self.params, x, head)

    def input_gradient(self, x, head):
        return input_gradient(self.spec, self.params, x, head)

    def input_jacobian(self, x):
        return input_jacobian(self.spec, self.params, x)

    def predict_proba(self, x):
        return softmax(self(x))


_ACT_IDS = {"relu": 0, "tanh": 1, "linear": 2}


def save_checkpoint(model: Model, path) -> None:
    """Write header (magic, activation id, widths) then little-endian f64 params."""
    widths = model.spec.layer_widths
    header = CHECKPOINT_MAGIC + struct.pack("<BI", _ACT_IDS[model.spec.activation], len(widths))
    header += struct.pack(f"<{len(widths)}I", *widths)
    payload = np.asarray(model.params, dtype="<f8").tobytes()
    Path(path).write_bytes(header + payload)


def load_checkpoint(path, expected: MlpSpec | None = None) -> Model:
    raw = Path(path).read_bytes()
    n_magic = len(CHECKPOINT_MAGIC)
    if raw[:n_magic] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    act_id, n_w = struct.unpack_from("<BI", raw, n_magic)
    off = n_magic + 5
    widths = struct.unpack_from(f"<{n_w}I", raw, off)
    off += 4 * n_w
    activation = {v: k for k, v in _ACT_IDS.items()}.get(act_id)
    if activation is None:
        raise ValueError(f"{path}: unknown activation id {act_id}")
    spec = MlpSpec(tuple(widths), activation)
    if expected is not None and expected != spec:
        raise ValueError(f"{path}: checkpoint spec {spec} does not match {expected}")
    params = np.frombuffer(raw[off:], dtype="<f8").astype(np.float64)
    if params.size != spec.n_params:
        raise ValueError(f"{path}: payload has {params.size} values, expected {spec.n_params}")
    return Model(spec, params)
