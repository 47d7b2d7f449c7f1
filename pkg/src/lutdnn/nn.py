"""Dense/batchnorm building blocks with hand-derived backward passes.

The layer zoo is small and closed, so gradients are written out by hand
instead of pulling in an autodiff framework; every backward here is pinned
by finite-difference tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "masked_dense_forward",
    "masked_dense_backward",
    "BatchNorm",
    "bn_fold",
    "relu",
    "relu_grad",
    "apply_activation",
    "activation_grad",
    "softmax_cross_entropy",
    "AdamWState",
    "adamw_init",
    "adamw_direction",
    "adamw_step",
]


def masked_dense_forward(x, weights, mask, bias):
    """y = x @ (weights * mask).T + bias.

    x may be (batch, in) or (in,); weights/mask are (out, in), bias (out,).
    The mask is applied to the weights before the product, so a masked
    weight contributes exactly nothing regardless of its stored value.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(mask)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.shape != mask.shape:
        raise ValueError(f"weights {weights.shape} vs mask {mask.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} vs weights in-dim {weights.shape[1]}")
    w_eff = weights * mask
    return x @ w_eff.T + bias


def masked_dense_backward(grad_out, x, weights, mask):
    """Gradients of masked_dense_forward.

    Returns (grad_weights, grad_x, grad_bias). grad_weights is zero at
    every masked position by construction (grad_w * (1 - mask) == 0).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(mask)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    if g2.shape[0] != x2.shape[0]:
        raise ValueError(f"batch mismatch: grad {g2.shape[0]} vs input {x2.shape[0]}")
    w_eff = weights * mask
    grad_w = (g2.T @ x2) * mask
    grad_x = g2 @ w_eff
    grad_b = g2.sum(axis=0)
    if squeeze:
        grad_x = grad_x[0]
    return grad_w, grad_x, grad_b


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    """Derivative of relu w.r.t. its input; defined as 0 at exactly 0."""
    return (np.asarray(x) > 0.0).astype(np.float64)


def apply_activation(x, activation: str):
    if activation == "relu":
        return relu(x)
    if activation == "none":
        return np.asarray(x, dtype=np.float64)
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(pre, activation: str):
    if activation == "relu":
        return relu_grad(pre)
    if activation == "none":
        return np.ones_like(np.asarray(pre, dtype=np.float64))
    raise ValueError(f"unknown activation {activation!r}")


def bn_fold(gamma, beta, mean, var, eps):
    """Collapse batchnorm statistics into a per-channel affine (a, c).

    a = gamma / sqrt(var + eps), c = beta - a * mean, so that
    a * x + c == gamma * (x - mean) / sqrt(var + eps) + beta.
    """
    a = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    c = np.asarray(beta, dtype=np.float64) - a * np.asarray(mean, dtype=np.float64)
    return a, c


class BatchNorm:
    """1-D batch normalization over the last axis with manual backward.

    Training mode normalizes with biased batch statistics and updates
    running statistics with momentum (running variance stored unbiased).
    Eval mode applies the folded affine from fold(), and the table
    compiler applies the very same affine, which keeps the trained model's
    eval path and the enumerated tables on one arithmetic path.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(channels, dtype=np.float64)
        self.beta = np.zeros(channels, dtype=np.float64)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self._cache = None

    def forward(self, x, training: bool):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        if not training:
            a, c = self.fold()
            return a * x + c
        n = x.shape[0]
        if n < 2:
            raise ValueError("batchnorm training step needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)  # biased, used for normalization
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean
        self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
        return self.gamma * xhat + self.beta

    def backward(self, grad_out):
        """Gradients for the last training-mode forward.

        Returns (grad_x, grad_gamma, grad_beta).
        """
        if self._cache is None:
            raise RuntimeError("backward called before a training-mode forward")
        xhat, inv_std = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        grad_gamma = (g * xhat).sum(axis=0)
        grad_beta = g.sum(axis=0)
        gx_hat = g * self.gamma
        grad_x = inv_std * (
            gx_hat - gx_hat.mean(axis=0) - xhat * (gx_hat * xhat).mean(axis=0)
        )
        return grad_x, grad_gamma, grad_beta

    def fold(self):
        return bn_fold(self.gamma, self.beta, self.running_mean, self.running_var, self.eps)

    def state_arrays(self) -> dict:
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def load_state_arrays(self, arrays: dict) -> None:
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != (self.channels,):
                raise ValueError(f"{name} has shape {arr.shape}, want ({self.channels},)")
            setattr(self, name, arr.copy())


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    eps = 1e-12
    loss = -np.log(probs[np.arange(n), labels] + eps).mean()
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class AdamWState:
    """AdamW moments plus hyperparameters, keyed by parameter name."""

    lr: float
    weight_decay: float
    beta1: float
    beta2: float
    eps: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def adamw_init(
    params: dict,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    no_decay=(),
) -> AdamWState:
    state = AdamWState(
        lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps,
        no_decay=frozenset(no_decay),
    )
    for name, p in params.items():
        state.m[name] = np.zeros_like(p, dtype=np.float64)
        state.v[name] = np.zeros_like(p, dtype=np.float64)
    return state


def adamw_direction(grads: dict, state: AdamWState) -> dict:
    """Advance the moments one step; return m_hat / (sqrt(v_hat) + eps) per name.

    The caller applies lr and any decay itself. Split out of adamw_step so
    an update rule that embeds the adaptive step inside a larger formula
    (the magnitude schedule of the connectivity search does) shares the
    moment arithmetic instead of reimplementing it.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        if g.shape != m.shape:
            raise ValueError(f"grad shape {g.shape} vs param shape {m.shape} for {name!r}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out[name] = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """One decoupled-weight-decay Adam step; returns updated parameters.

    Weight decay multiplies the parameter directly (not through the
    gradient), so with zero gradients a decayed parameter shrinks by
    exactly (1 - lr * weight_decay) per step. Names in state.no_decay are
    exempt (bias and batchnorm parameters, conventionally).
    """
    direction = adamw_direction({name: grads[name] for name in params}, state)
    out = {}
    for name in params:
        new_p = params[name].astype(np.float64, copy=True)
        if state.weight_decay and name not in state.no_decay:
            new_p *= 1.0 - state.lr * state.weight_decay
        new_p -= state.lr * direction[name]
        out[name] = new_p
    return out
