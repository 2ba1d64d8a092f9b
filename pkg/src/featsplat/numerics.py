"""Dense math substrate: linear layers with hand-written backward, Adam, LR decay.

Arrays are plain numpy ndarrays in float64; there is no autodiff anywhere in
this package. Every backward pass is derived by hand and checked against
central finite differences in the test suite.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericalError

ACTIVATIONS = ("relu", "none")


@dataclass
class LinearLayer:
    """Fully-connected layer y = act(W x + b) with weight [out, in]."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ConfigurationError("weight must be 2-d and bias 1-d")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ConfigurationError(
                f"weight rows {self.weight.shape[0]} != bias size {self.bias.shape[0]}"
            )

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


def linear_layer(in_dim, out_dim, activation, rng, init="kaiming"):
    """Build a layer; Kaiming-uniform weights (bound sqrt(6/fan_in)) or zeros."""
    if init == "kaiming":
        bound = np.sqrt(6.0 / in_dim)
        weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    elif init == "zeros":
        weight = np.zeros((out_dim, in_dim))
    else:
        raise ConfigurationError(f"unknown init {init!r}")
    return LinearLayer(weight=weight, bias=np.zeros(out_dim), activation=activation)


def mlp_forward(layers, x):
    """Run x [B, d_in] (or [d_in]) through the layer stack.

    Returns (y, cache); the cache stores each layer's input and pre-activation
    and is consumed by mlp_backward.
    """
    squeeze = x.ndim == 1
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if layers and h.shape[1] != layers[0].in_dim:
        raise ConfigurationError(
            f"input dim {h.shape[1]} does not match first layer in_dim {layers[0].in_dim}"
        )
    cache = []
    for layer in layers:
        pre = h @ layer.weight.T + layer.bias
        cache.append((h, pre))
        h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    if squeeze:
        return h[0], cache
    return h, cache


def mlp_backward(layers, cache, dL_dy):
    """Backprop through a stack run by mlp_forward.

    Returns (dL_dx, grads) where grads is a list of (dW, db) matching layers.
    """
    if len(cache) != len(layers):
        raise ContractViolation(
            f"cache has {len(cache)} entries for {len(layers)} layers"
        )
    squeeze = dL_dy.ndim == 1
    g = np.atleast_2d(np.asarray(dL_dy, dtype=np.float64))
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x_in, pre = cache[i]
        if x_in.shape[1] != layer.in_dim or pre.shape[1] != layer.out_dim:
            raise ContractViolation(f"cache entry {i} does not match layer shapes")
        if g.shape != pre.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match layer {i} output {pre.shape}"
            )
        if layer.activation == "relu":
            g = g * (pre > 0.0)
        grads[i] = (g.T @ x_in, g.sum(axis=0))
        g = g @ layer.weight
    if squeeze:
        g = g[0]
    return g, grads


def mlp_params(layers, prefix):
    """Yield (name, array) pairs for every weight and bias, in layer order."""
    for i, layer in enumerate(layers):
        yield f"{prefix}.{i}.weight", layer.weight
        yield f"{prefix}.{i}.bias", layer.bias


def set_mlp_params(layers, prefix, arrays):
    for i, layer in enumerate(layers):
        layer.weight = arrays[f"{prefix}.{i}.weight"]
        layer.bias = arrays[f"{prefix}.{i}.bias"]


@dataclass
class AdamState:
    """First/second moment buffers for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, eps=1e-8):
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), eps=eps)


def adam_step(param, grad, state, lr):
    """One Adam update with bias correction. Returns the updated parameter.

    The moment buffers in `state` are updated in place; a non-finite gradient
    aborts before any state is touched.
    """
    if lr <= 0.0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ConfigurationError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, m {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NumericalError(
            f"non-finite gradient ({bad}/{grad.size} entries) for param of shape {param.shape}"
        )
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LrSchedule:
    """Log-linear decay from lr_init to lr_final over max_steps.

    An optional sine ramp (delay_mult scaling for the first delay_steps
    iterations) is disabled while delay_steps == 0.
    """

    lr_init: float
    lr_final: float
    max_steps: int
    delay_mult: float = 1.0
    delay_steps: int = 0

    def __post_init__(self):
        if self.lr_init <= 0.0 or self.lr_final <= 0.0:
            raise ConfigurationError("lr_init and lr_final must be positive")
        if self.max_steps <= 0:
            raise ConfigurationError("max_steps must be positive")
        if not 0.0 < self.delay_mult <= 1.0:
            raise ConfigurationError("delay_mult must lie in (0, 1]")

    @classmethod
    def constant(cls, lr):
        return cls(lr_init=lr, lr_final=lr, max_steps=1)


def lr_at_step(schedule, t):
    if t < 0:
        raise ConfigurationError(f"step must be nonnegative, got {t}")
    frac = min(t, schedule.max_steps) / schedule.max_steps
    lr = schedule.lr_init * (schedule.lr_final / schedule.lr_init) ** frac
    if schedule.delay_steps > 0:
        ramp = np.clip(t / schedule.delay_steps, 0.0, 1.0)
        lr *= schedule.delay_mult + (1.0 - schedule.delay_mult) * np.sin(
            0.5 * np.pi * ramp
        )
    return float(lr)
