"""Minimal dense neural network on numpy: ReLU MLPs, analytic backprop,
adaptive-moment optimization, and the two losses used by the learned models
(binary cross-entropy with logits, mean squared error).

Kept deliberately small: layers are plain weight/bias arrays, forward passes
return the caches backward needs, and the optimizer updates parameter arrays
in place so several networks can share one optimizer (backbone plus heads).
"""

from dataclasses import dataclass, field

import numpy as np


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch where it happened."""

    def __init__(self, epoch):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


class DenseNet:
    """Fully connected network: ReLU after every layer except (optionally)
    the last.  He-initialized weights, zero biases."""

    def __init__(self, dims, seed, final_activation=False):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        rng = np.random.default_rng(seed)
        self.dims = tuple(int(d) for d in dims)
        self.final_activation = final_activation
        self.weights = [rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
                        for n_in, n_out in zip(dims, dims[1:])]
        self.biases = [np.zeros(n_out) for n_out in dims[1:]]

    @property
    def params(self):
        """Parameter arrays in a fixed order (updated in place by Adam)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x):
        """x: (batch, dims[0]).  Returns (output, cache)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        activations = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < len(self.weights) - 1 or self.final_activation:
                x = np.maximum(x, 0.0)
            activations.append(x)
        return x, activations

    def backward(self, cache, grad_out):
        """Gradient of a scalar loss.  Returns (param grads aligned with
        .params, gradient w.r.t. the input batch)."""
        grads = [None] * (2 * len(self.weights))
        g = np.asarray(grad_out, dtype=float)
        for i in reversed(range(len(self.weights))):
            post = cache[i + 1]
            if i < len(self.weights) - 1 or self.final_activation:
                g = g * (post > 0.0)
            grads[2 * i] = cache[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


@dataclass
class Adam:
    """Adaptive-moment optimizer over a list of parameter arrays."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# losses (each returns (scalar loss, gradient w.r.t. the first argument))
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy in the numerically stable logits form."""
    x = np.asarray(logits, dtype=float)
    z = np.asarray(targets, dtype=float)
    loss = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    grad = (sigmoid(x) - z) / x.size
    return float(loss.mean()), grad


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    p = np.asarray(pred, dtype=float)
    diff = p - np.asarray(target, dtype=float)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def minibatches(n, batch_size, rng):
    """Yield index arrays covering a shuffled range(n) in batch_size chunks."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# flat-array (de)serialization, shared by every model file format
# ---------------------------------------------------------------------------

def net_to_arrays(prefix, net: DenseNet) -> dict:
    """DenseNet as a dict of arrays: layer dims first, then weights in order."""
    out = {f"{prefix}_dims": np.array(net.dims, dtype=float)}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}_w{i}"] = w
        out[f"{prefix}_b{i}"] = b
    return out


def net_from_arrays(prefix, arrays, final_activation=False) -> DenseNet:
    dims = tuple(int(d) for d in arrays[f"{prefix}_dims"])
    net = DenseNet(dims, seed=0, final_activation=final_activation)
    net.weights = [arrays[f"{prefix}_w{i}"] for i in range(len(dims) - 1)]
    net.biases = [arrays[f"{prefix}_b{i}"] for i in range(len(dims) - 1)]
    return net


def adam_to_arrays(prefix, opt: Adam) -> dict:
    out = {f"{prefix}_state": np.array([float(opt.step_count), opt.lr])}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}_m{i}"] = m
        out[f"{prefix}_v{i}"] = v
    return out


def adam_from_arrays(prefix, arrays, params) -> Adam:
    step_count, lr = arrays[f"{prefix}_state"]
    return Adam(params, lr=float(lr), step_count=int(step_count),
                m=[arrays[f"{prefix}_m{i}"] for i in range(len(params))],
                v=[arrays[f"{prefix}_v{i}"] for i in range(len(params))])
