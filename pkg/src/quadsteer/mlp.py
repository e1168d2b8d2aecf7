"""Minimal fully-connected ReLU network with Adam, in plain numpy.

Sized for the drag-gain head (a few hundred parameters); keeping it in-repo
makes training deterministic under a seed and the wind-Jacobian of the drag
model exact rather than autodiff-dependent.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Mlp", "Adam"]


class Mlp:
    """Hidden layers use ReLU, the output layer is linear.

    ``widths`` lists all layer widths including input and output, e.g.
    (8, 20, 20, 3). Weights are He-uniform initialized from ``rng``.
    """

    def __init__(self, widths, rng: np.random.Generator | None = None,
                 zero_output: bool = False):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        if zero_output:
            # residual-head convention: start as an exact zero correction
            self.weights[-1][:] = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass; x is (B, in) or (in,)."""
        single = x.ndim == 1
        h = np.atleast_2d(x)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h[0] if single else h

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping pre-activations for backprop."""
        h = np.atleast_2d(x)
        activations = [h]
        pre = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = activations[-1] @ W + b
            pre.append(z)
            if i < self.n_layers - 1:
                activations.append(np.maximum(z, 0.0))
            else:
                activations.append(z)
        return activations[-1], (activations, pre)

    def backward(self, cache, grad_out: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (weight_grads, bias_grads) matching the parameter lists.
        """
        activations, pre = cache
        gW = [np.zeros_like(W) for W in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        delta = np.atleast_2d(grad_out)
        for i in range(self.n_layers - 1, -1, -1):
            gW[i] = activations[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0)
        return gW, gb

    def params_flat(self) -> np.ndarray:
        return np.concatenate(
            [W.ravel() for W in self.weights] + [b.ravel() for b in self.biases]
        )

    def set_params_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for i, W in enumerate(self.weights):
            self.weights[i] = theta[pos : pos + W.size].reshape(W.shape).copy()
            pos += W.size
        for i, b in enumerate(self.biases):
            self.biases[i] = theta[pos : pos + b.size].copy()
            pos += b.size
        if pos != theta.size:
            raise ValueError("parameter vector length mismatch")

    def weight_sq_sum(self) -> float:
        """Sum of squared weights (biases excluded), the ridge penalty term."""
        return float(sum(np.sum(W * W) for W in self.weights))


class Adam:
    """Adam with the standard bias-corrected moment estimates."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None
        self._t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update parameters in place."""
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1**self._t
        correct2 = 1.0 - b2**self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)
