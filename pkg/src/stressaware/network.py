"""Dense value network with hand-rolled backprop and Adam.

The production architecture is 4 inputs, hidden widths 5-9-7-5 with rectifier
activations, and 2 linear outputs (one per action). Kernel matrices carry L1
and L2 penalties; biases are unpenalized. Everything is numpy so that weights,
optimizer moments, and gradients serialize exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import CompatibilityError, CorruptedModelError, ParameterError

DEFAULT_LAYERS = (4, 5, 9, 7, 5, 2)


class QNetwork:
    """Fully connected rectifier network with linear output layer."""

    def __init__(self, layer_sizes: tuple[int, ...] = DEFAULT_LAYERS,
                 l1: float = 1e-3, l2: float = 1e-2,
                 rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        if len(layer_sizes) < 2:
            raise ParameterError("need at least input and output layers")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.l1 = float(l1)
        self.l2 = float(l2)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            if zero_init:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                # Symmetric uniform fan-in scaling; the small positive bias
                # keeps narrow rectifier layers off the kink (a row with every
                # upstream unit dead would otherwise sit exactly at z = 0).
                limit = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
                b = np.full(fan_out, 0.01)
            self.weights.append(w)
            self.biases.append(b)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _check_finite(self) -> None:
        for w in self.weights + self.biases:
            if not np.all(np.isfinite(w)):
                raise CorruptedModelError("network weights contain non-finite values")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Action values for a single state (1-D in, 1-D out) or a batch."""
        self._check_finite()
        single = x.ndim == 1
        a = np.atleast_2d(np.asarray(x, dtype=float))
        if a.shape[1] != self.layer_sizes[0]:
            raise CompatibilityError(
                f"network expects input arity {self.layer_sizes[0]}, got {a.shape[1]}"
            )
        for i in range(self.n_layers):
            z = a @ self.weights[i] + self.biases[i]
            a = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        return a[0] if single else a

    def _forward_cached(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        activations = [X]
        a = X
        for i in range(self.n_layers):
            z = a @ self.weights[i] + self.biases[i]
            a = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
            activations.append(a)
        return a, activations

    def penalty(self) -> float:
        """L1/L2 kernel penalty, the regularization part of the training loss."""
        total = 0.0
        for w in self.weights:
            total += self.l1 * float(np.abs(w).sum()) + self.l2 * float((w ** 2).sum())
        return total

    def loss_and_grads(self, X: np.ndarray, actions: np.ndarray, targets: np.ndarray,
                       ) -> tuple[float, float, list[np.ndarray], list[np.ndarray]]:
        """Squared Bellman error + penalties, its gradients, and the MAE monitor.

        Only the output unit of the taken action receives error signal.
        Gradients of the penalty (l1 * sign(W) + 2 * l2 * W) are folded in, so
        a finite-difference check against ``loss`` validates the whole thing.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        actions = np.asarray(actions, dtype=int)
        targets = np.asarray(targets, dtype=float)
        batch = X.shape[0]

        q, activations = self._forward_cached(X)
        picked = q[np.arange(batch), actions]
        err = picked - targets
        loss = float(np.mean(err ** 2)) + self.penalty()
        mae = float(np.mean(np.abs(err)))

        grad_out = np.zeros_like(q)
        grad_out[np.arange(batch), actions] = 2.0 * err / batch

        w_grads: list[np.ndarray] = [np.empty(0)] * self.n_layers
        b_grads: list[np.ndarray] = [np.empty(0)] * self.n_layers
        delta = grad_out
        for i in range(self.n_layers - 1, -1, -1):
            w_grads[i] = activations[i].T @ delta
            b_grads[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (activations[i] > 0)
        for i, w in enumerate(self.weights):
            w_grads[i] += self.l1 * np.sign(w) + 2.0 * self.l2 * w
        return loss, mae, w_grads, b_grads

    def clone(self) -> "QNetwork":
        other = QNetwork(self.layer_sizes, l1=self.l1, l2=self.l2, zero_init=True)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def copy_from(self, other: "QNetwork") -> None:
        if other.layer_sizes != self.layer_sizes:
            raise CompatibilityError("architecture mismatch")
        self.weights = [w.copy() for w in other.weights]
        self.biases = [b.copy() for b in other.biases]


def soft_update(net: QNetwork, target_net: QNetwork, tau: float = 1e-2) -> None:
    """Polyak step: target <- (1 - tau) * target + tau * online, per weight."""
    if net.layer_sizes != target_net.layer_sizes:
        raise CompatibilityError(
            f"architecture mismatch: {net.layer_sizes} vs {target_net.layer_sizes}"
        )
    for wt, w in zip(target_net.weights, net.weights):
        wt *= 1.0 - tau
        wt += tau * w
    for bt, b in zip(target_net.biases, net.biases):
        bt *= 1.0 - tau
        bt += tau * b


class Adam:
    """Adaptive-moment gradient descent over a QNetwork's parameters."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m_w: list[np.ndarray] = []
        self.v_w: list[np.ndarray] = []
        self.m_b: list[np.ndarray] = []
        self.v_b: list[np.ndarray] = []

    def _ensure_state(self, net: QNetwork) -> None:
        if not self.m_w:
            self.m_w = [np.zeros_like(w) for w in net.weights]
            self.v_w = [np.zeros_like(w) for w in net.weights]
            self.m_b = [np.zeros_like(b) for b in net.biases]
            self.v_b = [np.zeros_like(b) for b in net.biases]

    def step(self, net: QNetwork, w_grads: list[np.ndarray],
             b_grads: list[np.ndarray]) -> None:
        self._ensure_state(net)
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for params, grads, ms, vs in (
            (net.weights, w_grads, self.m_w, self.v_w),
            (net.biases, b_grads, self.m_b, self.v_b),
        ):
            for p, g, m, v in zip(params, grads, ms, vs):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
