"""Adam on flat float64 parameter vectors, plus the shared minibatch loop.

Trainers carry their optimizer moments, rng stream, and proximal anchor as
state so training can pause and resume across federation rounds; a fresh
optimizer every round would break the equivalence between one-client
federated training and plain centralized training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.n_params)
        self.v = np.zeros(self.n_params)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One update; returns the new parameter vector (input not mutated)."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class MinibatchTrainer:
    """Shuffled minibatch Adam over a flat parameter vector.

    Subclasses provide ``n_samples`` and ``_batch_loss_grad(idx)``. The
    proximal anchor implements the FedProx local objective; with mu == 0 the
    update path is untouched, so FedProx(0) is bit-identical to plain steps.
    """

    def __init__(self, params: np.ndarray, seed: int, lr: float, batch_size: int):
        self.params = np.asarray(params, dtype=float).copy()
        self.adam = AdamState(len(self.params), lr=lr)
        self.rng = np.random.default_rng(seed)
        self.batch_size = batch_size
        self.prox_mu = 0.0
        self.prox_center: np.ndarray | None = None
        self.epochs_done = 0

    @property
    def n_samples(self) -> int:
        raise NotImplementedError

    def _batch_loss_grad(self, idx: np.ndarray):
        raise NotImplementedError

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, flat: np.ndarray) -> None:
        self.params = np.asarray(flat, dtype=float).copy()

    def set_prox(self, mu: float, center: np.ndarray | None) -> None:
        """Anchor local steps to ``center``; mu == 0 restores plain training."""
        self.prox_mu = float(mu)
        self.prox_center = None if center is None else np.asarray(center, dtype=float).copy()

    def train_epochs(self, n_epochs: int) -> float:
        """Runs full passes over the local data; returns the last epoch's mean loss."""
        last = math.nan
        for _ in range(n_epochs):
            order = self.rng.permutation(self.n_samples)
            losses = []
            for start in range(0, len(order), self.batch_size):
                loss, grad = self._batch_loss_grad(order[start : start + self.batch_size])
                if not math.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged: non-finite loss after {self.epochs_done} epochs; "
                        "lower the learning rate or inspect the inputs for NaNs"
                    )
                if self.prox_mu > 0.0 and self.prox_center is not None:
                    grad = grad + self.prox_mu * (self.params - self.prox_center)
                self.params = self.adam.step(self.params, grad)
                losses.append(loss)
            self.epochs_done += 1
            last = float(np.mean(losses))
        return last
