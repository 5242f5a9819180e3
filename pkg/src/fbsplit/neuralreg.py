"""Feedforward regression of the conditional expectation step, in numpy.

The network maps a state p in R^d to a pair (Y, Z) with Y in R^J and
Z in R^{J x d}; it is fitted by minimising

    mean_i sum_j ( target_ij - Y_j(p_i) - (Z(p_i) dw_i)_j )^2

where dw_i is the Brownian increment that carried p_i to the state at
which ``target_i`` was computed.  Z acts as a control variate; only Y is
used downstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import TrainingDivergedError

log = logging.getLogger(__name__)


def hidden_width(d: int, kappa: int = 20) -> int:
    return kappa * d + 10


@dataclass
class RegressionNet:
    """Two tanh hidden layers and a linear output head of size (d + 1) J.

    ``params`` is ``[W1, b1, W2, b2, W3, b3]`` with ``W`` of shape
    (fan_in, fan_out).  Inputs are standardised as (p - shift) / scale
    before the first layer.
    """

    d: int
    J: int
    params: list
    shift: np.ndarray = None
    scale: np.ndarray = None

    def __post_init__(self):
        if self.shift is None:
            self.shift = np.zeros(self.d)
        if self.scale is None:
            self.scale = np.ones(self.d)

    @classmethod
    def zeros(cls, d: int, J: int, hidden: Optional[tuple[int, int]] = None) -> "RegressionNet":
        m1, m2 = hidden or (hidden_width(d), hidden_width(d))
        sizes = [d, m1, m2, (d + 1) * J]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
        return cls(d, J, params)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.params[0].shape[0]] + [w.shape[1] for w in self.params[::2]]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.params)

    def copy(self) -> "RegressionNet":
        return RegressionNet(self.d, self.J, [w.copy() for w in self.params],
                             self.shift.copy(), self.scale.copy())

    def standardize(self, p: np.ndarray) -> None:
        """Fix the input affine map from a sample of states."""
        p = np.asarray(p, dtype=float).reshape(-1, self.d)
        self.shift = p.mean(axis=0)
        std = p.std(axis=0)
        self.scale = np.where(std > 1e-12, std, 1.0)

    def _forward(self, p):
        W1, b1, W2, b2, W3, b3 = self.params
        x = (np.asarray(p, dtype=float).reshape(-1, self.d) - self.shift) / self.scale
        a1 = np.tanh(x @ W1 + b1)
        a2 = np.tanh(a1 @ W2 + b2)
        out = a2 @ W3 + b3
        return x, a1, a2, out

    def forward(self, p) -> tuple[np.ndarray, np.ndarray]:
        """(Y, Z) for states p of shape (..., d): shapes (..., J) and (..., J, d)."""
        p = np.asarray(p, dtype=float)
        lead = p.shape[:-1]
        out = self._forward(p)[-1]
        y = out[:, : self.J].reshape(lead + (self.J,))
        z = out[:, self.J:].reshape(lead + (self.J, self.d))
        return y, z

    def predict(self, p) -> np.ndarray:
        return self.forward(p)[0]

    def loss_and_grad(self, p, dw, target) -> tuple[float, list]:
        """Batch loss and its gradient with respect to every parameter array."""
        p = np.asarray(p, dtype=float)
        dw = np.asarray(dw, dtype=float)
        target = np.asarray(target, dtype=float)
        B = p.shape[0]
        if dw.shape != (B, self.d) or target.shape != (B, self.J):
            raise ValueError(
                f"batch shapes p {p.shape}, dw {dw.shape}, target {target.shape} "
                f"do not match d={self.d}, J={self.J}")
        W1, b1, W2, b2, W3, b3 = self.params
        x, a1, a2, out = self._forward(p)
        y = out[:, : self.J]
        z = out[:, self.J:].reshape(B, self.J, self.d)
        r = target - y - np.einsum("bjk,bk->bj", z, dw)
        loss = float(np.mean(np.sum(r * r, axis=1)))

        dy = -2.0 * r / B
        dz = dy[:, :, None] * dw[:, None, :]
        dout = np.concatenate([dy, dz.reshape(B, -1)], axis=1)
        gW3 = a2.T @ dout
        gb3 = dout.sum(axis=0)
        dpre2 = (dout @ W3.T) * (1.0 - a2 * a2)
        gW2 = a1.T @ dpre2
        gb2 = dpre2.sum(axis=0)
        dpre1 = (dpre2 @ W2.T) * (1.0 - a1 * a1)
        gW1 = x.T @ dpre1
        gb1 = dpre1.sum(axis=0)
        return loss, [gW1, gb1, gW2, gb2, gW3, gb3]


def loss_batch(net: RegressionNet, p, dw, target) -> float:
    y, z = net.forward(np.asarray(p, dtype=float))
    target = np.asarray(target, dtype=float)
    dw = np.asarray(dw, dtype=float)
    if target.shape != y.shape or dw.shape != np.shape(p):
        raise ValueError("batch shapes do not match the network")
    r = target - y - np.einsum("...jk,...k->...j", z, dw)
    return float(np.mean(np.sum(r * r, axis=-1)))


def xavier_init(net: RegressionNet, seed: int) -> RegressionNet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0; in place."""
    rng = np.random.default_rng(seed)
    for i in range(0, len(net.params), 2):
        fan_in, fan_out = net.params[i].shape
        bound = 1.0 / np.sqrt(fan_in)
        net.params[i] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        net.params[i + 1] = np.zeros(fan_out)
    return net


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: RegressionNet, lr: float = 1e-3) -> "AdamState":
        return cls([np.zeros_like(w) for w in net.params],
                   [np.zeros_like(w) for w in net.params], 0, lr)


def adam_step(net: RegressionNet, state: AdamState, grads: list):
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for w, g, m, v in zip(net.params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 50
    batches_per_epoch: int = 100
    val_size: int = 500
    val_every: int = 30
    patience: int = 5
    max_iters: int = 3000
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "batches_per_epoch", "val_size",
                     "val_every", "patience", "max_iters"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def pool_size(self) -> int:
        return self.batch_size * self.batches_per_epoch


@dataclass
class TrainReport:
    iterations: int
    best_val_loss: float
    val_history: list = field(default_factory=list)


def train_time_step(net: RegressionNet, train: tuple, val: tuple, cfg: TrainConfig,
                    step_index: int = 0) -> tuple[RegressionNet, TrainReport]:
    """Fit ``net`` (warm-started, modified in place) to one time step's data.

    ``train`` and ``val`` are ``(p, dw, target)`` triples.  Minibatches are
    drawn epoch by epoch from a shuffled pool; the validation loss is
    checked every ``cfg.val_every`` iterations and the best network seen is
    returned.  Training stops after ``cfg.patience`` checks without
    improvement (never before one full epoch) or at ``cfg.max_iters``.
    """
    p, dw, target = train
    rng = np.random.default_rng([cfg.seed, step_index])
    state = AdamState.for_net(net, cfg.lr)
    best = net.copy()
    best_loss = loss_batch(net, *val)
    history = [best_loss]
    stale = 0
    it = 0
    n = p.shape[0]
    epoch_len = max(1, min(cfg.batches_per_epoch, n // cfg.batch_size))
    done = False
    while not done:
        order = rng.permutation(n)
        for b in range(epoch_len):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, grads = net.loss_and_grad(p[idx], dw[idx], target[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at step {step_index}, iteration {it}")
            adam_step(net, state, grads)
            it += 1
            if it % cfg.val_every == 0:
                val_loss = loss_batch(net, *val)
                if not np.isfinite(val_loss):
                    raise TrainingDivergedError(
                        f"non-finite validation loss at step {step_index}, iteration {it}")
                history.append(val_loss)
                if val_loss < best_loss:
                    best_loss, best, stale = val_loss, net.copy(), 0
                else:
                    stale += 1
                if it >= epoch_len and stale >= cfg.patience:
                    done = True
            if it >= cfg.max_iters:
                done = True
            if done:
                break
    log.debug("step %d: %d iterations, best validation loss %.3e",
              step_index, it, best_loss)
    return best, TrainReport(it, best_loss, history)
