"""Momentum SGD with a polynomial learning-rate decay schedule."""

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimizerState:
    base_lr: float
    momentum: float = 0.9
    iteration: int = 0
    total_iterations: int = 1
    poly_power: float = 0.9

    def effective_lr(self):
        frac = 1.0 - self.iteration / self.total_iterations
        return self.base_lr * max(frac, 0.0) ** self.poly_power


class SGD:
    """Classic momentum SGD: v = m*v + g; p -= lr*v."""

    def __init__(self, params, state):
        self.params = list(params)
        self.state = state
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        lr = self.state.effective_lr()
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            v *= self.state.momentum
            v += p.grad
            p.data -= lr * v
        self.state.iteration += 1

    def snapshot(self):
        return {
            "velocities": [v.copy() for v in self.velocities],
            "iteration": self.state.iteration,
        }

    def restore(self, snap):
        for v, s in zip(self.velocities, snap["velocities"]):
            v[...] = s
        self.state.iteration = int(snap["iteration"])
