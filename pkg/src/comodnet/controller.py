"""Task controller: a two-layer MLP mapping a one-hot task identity to
per-encoder-channel context weights, optionally squashed through a sigmoid.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .nn import Dense, Param, ReLU

F32 = np.float32


def onehot(index: int, n_tasks: int) -> np.ndarray:
    if not 0 <= index < n_tasks:
        raise ValueError(f"task index {index} out of range [0, {n_tasks})")
    v = np.zeros(n_tasks, dtype=F32)
    v[index] = 1.0
    return v


class Controller:
    """onehot(task) -> dense(K,H) -> relu -> dense(H,C) -> identity|sigmoid."""

    def __init__(self, n_tasks: int, n_channels: int, rng: np.random.Generator,
                 hidden: int | None = None, sigmoid_output: bool = False,
                 unit_gain_init: bool = False):
        self.n_tasks = n_tasks
        self.n_channels = n_channels
        self.hidden = hidden if hidden is not None else max(1, math.ceil(max(n_tasks, n_channels) / 2))
        self.sigmoid_output = sigmoid_output
        self.fc1 = Dense(n_tasks, self.hidden, rng, name="controller/fc1")
        self.relu = ReLU(name="controller/relu")
        self.fc2 = Dense(self.hidden, n_channels, rng, name="controller/fc2")
        if unit_gain_init:
            # start near unit gain so an untuned controller is neutral
            self.fc2.b.value[...] = 1.0
        self._sig_cache = None

    def params(self) -> list[Param]:
        return self.fc1.params() + self.fc2.params()

    def forward(self, task_index: int, dtype=F32) -> np.ndarray:
        x = onehot(task_index, self.n_tasks).astype(dtype)
        out = self.fc2.forward(self.relu.forward(self.fc1.forward(x)))[0]
        if self.sigmoid_output:
            out = (1.0 / (1.0 + np.exp(-out.astype(np.float64)))).astype(dtype)
            self._sig_cache = out
        return out

    def backward(self, d_context: np.ndarray) -> None:
        """Accumulate parameter gradients for the most recent forward."""
        g = np.asarray(d_context, dtype=F32)
        if self.sigmoid_output:
            s = self._sig_cache
            g = (g * s * (1.0 - s)).astype(F32)
        self.fc1.backward(self.relu.backward(self.fc2.backward(g[None, :])))

    def contexts(self) -> np.ndarray:
        """(K, C) matrix of context weights for all tasks."""
        return np.stack([self.forward(k) for k in range(self.n_tasks)])

    def dump_contexts_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task_id", "channel_index", "context_weight"])
            for k in range(self.n_tasks):
                ctx = self.forward(k)
                for c, v in enumerate(ctx):
                    w.writerow([k, c, repr(float(v))])
