"""Task embeddings and the gating network mapping a task to mixing weights.

Mixing weights are one matrix per layer transition: layer i receives an
(M_i x M_{i-1}) matrix whose rows live on the probability simplex (softmax
projection at use). Three variants: task-conditioned, uniform constant, and a
single shared learned gating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

VARIANTS = ("task", "uniform", "shared")

EMBED_DIM = 100
HIDDEN_DIM = 100


def mixing_shapes(layout) -> list:
    """Shapes of the per-layer mixing matrices for a module layout."""
    return [(layout[i], layout[i - 1]) for i in range(1, len(layout))]


def mixing_dim(layout) -> int:
    return sum(m * n for m, n in mixing_shapes(layout))


@dataclass
class GatingWeights:
    """Per-layer module-mixing matrices; every row sums to 1 with entries >= 0."""

    matrices: list  # one (M_i, M_{i-1}) Tensor per layer transition
    layout: tuple

    def row_sums(self) -> list:
        return [m.data.sum(axis=1) for m in self.matrices]


@dataclass
class GatingParams:
    """2-layer MLP: embedding -> hidden -> per-transition logit blocks."""

    fc1_w: T.Tensor  # (hidden, embed_dim)
    fc1_b: T.Tensor  # (hidden,)
    head_w: list  # per transition: (M_i*M_{i-1}, hidden)
    head_b: list  # per transition: (M_i*M_{i-1},)
    layout: tuple


def gating_init(layout, embed_dim: int = EMBED_DIM, hidden: int = HIDDEN_DIM, seed: int = 0) -> GatingParams:
    """Fan-in init for both linear maps, zero biases."""
    layout = tuple(int(m) for m in layout)
    if not layout or any(m <= 0 for m in layout):
        raise ConfigError(f"invalid module layout {layout}")
    rng = T.make_rng(seed, 0x6A71)
    fc1_w = T.Tensor(T.kaiming_normal(rng, (hidden, embed_dim), fan_in=embed_dim))
    fc1_b = T.Tensor(np.zeros(hidden, dtype=np.float32))
    head_w = [
        T.Tensor(T.kaiming_normal(rng, (m * n, hidden), fan_in=hidden))
        for m, n in mixing_shapes(layout)
    ]
    head_b = [T.Tensor(np.zeros(m * n, dtype=np.float32)) for m, n in mixing_shapes(layout)]
    return GatingParams(fc1_w=fc1_w, fc1_b=fc1_b, head_w=head_w, head_b=head_b, layout=layout)


def embeddings_init(num_tasks: int, dim: int = EMBED_DIM, seed: int = 0) -> T.Tensor:
    """One learnable vector per task, N(0, 1/sqrt(dim))."""
    rng = T.make_rng(seed, 0xE4B)
    return T.Tensor((rng.standard_normal((num_tasks, dim)) / np.sqrt(dim)).astype(np.float32))


def gating_forward(embedding: T.Tensor, params: GatingParams, layout) -> GatingWeights:
    """Run the MLP and softmax-project every mixing row; differentiable end to end."""
    layout = tuple(layout)
    shapes = mixing_shapes(layout)
    if len(params.head_w) != len(shapes) or any(
        hw.shape != (m * n, params.fc1_w.shape[0]) for hw, (m, n) in zip(params.head_w, shapes)
    ):
        raise ConfigError(
            f"gating head shapes {[hw.shape for hw in params.head_w]} do not match layout {layout}"
        )
    e = T.reshape(embedding, (embedding.shape[-1], 1))
    h = T.relu(T.add(T.matmul(params.fc1_w, e), T.reshape(params.fc1_b, (-1, 1))))
    matrices = []
    for hw, hb, (m, n) in zip(params.head_w, params.head_b, shapes):
        logits = T.add(T.matmul(hw, h), T.reshape(hb, (-1, 1)))
        logits = T.reshape(logits, (m, n))
        matrices.append(T.softmax(logits, axis=1))
    return GatingWeights(matrices=matrices, layout=layout)


def make_uniform_gating(layout) -> GatingWeights:
    """Constant 1/M rows; not trainable, identical for every task."""
    layout = tuple(layout)
    mats = [
        T.Tensor(np.full((m, n), 1.0 / n, dtype=np.float32)) for m, n in mixing_shapes(layout)
    ]
    return GatingWeights(matrices=mats, layout=layout)


def make_shared_gating(layout, seed: int = 0) -> list:
    """Task-independent trainable logits, softmax-projected at use."""
    layout = tuple(layout)
    rng = T.make_rng(seed, 0x5A1)
    return [
        T.Tensor((rng.standard_normal((m, n)) * 0.01).astype(np.float32))
        for m, n in mixing_shapes(layout)
    ]


def shared_forward(logits: list, layout) -> GatingWeights:
    layout = tuple(layout)
    shapes = mixing_shapes(layout)
    if len(logits) != len(shapes) or any(l.shape != s for l, s in zip(logits, shapes)):
        raise ConfigError(f"shared logits do not match layout {layout}")
    return GatingWeights(matrices=[T.softmax(l, axis=1) for l in logits], layout=layout)
