"""Contrastive correspondence loss over spatial feature grids.

For each keypoint role the loss scores the source cell feature against every
cell of the paired map; the matching cell is the positive and the full grid
(positive included) forms the denominator, computed with a stable logsumexp.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ContractError, DomainError, ShapeError
from .trunk import FeatureMap


@dataclass(frozen=True)
class Keypoint:
    """Pixel position, origin top-left, x rightward, y downward."""

    x: float
    y: float
    role: int = 0


@dataclass(frozen=True)
class CellCoord:
    row: int
    col: int


def keypoint_to_cell(p, stride: int, grid) -> CellCoord:
    """Floor-quantize a pixel position onto the feature grid, clamped inside."""
    x, y = (p.x, p.y) if isinstance(p, Keypoint) else (p[0], p[1])
    if x < 0 or y < 0:
        raise DomainError(f"keypoint ({x},{y}) has negative coordinates")
    h, w = grid
    row = min(int(y // stride), h - 1)
    col = min(int(x // stride), w - 1)
    return CellCoord(row=row, col=col)


def cell_to_pixel(c: CellCoord, stride: int) -> tuple:
    """Centre of a grid cell in source-image pixels."""
    return (c.col * stride + stride / 2.0, c.row * stride + stride / 2.0)


def _cells_for(kps, fm: FeatureMap):
    h, w = fm.image_size
    cells = []
    for p in kps:
        x, y = (p.x, p.y) if isinstance(p, Keypoint) else (p[0], p[1])
        if not (0 <= x < w and 0 <= y < h):
            raise DomainError(f"keypoint ({x},{y}) outside {h}x{w} image")
        cells.append(keypoint_to_cell(p, fm.stride, fm.grid))
    return [(c.row, c.col) for c in cells]


def grid_loss(
    fv: T.Tensor,
    fv2: T.Tensor,
    cells,
    cells2,
    temperature: float = 1.0,
    normalize: bool = False,
) -> T.Tensor:
    """Loss on raw (C,H,W) tensors given already-quantized cells."""
    c, h, w = fv.shape
    if fv2.shape[0] != c:
        raise ShapeError(f"channel mismatch: {fv.shape} vs {fv2.shape}")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if normalize:
        fv = T.l2normalize(fv, axis=0)
        fv2 = T.l2normalize(fv2, axis=0)
    fsrc = T.index_spatial(fv, cells)  # (K,C)
    fpos = T.index_spatial(fv2, cells2)  # (K,C)
    pos = T.reduce_sum(T.mul(fsrc, fpos), axis=1)  # (K,)
    flat2 = T.reshape(fv2, (c, fv2.shape[1] * fv2.shape[2]))
    logits = T.matmul(fsrc, flat2)  # (K, H'*W')
    lse = T.logsumexp(T.scale(logits, 1.0 / temperature), axis=1)
    return T.reduce_sum(T.add(lse, T.scale(pos, -1.0 / temperature)))


def contrastive_loss(
    f: FeatureMap,
    f2: FeatureMap,
    kps,
    kps2,
    temperature: float = 1.0,
    normalize: bool = False,
    symmetric: bool = False,
) -> T.Tensor:
    """Sum over roles of -log softmax(positive | all cells of the paired map).

    Role k of `kps` pairs with role k of `kps2`. With `symmetric` the mirrored
    direction is added on top.
    """
    kps, kps2 = list(kps), list(kps2)
    if len(kps) != len(kps2):
        raise ContractError(f"keypoint lists disagree: {len(kps)} vs {len(kps2)} roles")
    if not kps:
        raise ContractError("contrastive_loss needs at least one keypoint role")
    cells = _cells_for(kps, f)
    cells2 = _cells_for(kps2, f2)
    loss = grid_loss(f.values, f2.values, cells, cells2, temperature, normalize)
    if symmetric:
        loss = T.add(
            loss, grid_loss(f2.values, f.values, cells2, cells, temperature, normalize)
        )
    return loss


def batch_loss(pairs, temperature: float = 1.0, normalize: bool = False, symmetric: bool = False) -> T.Tensor:
    """Mean per-pair loss over (f, f', kps, kps') tuples; one tape scalar."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("batch_loss needs a non-empty batch")
    losses = [
        contrastive_loss(f, f2, kps, kps2, temperature, normalize, symmetric)
        for f, f2, kps, kps2 in pairs
    ]
    if len(losses) == 1:
        return losses[0]
    stacked = T.stack([T.reshape(l, (1,)) for l in losses])
    return T.reduce_mean(T.reshape(stacked, (len(losses),)))
