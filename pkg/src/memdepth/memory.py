"""Memory tokens: ring-buffer intermediate update and the gradient refinement step."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ArchConfig
from .metrics import silog_loss
from .model import ModelParams, attend_memory, depth_forward
from .tensor import ShapeError, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MemoryState:
    """Oldest-first visual (``C x h x w``) and displacement (``2 x H x W``) tokens."""

    visual: tuple[Tensor, ...]
    displacement: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.visual) != len(self.displacement) or not self.visual:
            raise ValueError(
                f"memory lists must be non-empty and equal length, got {len(self.visual)} and {len(self.displacement)}")

    def __len__(self) -> int:
        return len(self.visual)

    def stacked(self) -> tuple[Tensor, Tensor]:
        """(``L x C x h x w``, ``L x 2 x H x W``), differentiable w.r.t. the tokens."""
        vis = T.concat([v.reshape(1, *v.shape) for v in self.visual], axis=0)
        disp = T.concat([d.reshape(1, *d.shape) for d in self.displacement], axis=0)
        return vis, disp

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([v.data for v in self.visual]), np.stack([d.data for d in self.displacement]))

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            for k, v in enumerate(self.visual):
                T.write_blob(fh, f"V{k}", v.data)
            for k, d in enumerate(self.displacement):
                T.write_blob(fh, f"P{k}", d.data)


def _leaf(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


def init_memory(q0: Tensor, length: int, flow_shape: tuple[int, int]) -> MemoryState:
    """``length`` copies of the first encoder features and zero displacement."""
    if length < 1:
        raise ValueError(f"memory length must be >= 1, got {length}")
    zero = np.zeros((2,) + tuple(flow_shape), dtype=q0.dtype)
    return MemoryState(tuple(_leaf(q0.data) for _ in range(length)),
                       tuple(_leaf(zero) for _ in range(length)))


def intermediate_update(prev: MemoryState, q_prev: Tensor, flow_prev: np.ndarray) -> MemoryState:
    """Append the previous features/flow and drop the oldest entry of each list."""
    flow_prev = np.asarray(flow_prev.data if isinstance(flow_prev, Tensor) else flow_prev)
    if q_prev.shape != prev.visual[0].shape:
        raise ShapeError(f"intermediate_update: features {q_prev.shape} vs tokens {prev.visual[0].shape}")
    if flow_prev.shape != prev.displacement[0].shape:
        raise ShapeError(f"intermediate_update: flow {flow_prev.shape} vs tokens {prev.displacement[0].shape}")
    flow_prev = flow_prev.astype(prev.displacement[0].dtype, copy=False)
    return MemoryState(prev.visual[1:] + (_leaf(q_prev.data),),
                       prev.displacement[1:] + (_leaf(flow_prev),))


@dataclass
class UpdateInfo:
    loss: float | None
    skipped: bool = False


def consistency_loss(memory: MemoryState, image: Tensor, image_warped: Tensor, mask: np.ndarray,
                     flow: Tensor, carry: list[Tensor], params: ModelParams, cfg: ArchConfig,
                     emit: Callable[[str], None] | None = None) -> Tensor:
    """SILog between the depths predicted from the frame and from its warped synthesis.

    Both passes share the same memory; the warped pass fills the target slot.
    """
    vis, disp = memory.stacked()
    attended = attend_memory(vis, disp, params, cfg)
    current = depth_forward(image, params, cfg, attended, flow, carry).depth
    if emit:
        emit("forward_current")
    warped = depth_forward(image_warped, params, cfg, attended, flow, carry).depth
    if emit:
        emit("forward_warped")
    loss = silog_loss(current, warped, mask, eps=cfg.depth_eps)
    if emit:
        emit("silog")
    return loss


def memory_gradient_update(inter: MemoryState, image: Tensor, image_warped: Tensor, mask: np.ndarray,
                           flow: Tensor, carry: list[Tensor], params: ModelParams, cfg: ArchConfig,
                           step: float | None = None,
                           emit: Callable[[str], None] | None = None) -> tuple[MemoryState, UpdateInfo]:
    """One gradient step on every memory token with the network frozen.

    Returns the refined memory and the consistency loss measured before the
    step.  ``step`` defaults to ``cfg.memory_lr``.
    """
    step = cfg.memory_lr if step is None else step
    frozen = params.frozen()
    carry = [c.detach() for c in carry]
    if not np.asarray(mask, dtype=bool).any():
        log.warning("memory update skipped: warp validity mask is empty")
        return inter, UpdateInfo(None, skipped=True)
    leaves = MemoryState(tuple(v.detach(requires_grad=True) for v in inter.visual),
                         tuple(d.detach(requires_grad=True) for d in inter.displacement))
    with Tape() as tape:
        loss = consistency_loss(leaves, image, image_warped, mask, flow, carry, frozen, cfg, emit)
    if not np.isfinite(loss.data).all():
        raise T.NonFiniteError("memory update: non-finite consistency loss")
    grads = T.backward(tape, loss) if loss.requires_grad else {}
    if emit:
        emit("backprop")
    if step == 0:
        out = inter
    else:
        def descend(tok: Tensor) -> Tensor:
            g = grads.get(tok)
            if g is None:
                return Tensor(tok.data)
            return Tensor(tok.data - tok.dtype.type(step) * g)

        out = MemoryState(tuple(descend(v) for v in leaves.visual),
                          tuple(descend(d) for d in leaves.displacement))
    if emit:
        emit("memory_update")
    return out, UpdateInfo(float(loss.item()))
