"""Optical flow fields, backward warping and Middlebury ``.flo`` IO."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, TruncatedError, grid_sample

FORWARD = "forward"    # t-1 -> t
BACKWARD = "backward"  # t -> t-1

FLO_MAGIC = b"PIEH"


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement in pixels; ``u`` horizontal, ``v`` vertical."""

    u: np.ndarray
    v: np.ndarray
    direction: str = BACKWARD

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise FlowError(f"flow components must be matching 2-D arrays, got {self.u.shape} and {self.v.shape}")
        if self.direction not in (FORWARD, BACKWARD):
            raise FlowError(f"unknown flow direction {self.direction!r}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise FlowError("flow contains non-finite displacements")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int, direction: str = BACKWARD, dtype=np.float32) -> "FlowField":
        z = np.zeros((height, width), dtype=dtype)
        return cls(z, z.copy(), direction)

    @classmethod
    def from_array(cls, arr: np.ndarray, direction: str = BACKWARD) -> "FlowField":
        """Build from a ``2 x H x W`` array."""
        arr = np.asarray(arr)
        return cls(arr[0], arr[1], direction)

    def as_array(self, dtype=None) -> np.ndarray:
        out = np.stack([self.u, self.v])
        return out if dtype is None else out.astype(dtype)

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(self.u * factor, self.v * factor, self.direction)


def sample_coords(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:flow.height, 0:flow.width]
    return xs + flow.u.astype(np.float64), ys + flow.v.astype(np.float64)


def validity_mask(flow: FlowField) -> np.ndarray:
    """True where every bilinear corner with nonzero weight lies in the source."""
    sx, sy = sample_coords(flow)
    return ((np.floor(sx) >= 0) & (np.ceil(sx) <= flow.width - 1)
            & (np.floor(sy) >= 0) & (np.ceil(sy) <= flow.height - 1))


def backward_warp(source, flow: FlowField) -> tuple:
    """Sample ``source`` at ``p + flow(p)`` for every target pixel ``p``.

    ``source`` is an ``H x W`` or ``C x H x W`` numpy array or :class:`Tensor`.
    Returns the warped map (same kind as the input) and the validity mask.
    Out-of-range samples are border-clamped and marked invalid.
    """
    if flow.direction != BACKWARD:
        raise FlowError("backward_warp needs a backward (target -> source) flow")
    is_tensor = isinstance(source, Tensor)
    src = source if is_tensor else Tensor(np.asarray(source))
    squeeze = src.ndim == 2
    if squeeze:
        src = src.reshape(1, *src.shape)
    if src.shape[-2:] != (flow.height, flow.width):
        raise FlowError(f"extent mismatch: source {src.shape[-2:]} vs flow {(flow.height, flow.width)}")
    sx, sy = sample_coords(flow)
    out = grid_sample(src, sx, sy)
    if squeeze:
        out = out.reshape(flow.height, flow.width)
    mask = validity_mask(flow)
    return (out if is_tensor else out.data), mask


def write_flo(field: FlowField, path) -> None:
    uv = np.stack([field.u, field.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", field.width, field.height))
        fh.write(uv.tobytes())


def read_flo(path, direction: str = BACKWARD) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FLO_MAGIC:
        raise FlowError(f"{path}: bad magic {raw[:4]!r}, expected {FLO_MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedError(f"{path}: truncated header, expected 12 bytes, got {len(raw)}")
    width, height = struct.unpack("<ii", raw[4:12])
    if width <= 0 or height <= 0:
        raise FlowError(f"{path}: invalid extents {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) != expected:
        raise TruncatedError(f"{path}: expected {expected} bytes, got {len(raw)}")
    uv = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float32).reshape(height, width, 2)
    return FlowField(uv[..., 0].copy(), uv[..., 1].copy(), direction)


def write_mask_pgm(mask: np.ndarray, path) -> None:
    m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(m.tobytes())


def compose_backward(flows: list[FlowField], masks: list[np.ndarray] | None = None) -> tuple[FlowField, np.ndarray]:
    """Chain backward flows ``[t -> t-1, t-1 -> t-2, ...]`` into ``t -> t-k``.

    Each later field is bilinearly sampled at the displaced position, which
    is exact for integer displacements.  The returned mask is valid only where
    every hop stays inside the frame (and inside the given per-hop masks).
    """
    if not flows:
        raise FlowError("compose_backward needs at least one flow")
    first = flows[0]
    u = first.u.astype(np.float64)
    v = first.v.astype(np.float64)
    ok = validity_mask(first)
    if masks is not None:
        ok &= np.asarray(masks[0], dtype=bool)
    ys, xs = np.mgrid[0:first.height, 0:first.width]
    for k, nxt in enumerate(flows[1:], 1):
        if (nxt.height, nxt.width) != (first.height, first.width):
            raise FlowError("compose_backward: extent mismatch")
        sx, sy = xs + u, ys + v
        step = grid_sample(Tensor(np.stack([nxt.u, nxt.v]).astype(np.float64)), sx, sy).data
        if masks is not None:
            m = grid_sample(Tensor(np.asarray(masks[k], dtype=np.float64)[None]), sx, sy).data[0]
            ok &= m == 1.0
        u, v = u + step[0], v + step[1]
        ok &= validity_mask(FlowField(u, v))
    dtype = first.u.dtype
    return FlowField(u.astype(dtype), v.astype(dtype), BACKWARD), ok
