"""Toy encoder-decoder depth network with memory self/cross-attention.

Shapes follow the unbatched convention ``C x H x W`` at the public surface.
The encoder downsamples by ``stride_product`` with stride-2 convolutions; the
decoder climbs back up, concatenating at each stage the encoder skip feature,
the pooled flow and the previous step's decoder feature (the carry).
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ArchConfig
from .tensor import ShapeError, Tensor

# flows enter the network scaled so typical displacements are O(1)
FLOW_SCALE = 0.25


class ModelParams:
    """Named parameter tensors; iteration order is fixed by construction."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def frozen(self) -> "ModelParams":
        """View with every parameter as a constant (arrays shared)."""
        return ModelParams(OrderedDict((k, t.detach()) for k, t in self.tensors.items()))

    def trainable(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, t.detach(requires_grad=True)) for k, t in self.tensors.items()))

    def replace(self, name: str, tensor: Tensor) -> "ModelParams":
        if name not in self.tensors:
            raise KeyError(name)
        out = OrderedDict(self.tensors)
        out[name] = tensor
        return ModelParams(out)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(OrderedDict(
            (k, Tensor(t.data.astype(dtype))) for k, t in self.tensors.items()))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.tensors.items())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def encoder_channels(cfg: ArchConfig) -> list[int]:
    c, n = cfg.token_channels, cfg.levels
    return [max(c >> (n - 1 - i), 4) for i in range(n)]


def decoder_channels(cfg: ArchConfig) -> list[int]:
    c = cfg.token_channels
    return [max(c >> k, 4) for k in range(cfg.decoder_scales)]


def decoder_strides(cfg: ArchConfig) -> list[int]:
    """Downsampling factor of each decoder stage, coarsest first."""
    return [cfg.stride_product >> k for k in range(cfg.decoder_scales)]


def carry_shapes(cfg: ArchConfig, height: int, width: int) -> list[tuple[int, int, int]]:
    return [(ch, height // s, width // s) for ch, s in zip(decoder_channels(cfg), decoder_strides(cfg))]


def init_params(cfg: ArchConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """He-normal convolutions, zero biases, ``1/sqrt(C)`` attention projections."""
    rng = np.random.default_rng(seed)
    p: OrderedDict[str, Tensor] = OrderedDict()

    def conv(name, cout, cin, k=3, gain=2.0):
        std = np.sqrt(gain / (cin * k * k))
        p[name + ".w"] = Tensor(rng.normal(0, std, (cout, cin, k, k)).astype(dtype))
        p[name + ".b"] = Tensor(np.zeros(cout, dtype=dtype))

    enc = encoder_channels(cfg)
    cin = 3
    for i, ch in enumerate(enc):
        conv(f"enc{i}", ch, cin)
        cin = ch

    cin = 2
    for i, ch in enumerate(enc[:-1] + [cfg.token_channels]):
        conv(f"pe{i}", ch, cin, gain=1.0)
        cin = ch

    c = cfg.token_channels
    for block in ("sa", "ca"):
        for proj in ("wq", "wk", "wv", "wo"):
            p[f"{block}.{proj}"] = Tensor(rng.normal(0, 1 / np.sqrt(c), (c, c)).astype(dtype))

    dec = decoder_channels(cfg)
    strides = decoder_strides(cfg)
    skip_ch = {2 ** (i + 1): ch for i, ch in enumerate(enc)}
    prev = c
    for k, (ch, s) in enumerate(zip(dec, strides)):
        cin = prev + 2 + ch + (skip_ch[s] if k > 0 else 0)
        conv(f"dec{k}", ch, cin)
        prev = ch
    conv("head", 1, prev, gain=1.0)
    return ModelParams(p)


def _conv(x: Tensor, params: ModelParams, name: str, stride: int = 1) -> Tensor:
    return T.conv2d(x, params[name + ".w"], params[name + ".b"], stride=stride, padding=1)


def _check_image(image: Tensor, cfg: ArchConfig) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"encode: expected 3 x H x W image, got {image.shape}")
    h, w = image.shape[1:]
    s = cfg.stride_product
    if h % s or w % s:
        raise ShapeError(f"encode: extents {(h, w)} not divisible by stride product {s}")


def encode_pyramid(image: Tensor, params: ModelParams, cfg: ArchConfig) -> list[Tensor]:
    """Encoder features at strides 2, 4, ..., s (each ``1 x C_i x h_i x w_i``)."""
    _check_image(image, cfg)
    x = image.reshape(1, *image.shape)
    feats = []
    for i in range(cfg.levels):
        x = T.relu(_conv(x, params, f"enc{i}", stride=2))
        feats.append(x)
    return feats


def encode(image: Tensor, params: ModelParams, cfg: ArchConfig) -> Tensor:
    """Encoder features at stride ``s``: ``C x H/s x W/s``."""
    q = encode_pyramid(image, params, cfg)[-1]
    return q.reshape(q.shape[1:])


def positional_encoding(displacement: Tensor, params: ModelParams, cfg: ArchConfig) -> Tensor:
    """``L x 2 x H x W`` displacement tokens to ``L x C x H/s x W/s``."""
    if displacement.ndim != 4 or displacement.shape[1] != 2:
        raise ShapeError(f"positional_encoding: expected L x 2 x H x W, got {displacement.shape}")
    h, w = displacement.shape[2:]
    s = cfg.stride_product
    if h % s or w % s:
        raise ShapeError(f"positional_encoding: extents {(h, w)} not divisible by {s}")
    x = displacement * FLOW_SCALE
    for i in range(cfg.levels):
        x = _conv(x, params, f"pe{i}", stride=2)
        if i < cfg.levels - 1:
            x = T.tanh(x)
    return x


def _to_seq(x: Tensor) -> Tensor:
    """``L x C x h x w`` -> ``(L*h*w) x C``."""
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def _from_seq(x: Tensor, shape) -> Tensor:
    n, c, h, w = shape
    return x.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def multihead_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, wq: Tensor, wk: Tensor,
                        wv: Tensor, wo: Tensor, heads: int, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention over sequences ``N x C``."""
    nq, c = q_in.shape
    nk = k_in.shape[0]
    if c % heads:
        raise ShapeError(f"attention: {c} channels not divisible by {heads} heads")
    if k_in.shape[1] != c or v_in.shape != k_in.shape:
        raise ShapeError(f"attention: channel mismatch {q_in.shape}, {k_in.shape}, {v_in.shape}")
    d = c // heads
    q = (q_in @ wq).reshape(nq, heads, d).transpose(1, 0, 2)
    k = (k_in @ wk).reshape(nk, heads, d).transpose(1, 2, 0)
    v = (v_in @ wv).reshape(nk, heads, d).transpose(1, 0, 2)
    scores = (q @ k) * q_in.dtype.type(1.0 / np.sqrt(d))
    attn = T.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    out = (attn @ v).transpose(1, 0, 2).reshape(nq, c)
    return out @ wo


def self_attend_memory(visual: Tensor, positional: Tensor, params: ModelParams, cfg: ArchConfig,
                       weights_out: list | None = None) -> Tensor:
    """Self-attention across all memory positions; positions enter queries and keys."""
    if visual.shape != positional.shape:
        raise ShapeError(f"self_attend_memory: visual {visual.shape} vs positional {positional.shape}")
    x = _to_seq(visual)
    qk = _to_seq(visual + positional)
    out = multihead_attention(qk, qk, x, params["sa.wq"], params["sa.wk"], params["sa.wv"],
                              params["sa.wo"], cfg.heads, weights_out)
    return _from_seq(out, visual.shape)


def cross_attend(memory: Tensor, features: Tensor, params: ModelParams, cfg: ArchConfig,
                 weights_out: list | None = None) -> Tensor:
    """Encoder features (queries) attend to memory (keys/values), plus residual."""
    if memory.ndim != 4 or features.ndim != 3 or memory.shape[1] != features.shape[0]:
        raise ShapeError(f"cross_attend: channel mismatch {memory.shape} vs {features.shape}")
    c, h, w = features.shape
    q = features.reshape(c, h * w).transpose(1, 0)
    kv = _to_seq(memory)
    out = multihead_attention(q, kv, kv, params["ca.wq"], params["ca.wk"], params["ca.wv"],
                              params["ca.wo"], cfg.heads, weights_out)
    return features + out.transpose(1, 0).reshape(c, h, w)


def attend_memory(visual: Tensor, displacement: Tensor, params: ModelParams, cfg: ArchConfig) -> Tensor:
    """Self-attended memory for stacked tokens ``L x C x h x w`` / ``L x 2 x H x W``."""
    return self_attend_memory(visual, positional_encoding(displacement, params, cfg), params, cfg)


def zero_carry(cfg: ArchConfig, height: int, width: int, dtype=np.float64) -> list[Tensor]:
    return [Tensor(np.zeros(s, dtype=dtype)) for s in carry_shapes(cfg, height, width)]


def decode(fused: Tensor, pyramid: list[Tensor], flow: Tensor, carry: list[Tensor],
           params: ModelParams, cfg: ArchConfig) -> tuple[Tensor, list[Tensor]]:
    """Fused features + skips + flow + carry -> (depth ``H x W``, new carry)."""
    c, hq, wq = fused.shape
    s = cfg.stride_product
    height, width = hq * s, wq * s
    if flow.shape != (2, height, width):
        raise ShapeError(f"decode: flow shape {flow.shape}, expected {(2, height, width)}")
    expected = carry_shapes(cfg, height, width)
    if [tuple(t.shape) for t in carry] != expected:
        raise ShapeError(f"decode: carry shapes {[t.shape for t in carry]}, expected {expected}")
    skips = {2 ** (i + 1): f for i, f in enumerate(pyramid)}
    scaled_flow = (flow * FLOW_SCALE).reshape(1, 2, height, width)
    x = fused.reshape(1, c, hq, wq)
    new_carry = []
    for k, stride in enumerate(decoder_strides(cfg)):
        if k > 0:
            x = T.upsample_nearest(x, 2)
        parts = [x]
        if k > 0:
            parts.append(skips[stride])
        parts.append(T.avg_pool(scaled_flow, stride))
        parts.append(carry[k].reshape(1, *carry[k].shape))
        x = T.relu(_conv(T.concat(parts, axis=1), params, f"dec{k}"))
        new_carry.append(x.reshape(x.shape[1:]))
    last = decoder_strides(cfg)[-1]
    if last > 1:
        x = T.upsample_nearest(x, last)
    logits = _conv(x, params, "head")
    depth = T.sigmoid(logits) * cfg.max_depth
    return depth.reshape(height, width), new_carry


@dataclass
class ForwardResult:
    depth: Tensor
    carry: list[Tensor]
    features: Tensor  # Q_t, C x h x w


def depth_forward(image: Tensor, params: ModelParams, cfg: ArchConfig, attended: Tensor | None,
                  flow: Tensor, carry: list[Tensor]) -> ForwardResult:
    """One pass of the full network on a single frame.

    ``attended`` is the self-attended memory (``None`` bypasses memory
    attention, leaving the encoder features untouched).
    """
    pyramid = encode_pyramid(image, params, cfg)
    q = pyramid[-1].reshape(pyramid[-1].shape[1:])
    fused = q if attended is None else cross_attend(attended, q, params, cfg)
    depth, new_carry = decode(fused, pyramid, flow, carry, params, cfg)
    return ForwardResult(depth, new_carry, q)
