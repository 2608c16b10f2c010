"""Streaming inference, training, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import ArchConfig, ConfigError, TrainConfig, Variant, build, format_kv, parse_kv, split_sections
from .flow import BACKWARD, FlowField, backward_warp, compose_backward
from .memory import MemoryState, init_memory, intermediate_update, memory_gradient_update
from .metrics import (DepthEvalReport, TemporalConsistencyReport, depth_metrics, mean_depth_report,
                      mean_tc_report, silog_loss, temporal_consistency)
from .model import ModelParams, attend_memory, depth_forward, init_params, zero_carry
from .synthdata import FrameRecord
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# event log


class EventLog:
    """One line per algorithm step: ``t=<int> step=<name>``."""

    def __init__(self):
        self.lines: list[str] = []

    def __call__(self, t: int, step: str) -> None:
        self.lines.append(f"t={t} step={step}")

    def steps(self, t: int) -> list[str]:
        prefix = f"t={t} "
        return [ln.split("step=", 1)[1] for ln in self.lines if ln.startswith(prefix)]

    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")


INIT_STEPS = ["init_encode", "init_memory", "depth"]
FRAME_STEPS = ["flow", "intermediate_update", "warp", "forward_current", "forward_warped",
               "silog", "backprop", "memory_update", "depth", "encode"]


# ---------------------------------------------------------------------------
# streaming state machine


@dataclass
class StreamState:
    memory: MemoryState | None
    q_prev: Tensor
    f_prev: list[Tensor]
    o_prev: np.ndarray
    image_prev: np.ndarray
    t: int = 0


def _flow_array(flow, shape, dtype) -> np.ndarray:
    if isinstance(flow, FlowField):
        if flow.direction != BACKWARD:
            raise ValueError("stream flows must be backward (t -> t-1) fields")
        arr = flow.as_array()
    else:
        arr = np.asarray(flow)
    if arr.shape != (2,) + tuple(shape):
        raise ValueError(f"flow shape {arr.shape} does not match frame extents {shape}")
    return arr.astype(dtype, copy=False)


class Stream:
    """Per-sequence runner of the streaming algorithm.

    ``predict`` runs the final depth pass; training overrides it with a
    taped, trainable pass.  Nothing is shared between Stream instances.
    """

    def __init__(self, params: ModelParams, cfg: ArchConfig, variant: Variant = Variant(),
                 emit: Callable[[int, str], None] | None = None):
        self.params = params
        self.cfg = cfg
        self.variant = variant
        self.emit = emit or (lambda t, s: None)
        self.state: StreamState | None = None
        self.last_update_loss: float | None = None

    @property
    def dtype(self):
        return self.params.dtype

    def predict(self, image: Tensor, memory: MemoryState | None, flow: Tensor, carry: list[Tensor]):
        frozen = self.params.frozen()
        with T.no_tape():
            return depth_forward(image, frozen, self.cfg, self._attended(memory, frozen), flow, carry)

    def _attended(self, memory: MemoryState | None, params: ModelParams) -> Tensor | None:
        if memory is None:
            return None
        vis, disp = memory.stacked()
        return attend_memory(vis, disp, params, self.cfg)

    def _decoder_inputs(self, flow: np.ndarray, carry: list[Tensor]):
        v = self.variant
        flow_in = flow if v.flow_decoder else np.zeros_like(flow)
        carry_in = carry if v.carry else [Tensor(np.zeros_like(c.data)) for c in carry]
        return Tensor(flow_in), carry_in

    def start(self, image: np.ndarray):
        """Initialisation block: Q_0, zero flow and carry, L copies in memory."""
        img = Tensor(np.asarray(image, dtype=self.dtype))
        _, h, w = img.shape
        frozen = self.params.frozen()
        with T.no_tape():
            q0 = depth_forward(img, frozen, self.cfg, None, Tensor(np.zeros((2, h, w), self.dtype)),
                               zero_carry(self.cfg, h, w, self.dtype)).features
        self.emit(0, "init_encode")
        memory = init_memory(q0, self.cfg.memory_length, (h, w)) if self.variant.memory else None
        self.emit(0, "init_memory")
        o0 = np.zeros((2, h, w), dtype=self.dtype)
        carry = zero_carry(self.cfg, h, w, self.dtype)
        flow_in, carry_in = self._decoder_inputs(o0, carry)
        out = self.predict(img, memory, flow_in, carry_in)
        self.emit(0, "depth")
        self.state = StreamState(memory, q0, [c.detach() for c in out.carry], o0, img.data, 0)
        return out

    def step(self, image: np.ndarray, flow):
        """One frame ``t >= 1`` given the backward flow ``t -> t-1``."""
        if self.state is None:
            raise RuntimeError("Stream.step called before start")
        st = self.state
        t = st.t + 1
        img = Tensor(np.asarray(image, dtype=self.dtype))
        _, h, w = img.shape
        flow_arr = _flow_array(flow, (h, w), self.dtype)
        self.emit(t, "flow")
        flow_in, carry_in = self._decoder_inputs(flow_arr, st.f_prev)
        memory = None
        self.last_update_loss = None
        if self.variant.memory:
            memory = intermediate_update(st.memory, st.q_prev, st.o_prev)
            self.emit(t, "intermediate_update")
            if not self.variant.sliding_window:
                warped, mask = backward_warp(st.image_prev, FlowField.from_array(flow_arr, BACKWARD))
                self.emit(t, "warp")
                memory, info = memory_gradient_update(
                    memory, img, Tensor(warped.astype(self.dtype, copy=False)), mask, flow_in, carry_in,
                    self.params, self.cfg, emit=lambda s: self.emit(t, s))
                self.last_update_loss = info.loss
        out = self.predict(img, memory, flow_in, carry_in)
        self.emit(t, "depth")
        self.emit(t, "encode")
        self.state = StreamState(memory, out.features.detach(), [c.detach() for c in out.carry],
                                 flow_arr, img.data, t)
        return out


def infer_stream(frames: Sequence[np.ndarray], backward_flows: Sequence, params: ModelParams,
                 cfg: ArchConfig, variant: Variant = Variant(),
                 events: EventLog | None = None) -> list[np.ndarray]:
    """Depth for every frame of one video; ``backward_flows[i]`` maps frame i+1 to frame i."""
    if len(frames) < 1:
        raise ValueError("infer_stream needs at least one frame")
    if len(backward_flows) != len(frames) - 1:
        raise ValueError(f"need exactly {len(frames) - 1} flows for {len(frames)} frames, got {len(backward_flows)}")
    stream = Stream(params.frozen(), cfg, variant, events)
    depths = [stream.start(frames[0]).depth.data.copy()]
    for image, flow in zip(frames[1:], backward_flows):
        depths.append(stream.step(image, flow).depth.data.copy())
    return depths


def predict_monocular(image: np.ndarray, params: ModelParams, cfg: ArchConfig) -> np.ndarray:
    """Single-image depth: no memory, zero flow, zero carry."""
    img = Tensor(np.asarray(image, dtype=params.dtype))
    _, h, w = img.shape
    with T.no_tape():
        out = depth_forward(img, params.frozen(), cfg, None, Tensor(np.zeros((2, h, w), params.dtype)),
                            zero_carry(cfg, h, w, params.dtype))
    return out.depth.data.copy()


# ---------------------------------------------------------------------------
# clips and augmentation


@dataclass
class Clip:
    images: list[np.ndarray]
    depths: list[np.ndarray]
    flows: list[FlowField]        # flows[i]: frame i+1 -> frame i
    masks: list[np.ndarray]       # validity of flows[i]


def subsample_sequence(records: Sequence[FrameRecord], T_len: int, r: int) -> Clip:
    """Frames ``0, r, ..., T*r`` with backward flows chained over each ``r``-step."""
    if r < 1:
        raise ValueError(f"subsampling ratio must be >= 1, got {r}")
    need = T_len * r + 1
    if len(records) < need:
        raise ValueError(f"need {need} frames for T={T_len}, r={r}, sequence has {len(records)}")
    idx = [k * r for k in range(T_len + 1)]
    flows, masks = [], []
    for a, b in zip(idx[:-1], idx[1:]):
        hops = [records[t].flow_bw for t in range(b, a, -1)]
        hop_masks = [records[t].mask for t in range(b, a, -1)]
        if r == 1:
            flows.append(hops[0])
            masks.append(hop_masks[0])
        else:
            f, m = compose_backward(hops, hop_masks)
            flows.append(f)
            masks.append(m)
    return Clip([records[i].image for i in idx], [records[i].depth for i in idx], flows, masks)


def draw_ratio(rng: np.random.Generator, r_max: int, length: int, T_len: int) -> int:
    feasible = max(1, min(r_max, (length - 1) // T_len))
    return int(rng.integers(1, feasible + 1))


# ---------------------------------------------------------------------------
# optimisation


class Optimizer:
    """Plain gradient descent or Adam over a dict of named arrays."""

    def __init__(self, kind: str = "sgd", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, np.ndarray] = {}
        self.steps = 0

    def apply(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
        self.steps += 1
        out = {}
        for name, t in params:
            g = grads.get(name)
            if g is None:
                out[name] = Tensor(t.data)
                continue
            if self.kind == "sgd":
                out[name] = Tensor(t.data - t.dtype.type(lr) * g)
                continue
            m = self.state.get(f"m.{name}", np.zeros_like(t.data))
            v = self.state.get(f"v.{name}", np.zeros_like(t.data))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.state[f"m.{name}"], self.state[f"v.{name}"] = m, v
            mhat = m / (1 - self.beta1 ** self.steps)
            vhat = v / (1 - self.beta2 ** self.steps)
            out[name] = Tensor((t.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(t.dtype))
        return ModelParams(out)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: self.state[k] for k in sorted(self.state)}
        arrays["steps"] = np.array([self.steps], dtype=np.float64)
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        arrays = dict(arrays)
        steps = arrays.pop("steps", None)
        self.steps = int(steps[0]) if steps is not None else 0
        self.state = arrays


def lr_at(step: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return start
    return start + (end - start) * step / (total - 1)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MAMO"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: ArchConfig
    variant: Variant
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    rng_state: str = ""
    version: int = CKPT_VERSION

    def model_params(self) -> ModelParams:
        return ModelParams({k: Tensor(v) for k, v in self.params.items()})


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", ck.version))
    buf.write(_pack_text(format_kv(ck.arch) + format_kv(ck.variant)))
    buf.write(struct.pack("<I", len(ck.params)))
    for name, arr in ck.params.items():
        T.write_blob(buf, name, arr)
    buf.write(struct.pack("<I", len(ck.optimizer)))
    for name, arr in ck.optimizer.items():
        T.write_blob(buf, name, arr)
    buf.write(struct.pack("<IQ", ck.epoch, ck.seed))
    buf.write(_pack_text(ck.rng_state))
    return buf.getvalue()


def save_checkpoint(path, ck: Checkpoint) -> None:
    p = Path(path)
    if not p.parent.is_dir():
        raise FileNotFoundError(f"checkpoint directory does not exist: {p.parent}")
    p.write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path, expected_arch: ArchConfig | None = None) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    fh = io.BytesIO(raw)
    read = lambda n: T._read_exact(fh, n)  # noqa: E731
    if read(4) != CKPT_MAGIC:
        raise CheckpointError(f"{p}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", read(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{p}: version {version}, expected {CKPT_VERSION}")
    (n,) = struct.unpack("<I", read(4))
    arch_vals, _, variant_vals = split_sections(parse_kv(read(n).decode("utf-8")))
    arch = build(ArchConfig, arch_vals)
    variant = build(Variant, variant_vals)
    if expected_arch is not None and expected_arch != arch:
        diffs = [f"{f.name}: checkpoint {getattr(arch, f.name)!r} vs expected {getattr(expected_arch, f.name)!r}"
                 for f in dataclasses.fields(arch) if getattr(arch, f.name) != getattr(expected_arch, f.name)]
        raise ConfigError(f"{p}: config mismatch ({'; '.join(diffs)})")
    params = {}
    (count,) = struct.unpack("<I", read(4))
    for _ in range(count):
        name, arr = T.read_blob(fh)
        params[name] = arr
    opt = {}
    (count,) = struct.unpack("<I", read(4))
    for _ in range(count):
        name, arr = T.read_blob(fh)
        opt[name] = arr
    epoch, seed = struct.unpack("<IQ", read(12))
    (n,) = struct.unpack("<I", read(4))
    rng_state = read(n).decode("utf-8")
    if fh.tell() != len(raw):
        raise CheckpointError(f"{p}: {len(raw) - fh.tell()} trailing bytes")
    expected_names = init_params(arch, 0).names()
    if list(params) != expected_names:
        raise CheckpointError(f"{p}: parameter set does not match the architecture config")
    return Checkpoint(arch, variant, params, opt, epoch, seed, rng_state, version)


# ---------------------------------------------------------------------------
# training


class TrainStream(Stream):
    """Stream whose final depth pass is taped against trainable parameters."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.target: np.ndarray | None = None
        self.loss: float | None = None
        self.grads: dict[str, np.ndarray] = {}

    def predict(self, image, memory, flow, carry):
        trainable = self.params.trainable()
        with Tape() as tape:
            attended = self._attended(memory, trainable)
            out = depth_forward(image, trainable, self.cfg, attended, flow, carry)
            loss = silog_loss(out.depth, self.target, eps=self.cfg.depth_eps)
        grads = T.backward(tape, loss)
        self.grads = {name: grads[t] for name, t in trainable if t in grads}
        self.loss = float(loss.item())
        return out


@dataclass
class EpochStats:
    epoch: int
    loss: float
    rmse: float
    steps: int
    memory: bool


def train(sequences: Sequence[Sequence[FrameRecord]], arch: ArchConfig, tcfg: TrainConfig,
          variant: Variant = Variant(), params: ModelParams | None = None,
          progress: Callable[[EpochStats], None] | None = None) -> tuple[Checkpoint, list[EpochStats]]:
    """Supervised training over clips, one parameter step per frame.

    The first ``tcfg.n_warmup`` epochs run the plain monocular network.  The
    memory refinement inside each step sees frozen weights and its result is
    a constant for the parameter update.
    """
    dtype = np.float32
    if params is None:
        params = init_params(arch, tcfg.seed, dtype)
    else:
        params = params.astype(dtype)
    rng = np.random.default_rng(tcfg.seed)
    opt = Optimizer(tcfg.optimizer)
    n_clips = len(sequences)
    total_steps = tcfg.epochs * n_clips * (tcfg.T + 1) // max(tcfg.batch_size, 1)
    global_step = 0
    trace: list[EpochStats] = []
    for epoch in range(tcfg.epochs):
        use_memory = epoch >= tcfg.n_warmup
        run_variant = variant if use_memory else Variant.monocular()
        order = rng.permutation(n_clips)
        ratios = [draw_ratio(rng, tcfg.r_max, len(sequences[i]), tcfg.T) for i in range(n_clips)]
        losses, rmses = [], []
        accum: dict[str, np.ndarray] = {}
        pending = 0
        for pos, ci in enumerate(order):
            clip = subsample_sequence(sequences[ci], tcfg.T, ratios[ci])
            stream = TrainStream(params, arch, run_variant)
            for t in range(len(clip.images)):
                stream.target = clip.depths[t]
                try:
                    if t == 0:
                        out = stream.start(clip.images[0])
                    else:
                        out = stream.step(clip.images[t], clip.flows[t - 1])
                except T.NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch} clip {int(ci)} t={t}: {exc}") from exc
                losses.append(stream.loss)
                rmses.append(float(np.sqrt(np.mean((out.depth.data - clip.depths[t]) ** 2))))
                if tcfg.batch_size == 1:
                    lr = lr_at(global_step, total_steps, tcfg.lr_start, tcfg.lr_end)
                    params = opt.apply(params, stream.grads, lr)
                    stream.params = params
                    global_step += 1
                else:
                    for k, g in stream.grads.items():
                        accum[k] = g if k not in accum else accum[k] + g
            if tcfg.batch_size > 1:
                pending += 1
                if pending == tcfg.batch_size or pos == n_clips - 1:
                    lr = lr_at(global_step, total_steps, tcfg.lr_start, tcfg.lr_end)
                    params = opt.apply(params, {k: g / pending for k, g in accum.items()}, lr)
                    global_step += 1
                    accum, pending = {}, 0
        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(rmses)), len(losses), use_memory)
        trace.append(stats)
        if progress:
            progress(stats)
    ck = Checkpoint(arch, variant, {k: t.data for k, t in params}, opt.state_arrays(),
                    tcfg.epochs, tcfg.seed, json.dumps(rng.bit_generator.state, sort_keys=True))
    return ck, trace


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    depth: DepthEvalReport
    tc: TemporalConsistencyReport
    predictions: list[list[np.ndarray]]


def tc_for_sequence(depths: Sequence[np.ndarray], flows: Sequence[FlowField],
                    masks: Sequence[np.ndarray] | None, thr: float) -> TemporalConsistencyReport | None:
    reports = []
    for t in range(1, len(depths)):
        warped, valid = backward_warp(np.asarray(depths[t - 1], dtype=np.float64), flows[t - 1])
        if masks is not None:
            valid = valid & masks[t - 1]
        if valid.any():
            reports.append(temporal_consistency(depths[t], warped, valid, thr))
    return mean_tc_report(reports) if reports else None


def evaluate(params: ModelParams, arch: ArchConfig, sequences: Sequence[Sequence[FrameRecord]],
             variant: Variant = Variant(), T_len: int | None = None, cap: float | None = None,
             thr: float = 1.25) -> EvalResult:
    """Per-frame depth metrics averaged over all frames, TC averaged over sequences."""
    depth_reports, tc_reports, preds = [], [], []
    for records in sequences:
        clip = subsample_sequence(records, T_len if T_len is not None else len(records) - 1, 1)
        d = infer_stream(clip.images, clip.flows, params, arch, variant)
        preds.append(d)
        for pred, gt in zip(d, clip.depths):
            depth_reports.append(depth_metrics(pred, gt, cap=cap, eps=arch.depth_eps))
        tc = tc_for_sequence(d, clip.flows, clip.masks, thr)
        if tc is not None:
            tc_reports.append(tc)
    return EvalResult(mean_depth_report(depth_reports), mean_tc_report(tc_reports), preds)
