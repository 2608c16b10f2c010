"""SILog training loss, standard depth metrics and temporal consistency."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SILOG_ALPHA = 10.0
SILOG_LAMBDA = 0.85
DEPTH_EPS = 1e-6


class EmptyMaskError(ValueError):
    pass


def _mask_indices(mask, shape) -> np.ndarray:
    if mask is None:
        return np.arange(int(np.prod(shape)))
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match {tuple(shape)}")
    idx = np.flatnonzero(m)
    if idx.size == 0:
        raise EmptyMaskError("mask selects no pixels")
    return idx


def silog_loss(pred: Tensor, target, mask=None, alpha: float = SILOG_ALPHA,
               lam: float = SILOG_LAMBDA, eps: float = DEPTH_EPS) -> Tensor:
    """Scale-invariant log loss ``alpha * sqrt(mean(d^2) - lam * mean(d)^2)``.

    ``d = log(pred) - log(target)`` over masked pixels.  The radicand is
    evaluated as ``var(d) + (1 - lam) * mean(d)^2``, which is the same
    quantity but never negative from rounding.  Differentiable in ``pred``;
    ``target`` may be a Tensor (gradient flows into it too) or an array.
    """
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"silog_loss: pred {pred.shape} vs target {target.shape}")
    idx = _mask_indices(mask, pred.shape)
    p = T.clamp_min(pred.reshape(-1)[idx], eps)
    t = T.clamp_min(target.reshape(-1)[idx], eps)
    d = T.log(p) - T.log(t)
    m = d.mean()
    var = T.square(d - m).mean()
    radicand = var + T.square(m) * (1.0 - lam)
    return T.sqrt(radicand) * alpha


@dataclass(frozen=True)
class DepthEvalReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, mask=None, cap: float | None = None, eps: float = DEPTH_EPS) -> DepthEvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth_metrics: pred {pred.shape} vs gt {gt.shape}")
    idx = _mask_indices(mask, gt.shape)
    g = gt.reshape(-1)[idx]
    if (g <= 0).any():
        raise ValueError("depth_metrics: ground truth must be positive on the mask")
    p = np.clip(pred.reshape(-1)[idx], eps, cap if cap is not None else np.inf)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthEvalReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        pixel_count=int(idx.size),
    )


@dataclass(frozen=True)
class TemporalConsistencyReport:
    aTC: float
    rTC: float
    thr: float

    def as_dict(self) -> dict:
        return asdict(self)


def temporal_consistency(depth, warped_prev, mask, thr: float = 1.25) -> TemporalConsistencyReport:
    """Absolute and ratio consistency of ``depth`` against the warped previous depth."""
    if thr <= 1:
        raise ValueError(f"temporal_consistency: thr must exceed 1, got {thr}")
    d = np.asarray(depth, dtype=np.float64)
    w = np.asarray(warped_prev, dtype=np.float64)
    if d.shape != w.shape:
        raise ValueError(f"temporal_consistency: {d.shape} vs {w.shape}")
    idx = _mask_indices(mask, d.shape)
    d, w = d.reshape(-1)[idx], w.reshape(-1)[idx]
    atc = float(np.mean(np.abs(d - w) / d))
    rtc = float(np.mean(np.maximum(d / w, w / d) < thr))
    return TemporalConsistencyReport(atc, rtc, float(thr))


def mean_depth_report(reports: list[DepthEvalReport]) -> DepthEvalReport:
    """Average per-frame reports (each frame weighted equally)."""
    if not reports:
        raise ValueError("no reports to average")
    keys = [k for k in DepthEvalReport.__dataclass_fields__ if k != "pixel_count"]
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return DepthEvalReport(**vals, pixel_count=sum(r.pixel_count for r in reports))


def mean_tc_report(reports: list[TemporalConsistencyReport]) -> TemporalConsistencyReport:
    if not reports:
        raise ValueError("no reports to average")
    return TemporalConsistencyReport(float(np.mean([r.aTC for r in reports])),
                                     float(np.mean([r.rTC for r in reports])), reports[0].thr)


def format_report(report) -> str:
    """One ``name: value`` line per metric, then a ``key=value`` block."""
    items = report.as_dict()
    width = max(len(k) for k in items)
    human = [f"{k.ljust(width)} : {_fmt(v)}" for k, v in items.items()]
    machine = [f"{k}={_fmt(v)}" for k, v in items.items()]
    return "\n".join(human) + "\n\n" + "\n".join(machine) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"
