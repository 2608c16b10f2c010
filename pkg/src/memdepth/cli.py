"""Command-line entry point: gen-data, train, infer, eval, selftest."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ArchConfig, ConfigError, TrainConfig, Variant, build, load_config_file, split_sections
from .flow import BACKWARD, FlowField, backward_warp, read_flo
from .metrics import EmptyMaskError, depth_metrics, format_report, mean_depth_report, mean_tc_report
from .pipeline import (CheckpointError, EventLog, TrainingDiverged, infer_stream, load_checkpoint,
                       save_checkpoint, tc_for_sequence, train)
from .synthdata import (DEPTH_PGM_SCALE, read_f32, write_f32, write_pgm16, generate_dataset, read_dataset,
                        read_pgm, read_sequence, write_dataset)

log = logging.getLogger("memdepth")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags win over file values")
    p.add_argument("--seed", type=int)
    p.add_argument("--mem-length", type=int, dest="memory_length")
    p.add_argument("--token-channels", type=int, dest="token_channels")
    p.add_argument("--mem-lr", type=float, dest="memory_lr")
    p.add_argument("--no-memory", action="store_true", help="monocular baseline: memory, carry and flow off")
    p.add_argument("--no-carry", action="store_true")
    p.add_argument("--no-flow-decoder", action="store_true")
    p.add_argument("--sliding-window", action="store_true", help="keep memory but skip the gradient refinement")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr-start", type=float, dest="lr_start")
    p.add_argument("--lr-end", type=float, dest="lr_end")
    p.add_argument("--drop-rate-max", type=int, dest="r_max")
    p.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")
    p.add_argument("--optimizer", choices=["sgd", "adam"])


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memdepth", description="Streaming video depth with refined memory tokens.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--sequences", type=int, default=20)
    g.add_argument("--frames", type=int, default=9)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_model_flags(t)
    _add_train_flags(t)

    i = sub.add_parser("infer", help="stream one sequence through a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sequence", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--frames", type=int)
    _add_model_flags(i)

    e = sub.add_parser("eval", help="score predicted depth against a sequence or dataset")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out")
    e.add_argument("--cap", type=float)
    e.add_argument("--thr", type=float, default=1.25)

    s = sub.add_parser("selftest", help="gradient checks and oracle comparisons")
    s.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# config merging


def resolve_config(args, base_arch: ArchConfig | None = None, base_variant: Variant | None = None):
    """File values first, then explicit flags; returns (arch, train, variant)."""
    arch_vals, train_vals, var_vals = {}, {}, {}
    if getattr(args, "config", None):
        arch_vals, train_vals, var_vals = split_sections(load_config_file(args.config))
    arch = build(ArchConfig, arch_vals, base_arch)
    tcfg = build(TrainConfig, train_vals)
    variant = build(Variant, var_vals, base_variant)

    arch_over = {k: getattr(args, k) for k in ("memory_length", "token_channels", "memory_lr")
                 if getattr(args, k, None) is not None}
    if arch_over:
        arch = dataclasses.replace(arch, **arch_over)
    train_keys = [f.name for f in dataclasses.fields(TrainConfig)]
    train_over = {k: getattr(args, k) for k in train_keys if getattr(args, k, None) is not None}
    if train_over:
        tcfg = dataclasses.replace(tcfg, **train_over)
    if getattr(args, "no_memory", False):
        variant = Variant.monocular()
    if getattr(args, "no_carry", False):
        variant = dataclasses.replace(variant, carry=False)
    if getattr(args, "no_flow_decoder", False):
        variant = dataclasses.replace(variant, flow_decoder=False)
    if getattr(args, "sliding_window", False):
        if not variant.memory:
            raise ConfigError("--sliding-window needs the memory path (drop --no-memory)")
        variant = dataclasses.replace(variant, sliding_window=True)
    return arch, tcfg, variant


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    data = generate_dataset(args.sequences, args.frames, args.height, args.width, seed=args.seed)
    write_dataset(data, args.out)
    print(f"wrote {args.sequences} sequences x {args.frames} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    arch, tcfg, variant = resolve_config(args)
    data = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["epoch loss rmse steps memory"]

    def progress(s):
        line = f"{s.epoch} {s.loss:.6f} {s.rmse:.6f} {s.steps} {int(s.memory)}"
        lines.append(line)
        log.info("epoch %s", line)

    t0 = time.time()
    ck, _ = train(data, arch, tcfg, variant, progress=progress)
    save_checkpoint(out / "model.ckpt", ck)
    (out / "loss_trace.txt").write_text("\n".join(lines) + "\n")
    print(f"trained {tcfg.epochs} epochs in {time.time() - t0:.1f}s; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    arch, _, variant = resolve_config(args, ck.arch, ck.variant)
    diffs = [f"{k}: checkpoint {getattr(ck.arch, k)!r} vs requested {getattr(arch, k)!r}"
             for k in ("token_channels", "stride_product", "heads", "decoder_scales")
             if getattr(arch, k) != getattr(ck.arch, k)]
    if diffs:
        raise ConfigError(f"config mismatch ({'; '.join(diffs)})")
    records = read_sequence(args.sequence, args.frames)
    events = EventLog()
    params = ck.model_params()
    depths = infer_stream([r.image for r in records], [r.flow_bw for r in records[1:]], params, arch,
                          variant, events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, d in enumerate(depths):
        write_f32(d, f"depth_{t}", out / f"depth_{t}.f32")
        write_pgm16(d * DEPTH_PGM_SCALE, out / f"depth_{t}.pgm")
    (out / "events.log").write_text(events.text())
    print(f"wrote {len(depths)} depth maps to {out}")
    return 0


def _count_frames(d: Path) -> int:
    n = 0
    while (d / f"depth_{n}.f32").is_file():
        n += 1
    return n


def _eval_pairs(pred_dir: Path, gt_dir: Path):
    """Yield (pred depths, gt depths, backward flows, masks) per sequence."""
    if (gt_dir / "index.txt").is_file():
        names = [ln.split()[0] for ln in (gt_dir / "index.txt").read_text().splitlines()
                 if ln.strip() and not ln.startswith("#")]
        pairs = [(pred_dir / n, gt_dir / n) for n in names]
    else:
        pairs = [(pred_dir, gt_dir)]
    for p, g in pairs:
        n = _count_frames(p)
        if n == 0:
            raise FileNotFoundError(f"no predictions (depth_0.f32) in {p}")
        preds = [read_f32(p / f"depth_{t}.f32") for t in range(n)]
        gts, flows, masks = [], [], []
        for t in range(n):
            gp = g / f"depth_{t}.f32"
            if not gp.is_file():
                raise FileNotFoundError(f"missing ground truth: {gp}")
            gts.append(read_f32(gp))
            if t > 0:
                fp = g / f"flow_bw_{t}.flo"
                flows.append(read_flo(fp, BACKWARD) if fp.is_file() else None)
                mp = g / f"mask_{t}.pgm"
                masks.append(read_pgm(mp) > 0 if mp.is_file() else None)
        yield preds, gts, flows, masks


def cmd_eval(args) -> int:
    depth_reports, tc_reports = [], []
    for preds, gts, flows, masks in _eval_pairs(Path(args.pred), Path(args.gt)):
        for p, g in zip(preds, gts):
            depth_reports.append(depth_metrics(p, g, cap=args.cap))
        if len(preds) > 1 and all(f is not None for f in flows):
            m = masks if all(x is not None for x in masks) else None
            tc = tc_for_sequence(preds, flows, m, args.thr)
            if tc is not None:
                tc_reports.append(tc)
    text = format_report(mean_depth_report(depth_reports))
    if tc_reports:
        text += "\n" + format_report(mean_tc_report(tc_reports))
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _selftest_checks(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (3, 4))
    w = rng.uniform(-1, 1, (3, 4))
    unary = {"exp": T.exp, "tanh": T.tanh, "sigmoid": T.sigmoid, "square": T.square,
             "softmax": lambda t: T.softmax(t, axis=-1), "log": lambda t: T.log(t * t + 0.5),
             "sqrt": lambda t: T.sqrt(t * t + 0.5)}
    for name, op in unary.items():
        rep = T.finite_diff_check(lambda t, op=op: T.sum_(op(t) * w), T.Tensor(x))
        yield f"gradcheck {name}", rep.passed, f"max rel err {rep.max_rel_error:.2e}"
    img = rng.uniform(-1, 1, (1, 2, 6, 6))
    k = rng.uniform(-1, 1, (3, 2, 3, 3))
    rep = T.finite_diff_check(lambda t: T.sum_(T.conv2d(t, T.Tensor(k), stride=2, padding=1)), T.Tensor(img))
    yield "gradcheck conv2d", rep.passed, f"max rel err {rep.max_rel_error:.2e}"
    out = T.conv2d(T.Tensor(img), T.Tensor(k), stride=1, padding=1).data
    ref = np.zeros_like(out)
    pad = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for co in range(3):
        for i in range(6):
            for j in range(6):
                ref[0, co, i, j] = float(np.sum(pad[0, :, i:i + 3, j:j + 3] * k[co]))
    err = float(np.max(np.abs(out - ref)))
    yield "oracle conv2d", err <= 1e-12, f"max abs err {err:.2e}"
    src = rng.normal(size=(6, 7))
    flow = FlowField(np.zeros((6, 7)), np.zeros((6, 7)))
    warped, mask = backward_warp(src, flow)
    yield "zero-flow warp identity", warped.tobytes() == src.tobytes() and bool(mask.all()), ""
    data = generate_dataset(1, frames=3, height=32, width=32, seed=seed)[0]
    ok = True
    for t in (1, 2):
        wimg, valid = backward_warp(data[t - 1].image, data[t].flow_bw)
        m = valid & data[t].mask
        ok &= bool(np.array_equal(wimg[:, m], data[t].image[:, m]))
    yield "generator warp consistency", ok, ""


def cmd_selftest(args) -> int:
    failures = 0
    for name, passed, detail in _selftest_checks(args.seed):
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}".rstrip())
        failures += not passed
    print(f"{failures} failure(s)")
    return 1 if failures else 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "selftest": cmd_selftest}


def run(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError, EmptyMaskError, TrainingDiverged, T.TensorError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
