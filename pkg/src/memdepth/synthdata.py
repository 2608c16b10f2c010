"""Synthetic videos with exact depth and optical flow.

A static camera looks at a textured background plane; flat objects slide
across it with constant velocity.  Textures are attached to the surfaces, so
for integer velocities the backward-warped previous frame reproduces the
current frame exactly wherever the flow is valid.

The random scene sampler ties each object's depth to its speed
(``depth = parallax / |v|``), so the depth of an object is recoverable from
motion but not from a single frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .flow import BACKWARD, FORWARD, FlowField, read_flo, write_flo, write_mask_pgm

BACKGROUND = -1


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str            # "rect" or "disk"
    size: tuple[float, float]  # (width, height) for rect, (radius, radius) for disk
    position: tuple[float, float]  # top-left (rect) or centre (disk) at frame 0, pixels
    velocity: tuple[float, float]  # pixels per frame
    depth: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    frames: int
    background_depth: float = 10.0
    objects: tuple[ObjectSpec, ...] = ()
    subpixel: bool = False
    stride: int = 8
    noise: float = 0.04

    def validate(self) -> None:
        if self.height % self.stride or self.width % self.stride:
            raise SceneError(f"extents {self.height}x{self.width} not divisible by {self.stride}")
        if self.frames < 1:
            raise SceneError("scene needs at least one frame")
        for i, ob in enumerate(self.objects):
            if ob.shape not in ("rect", "disk"):
                raise SceneError(f"object {i}: unknown shape {ob.shape!r}")
            if not 0 < ob.depth < self.background_depth:
                raise SceneError(f"object {i}: depth {ob.depth} must be in (0, {self.background_depth})")
            if not self.subpixel and any(float(c) != int(c) for c in ob.velocity + ob.position):
                raise SceneError(f"object {i}: integer mode needs integer position and velocity")
            for t in range(self.frames):
                if not _object_mask(ob, t, self.height, self.width).any():
                    raise SceneError(f"object {i} leaves the frame at t={t}")


@dataclass
class FrameRecord:
    image: np.ndarray        # 3 x H x W, float32 in [0, 1]
    depth: np.ndarray        # H x W, float32 metres
    flow_fw: FlowField       # t-1 -> t, on the grid of frame t-1 (zero at t=0)
    flow_bw: FlowField       # t -> t-1, on the grid of frame t (zero at t=0)
    mask: np.ndarray = field(default=None)  # validity of flow_bw, bool H x W


def _object_mask(ob: ObjectSpec, t: int, height: int, width: int) -> np.ndarray:
    px = ob.position[0] + t * ob.velocity[0]
    py = ob.position[1] + t * ob.velocity[1]
    ys, xs = np.mgrid[0:height, 0:width]
    if ob.shape == "rect":
        w, h = ob.size
        return (xs >= px) & (xs < px + w) & (ys >= py) & (ys < py + h)
    r = ob.size[0]
    return (xs - px) ** 2 + (ys - py) ** 2 <= r * r


def _value_noise(rng: np.random.Generator, height: int, width: int, cell: int = 8) -> np.ndarray:
    gh, gw = height // cell + 2, width // cell + 2
    grid = rng.uniform(0.15, 0.85, (3, gh, gw))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = grid[:, y0][:, :, x0]
    b = grid[:, y0][:, :, x0 + 1]
    c = grid[:, y0 + 1][:, :, x0]
    d = grid[:, y0 + 1][:, :, x0 + 1]
    return a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy


def _render(spec: SceneSpec, t: int, bg_tex: np.ndarray, obj_tex: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    image = bg_tex.copy()
    depth = np.full((h, w), spec.background_depth)
    ids = np.full((h, w), BACKGROUND, dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    order = sorted(range(len(spec.objects)), key=lambda i: -spec.objects[i].depth)
    for i in order:
        ob = spec.objects[i]
        m = _object_mask(ob, t, h, w)
        if not m.any():
            continue
        if spec.subpixel:
            colour = np.asarray(ob.albedo)[:, None]
        else:
            # texture indexed in object coordinates so it moves with the object
            ox = xs[m] - int(ob.position[0] + t * ob.velocity[0])
            oy = ys[m] - int(ob.position[1] + t * ob.velocity[1])
            tex, off = obj_tex[i]
            colour = tex[:, oy + off, ox + off]
        image[:, m] = colour
        depth[m] = ob.depth
        ids[m] = i
    return image, depth, ids


def _flows(spec: SceneSpec, ids_prev: np.ndarray, ids_cur: np.ndarray):
    h, w = spec.height, spec.width
    vel = np.zeros((len(spec.objects) + 1, 2))
    for i, ob in enumerate(spec.objects):
        vel[i] = ob.velocity
    # index -1 (background) maps to the zero row at the end
    bw = -vel[ids_cur].transpose(2, 0, 1)
    fw = vel[ids_prev].transpose(2, 0, 1)
    ys, xs = np.mgrid[0:h, 0:w]

    def footprint_ok(u, v, ids_src, ids_dst):
        sx, sy = xs + u, ys + v
        ok = (np.floor(sx) >= 0) & (np.ceil(sx) <= w - 1) & (np.floor(sy) >= 0) & (np.ceil(sy) <= h - 1)
        cx = [np.clip(np.floor(sx), 0, w - 1).astype(int), np.clip(np.ceil(sx), 0, w - 1).astype(int)]
        cy = [np.clip(np.floor(sy), 0, h - 1).astype(int), np.clip(np.ceil(sy), 0, h - 1).astype(int)]
        for yy in cy:
            for xx in cx:
                ok &= ids_src[yy, xx] == ids_dst
        return ok

    mask_bw = footprint_ok(bw[0], bw[1], ids_prev, ids_cur)
    return fw, bw, mask_bw


def generate_scene(spec: SceneSpec, seed: int = 0) -> list[FrameRecord]:
    """Render every frame of ``spec``; identical output for identical (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    bg = _value_noise(rng, h, w)
    bg = np.clip(bg + spec.noise * rng.standard_normal((3, h, w)), 0, 1)
    obj_tex = []
    for ob in spec.objects:
        extent = int(math.ceil(max(ob.size))) * 2 + 4
        off = extent // 2
        tex = np.asarray(ob.albedo)[:, None, None] + spec.noise * rng.standard_normal((3, 2 * extent, 2 * extent))
        obj_tex.append((np.clip(tex, 0, 1), off))
    records = []
    prev_ids = None
    for t in range(spec.frames):
        image, depth, ids = _render(spec, t, bg, obj_tex)
        if prev_ids is None:
            fw = bw = np.zeros((2, h, w))
            mask = np.ones((h, w), dtype=bool)
        else:
            fw, bw, mask = _flows(spec, prev_ids, ids)
        records.append(FrameRecord(
            image=image.astype(np.float32),
            depth=depth.astype(np.float32),
            flow_fw=FlowField.from_array(fw.astype(np.float32), FORWARD),
            flow_bw=FlowField.from_array(bw.astype(np.float32), BACKWARD),
            mask=mask,
        ))
        prev_ids = ids
    return records


def random_scene(rng: np.random.Generator, height: int = 64, width: int = 64, frames: int = 9,
                 n_objects: tuple[int, int] = (1, 3), parallax: float = 8.0,
                 background_depth: float = 10.0, max_speed: int = 4, stride: int = 8) -> SceneSpec:
    """Random integer-velocity scene where object depth is ``parallax / speed``."""
    objects = []
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    half_span = (frames - 1) / 2
    for _ in range(n):
        shape = "rect" if rng.random() < 0.5 else "disk"
        if shape == "rect":
            size = (int(rng.integers(8, 21)), int(rng.integers(8, 21)))
        else:
            r = int(rng.integers(5, 11))
            size = (r, r)
        # the centre starts within a quarter-extent of the middle, so bounding
        # the travel by a quarter-extent keeps it inside the frame throughout
        lim = max(1, min(max_speed, int((min(height, width) / 4) // max(half_span, 1))))
        while True:
            vx, vy = (int(v) for v in rng.integers(-lim, lim + 1, size=2))
            if vx or vy:
                break
        speed = math.hypot(vx, vy)
        depth = min(parallax / speed, background_depth * 0.95)
        cx = float(rng.integers(width // 4, 3 * width // 4))
        cy = float(rng.integers(height // 4, 3 * height // 4))
        sx, sy = int(round(cx - vx * half_span)), int(round(cy - vy * half_span))
        if shape == "rect":
            sx -= size[0] // 2
            sy -= size[1] // 2
        albedo = tuple(float(a) for a in rng.uniform(0.0, 1.0, 3))
        objects.append(ObjectSpec(shape, size, (sx, sy), (vx, vy), depth, albedo))
    spec = SceneSpec(height, width, frames, background_depth, tuple(objects), stride=stride)
    spec.validate()
    return spec


def generate_dataset(n_sequences: int, frames: int = 9, height: int = 64, width: int = 64,
                     seed: int = 0, **scene_kwargs) -> list[list[FrameRecord]]:
    """Independent random scenes, one child seed per sequence."""
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    out = []
    for child in children:
        rng = np.random.default_rng(child)
        spec = random_scene(rng, height, width, frames, **scene_kwargs)
        out.append(generate_scene(spec, seed=int(rng.integers(2**31))))
    return out


# ---------------------------------------------------------------------------
# dataset directory IO

INDEX_HEADER = "# memdepth dataset v1"
DEPTH_PGM_SCALE = 1000.0  # depth PGM stores millimetres, clipped to 65535


def write_pgm16(arr: np.ndarray, path) -> None:
    a = np.clip(np.round(arr), 0, 65535).astype(">u2")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw, dtype=dtype, offset=pos, count=w * h).reshape(h, w)


def write_f32(arr: np.ndarray, name: str, path) -> None:
    with open(path, "wb") as fh:
        T.write_blob(fh, name, np.asarray(arr, dtype=np.float32))


def read_f32(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return T.read_blob(fh)[1]


def write_sequence(records: list[FrameRecord], seq_dir) -> None:
    d = Path(seq_dir)
    d.mkdir(parents=True, exist_ok=True)
    for t, r in enumerate(records):
        write_pgm16(r.image.mean(axis=0) * 65535, d / f"img_{t}.pgm")
        write_f32(r.image, f"img_{t}", d / f"img_{t}.f32")
        write_f32(r.depth, f"depth_{t}", d / f"depth_{t}.f32")
        write_pgm16(r.depth * DEPTH_PGM_SCALE, d / f"depth_{t}.pgm")
        write_flo(r.flow_fw, d / f"flow_fw_{t}.flo")
        write_flo(r.flow_bw, d / f"flow_bw_{t}.flo")
        write_mask_pgm(r.mask, d / f"mask_{t}.pgm")


def write_dataset(sequences: list[list[FrameRecord]], out_dir) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lines = [INDEX_HEADER]
    for k, records in enumerate(sequences):
        write_sequence(records, root / f"seq_{k}")
        h, w = records[0].depth.shape
        lines.append(f"seq_{k} {len(records)} {h} {w}")
    (root / "index.txt").write_text("\n".join(lines) + "\n")


def _need(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    return path


def read_sequence(seq_dir, frames: int | None = None) -> list[FrameRecord]:
    d = Path(seq_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"missing sequence directory: {d}")
    if frames is None:
        frames = len(list(d.glob("img_*.f32")))
        if frames == 0:
            raise FileNotFoundError(f"no frames (img_*.f32) in {d}")
    records = []
    for t in range(frames):
        mask = read_pgm(_need(d / f"mask_{t}.pgm")) > 0
        records.append(FrameRecord(
            image=read_f32(_need(d / f"img_{t}.f32")),
            depth=read_f32(_need(d / f"depth_{t}.f32")),
            flow_fw=read_flo(_need(d / f"flow_fw_{t}.flo"), FORWARD),
            flow_bw=read_flo(_need(d / f"flow_bw_{t}.flo"), BACKWARD),
            mask=mask,
        ))
    return records


def read_dataset(root_dir) -> list[list[FrameRecord]]:
    root = Path(root_dir)
    index = _need(root / "index.txt")
    sequences = []
    for line in index.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, frames, *_ = line.split()
        sequences.append(read_sequence(root / name, int(frames)))
    return sequences
