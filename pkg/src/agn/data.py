"""Motion sequences: file formats, windowing, synthetic skeletons and exporters."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import InputError, ParseError

MOTB_MAGIC = b"MOTB"
MOTB_VERSION = 1
_MOTB_HEADER = struct.Struct("<4sIIII")


@dataclass
class MotionSequence:
    """``coords`` is ``[n_frames, n_joints, 3]`` in millimetres."""

    coords: np.ndarray
    fps: float = 25.0
    label: str | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise InputError(f"coords must be [frames, joints, 3], got {self.coords.shape}")
        if not self.fps > 0:
            raise InputError(f"fps must be positive, got {self.fps}")
        if not np.all(np.isfinite(self.coords)):
            raise InputError("coords contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def n_joints(self) -> int:
        return self.coords.shape[1]

    def joint_major(self) -> np.ndarray:
        """``[n_joints, n_frames, 3]``, the layout the model consumes."""
        return np.ascontiguousarray(self.coords.transpose(1, 0, 2))


@dataclass
class WindowPair:
    input: np.ndarray   # [N, t_in, 3]
    target: np.ndarray  # [N, t_out, 3]
    start: int = 0


# ---------------------------------------------------------------------------
# file formats


def save_motb(seq: MotionSequence, path) -> None:
    body = _MOTB_HEADER.pack(MOTB_MAGIC, MOTB_VERSION, seq.n_joints, seq.n_frames,
                             int(round(seq.fps * 1000)))
    body += np.ascontiguousarray(seq.coords, dtype="<f4").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_motb(path) -> MotionSequence:
    blob = Path(path).read_bytes()
    if len(blob) < _MOTB_HEADER.size + 4:
        raise ParseError(f"{path}: file too short for a MOTB header (offset 0)")
    magic, version, n_joints, n_frames, fps_milli = _MOTB_HEADER.unpack_from(blob)
    if magic != MOTB_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r} at offset 0")
    if version != MOTB_VERSION:
        raise ParseError(f"{path}: unsupported version {version} at offset 4")
    expected = _MOTB_HEADER.size + 4 * n_frames * n_joints * 3 + 4
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise ParseError(f"{path}: checksum mismatch at offset {len(blob) - 4}")
    if fps_milli == 0:
        raise ParseError(f"{path}: fps must be positive (offset 16)")
    coords = np.frombuffer(blob, dtype="<f4", count=n_frames * n_joints * 3,
                           offset=_MOTB_HEADER.size).reshape(n_frames, n_joints, 3)
    if not np.all(np.isfinite(coords)):
        bad = int(np.argmin(np.isfinite(coords).reshape(-1)))
        raise ParseError(f"{path}: non-finite value at offset {_MOTB_HEADER.size + 4 * bad}")
    return MotionSequence(coords.astype(np.float32), fps=fps_milli / 1000.0)


def save_csv(seq: MotionSequence, path) -> None:
    lines = [f"# joints={seq.n_joints} fps={seq.fps:g}"]
    for frame in seq.coords.reshape(seq.n_frames, -1):
        lines.append(",".join(format(float(v), ".9g") for v in frame))
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path, fps: float = 25.0) -> MotionSequence:
    n_joints = None
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            meta = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
            try:
                if "joints" in meta:
                    n_joints = int(meta["joints"])
                if "fps" in meta:
                    fps = float(meta["fps"])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: malformed header {line!r}") from exc
            continue
        try:
            vals = [float(tok) for tok in line.split(",")]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric value") from exc
        width = 3 * n_joints if n_joints else (len(rows[0]) if rows else len(vals))
        if len(vals) != width or width % 3:
            raise ParseError(f"{path}:{lineno}: expected {width} columns (multiple of 3), got {len(vals)}")
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no frames")
    coords = np.asarray(rows, dtype=np.float32).reshape(len(rows), -1, 3)
    return MotionSequence(coords, fps=fps)


def load(path, format: str | None = None) -> MotionSequence:
    fmt = format or Path(path).suffix.lstrip(".").lower()
    if fmt == "motb":
        return load_motb(path)
    if fmt == "csv":
        return load_csv(path)
    raise InputError(f"unknown motion format {fmt!r}")


def save(seq: MotionSequence, path, format: str | None = None) -> None:
    fmt = format or Path(path).suffix.lstrip(".").lower()
    if fmt == "motb":
        save_motb(seq, path)
    elif fmt == "csv":
        save_csv(seq, path)
    else:
        raise InputError(f"unknown motion format {fmt!r}")


# ---------------------------------------------------------------------------
# windows


def window_count(n_frames: int, t_in: int, t_out: int, stride: int) -> int:
    span = t_in + t_out
    return 0 if n_frames < span else (n_frames - span) // stride + 1


def windows(seq: MotionSequence, t_in: int, t_out: int, stride: int = 1) -> list[WindowPair]:
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    jm = seq.joint_major()
    out = []
    for w in range(window_count(seq.n_frames, t_in, t_out, stride)):
        s = w * stride
        out.append(WindowPair(jm[:, s:s + t_in].copy(), jm[:, s + t_in:s + t_in + t_out].copy(), s))
    return out


def stack_windows(pairs: Sequence[WindowPair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.input for p in pairs]), np.stack([p.target for p in pairs])


# ---------------------------------------------------------------------------
# synthetic articulated chain


def chain_angles(n_frames: int, fps: float, frequencies, amplitudes, phases) -> np.ndarray:
    """Relative joint angles ``A_j sin(2 pi f_j t + phi_j)``, shape ``[frames, joints]``."""
    t = np.arange(n_frames, dtype=np.float64)[:, None] / fps
    f, a, p = (np.asarray(v, dtype=np.float64)[None] for v in (frequencies, amplitudes, phases))
    return a * np.sin(2 * np.pi * f * t + p)


def synthesize(bone_lengths: Sequence[float], n_frames: int, fps: float = 25.0,
               frequencies=None, amplitudes=None, phases=None, noise_sd: float = 0.0,
               seed: int = 0) -> MotionSequence:
    """Planar forward kinematics of a chain rooted at the origin.

    Joint ``j`` sits at the far end of bone ``j``; its absolute heading is the
    cumulative sum of the relative angles up to ``j``.  Frequencies,
    amplitudes and phases left as ``None`` are drawn from ``seed``.
    """
    lengths = np.asarray(bone_lengths, dtype=np.float64)
    if lengths.ndim != 1 or lengths.size == 0 or np.any(lengths <= 0):
        raise InputError(f"bone lengths must be positive, got {bone_lengths}")
    if n_frames < 1 or not fps > 0:
        raise InputError(f"need n_frames >= 1 and fps > 0, got {n_frames}, {fps}")
    n = lengths.size
    rng = np.random.default_rng(seed)
    if frequencies is None:
        frequencies = rng.uniform(0.2, 1.0, n)
    if amplitudes is None:
        amplitudes = rng.uniform(0.2, 0.8, n)
    if phases is None:
        phases = rng.uniform(0, 2 * np.pi, n)
    heading = np.cumsum(chain_angles(n_frames, fps, frequencies, amplitudes, phases), axis=1)
    steps = np.stack([lengths * np.cos(heading), lengths * np.sin(heading)], axis=-1)
    xy = np.cumsum(steps, axis=1)
    coords = np.concatenate([xy, np.zeros(xy.shape[:2] + (1,))], axis=-1)
    if noise_sd > 0:
        coords = coords + rng.normal(0, noise_sd, coords.shape)
    return MotionSequence(coords.astype(np.float32), fps=fps)


def chain_edges(n_joints: int) -> list[tuple[int, int]]:
    return [(j - 1, j) for j in range(1, n_joints)]


# ---------------------------------------------------------------------------
# exporters


def export_csv(pred: np.ndarray, path, fps: float = 25.0) -> None:
    """``pred`` is ``[N, t_out, 3]``; written in the loadable CSV layout."""
    save_csv(MotionSequence(np.asarray(pred).transpose(1, 0, 2), fps=fps), path)


@dataclass
class Viewport:
    """Maps the x/y plane of every frame into one SVG column per frame."""

    xmin: float
    ymax: float
    scale: float
    cell: float = 160.0
    margin: float = 10.0

    @classmethod
    def fit(cls, points: np.ndarray, cell: float = 160.0, margin: float = 10.0) -> "Viewport":
        xy = points.reshape(-1, points.shape[-1])[:, :2]
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        span = float(max(hi[0] - lo[0], hi[1] - lo[1]))
        scale = (cell - 2 * margin) / span if span > 0 else 1.0
        return cls(float(lo[0]), float(hi[1]), scale, cell, margin)

    def map(self, frame: int, x: float, y: float) -> tuple[float, float]:
        return (frame * self.cell + self.margin + (x - self.xmin) * self.scale,
                self.margin + (self.ymax - y) * self.scale)


def export_svg(pred: np.ndarray, path, truth: np.ndarray | None = None,
               edges: Sequence[tuple[int, int]] | None = None) -> None:
    """Stick figures, one column per predicted frame; truth drawn dashed underneath."""
    pred = np.asarray(pred, dtype=np.float64)
    n_joints, n_frames = pred.shape[:2]
    edges = chain_edges(n_joints) if edges is None else list(edges)
    for a, b in edges:
        if not (0 <= a < n_joints and 0 <= b < n_joints):
            raise InputError(f"edge ({a}, {b}) references a joint outside 0..{n_joints - 1}")
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        if truth.shape != pred.shape:
            raise InputError(f"truth shape {truth.shape} differs from prediction {pred.shape}")
    layers = [("truth", truth, "#888888", "4 3")] if truth is not None else []
    layers.append(("pred", pred, "#d62728", None))
    vp = Viewport.fit(np.concatenate([arr for _, arr, _, _ in layers], axis=1))
    width, height = vp.cell * n_frames, vp.cell

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
           f'viewBox="0 0 {width:g} {height:g}">']
    for name, arr, color, dash in layers:
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<g class="{escape(name)}" stroke="{color}" fill="{color}">')
        for t in range(n_frames):
            pts = [vp.map(t, arr[j, t, 0], arr[j, t, 1]) for j in range(n_joints)]
            for a, b in edges:
                out.append(f'<line x1="{pts[a][0]:.3f}" y1="{pts[a][1]:.3f}" '
                           f'x2="{pts[b][0]:.3f}" y2="{pts[b][1]:.3f}" stroke-width="2"{dash_attr}/>')
            for x, y in pts:
                out.append(f'<circle class="{escape(name)}" cx="{x:.3f}" cy="{y:.3f}" r="3"/>')
        out.append("</g>")
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def export(pred: np.ndarray, path, truth: np.ndarray | None = None, format: str | None = None,
           edges=None, fps: float = 25.0) -> None:
    fmt = format or Path(path).suffix.lstrip(".").lower()
    if fmt == "csv":
        export_csv(pred, path, fps)
    elif fmt == "svg":
        export_svg(pred, path, truth, edges)
    else:
        raise InputError(f"unknown export format {fmt!r}")
