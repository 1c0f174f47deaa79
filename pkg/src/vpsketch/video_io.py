"""Video file I/O: raw planar bytes, PGM sequences, and mono y4m.

All three formats round-trip exactly at any supported bit depth. Raw
volumes carry a JSON sidecar; PGM encodes the depth in maxval; y4m is
byte-per-sample with an XBITDEPTH extension tag for depths below 8.
"""
from __future__ import annotations

import json
import os
import re

import numpy as np

from .video import VideoVolume


class VideoFormatError(ValueError):
    """Raised when a video file cannot be parsed or is inconsistent."""


def _sidecar_path(path):
    return str(path) + ".json"


def save_raw(volume, path):
    """Write planar bytes (row-major frames, consecutive) plus sidecar."""
    with open(path, "wb") as fh:
        fh.write(volume.data.tobytes())
    meta = {
        "width": volume.width,
        "height": volume.height,
        "frames": volume.frames,
        "bit_depth": volume.bit_depth,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh)
        fh.write("\n")


def load_raw(path):
    """Read planar bytes described by the JSON sidecar next to them."""
    sidecar = _sidecar_path(path)
    if not os.path.exists(sidecar):
        raise VideoFormatError(f"missing sidecar {sidecar}")
    with open(sidecar) as fh:
        meta = json.load(fh)
    try:
        w, h, t = int(meta["width"]), int(meta["height"]), int(meta["frames"])
        depth = int(meta["bit_depth"])
    except KeyError as exc:
        raise VideoFormatError(f"sidecar {sidecar} missing field {exc}") from exc
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != w * h * t:
        raise VideoFormatError(
            f"{path}: expected {w * h * t} bytes ({w}x{h}x{t}), found {raw.size}"
        )
    return VideoVolume(data=raw.reshape(t, h, w), bit_depth=depth)


# -- PGM ---------------------------------------------------------------

def _write_pgm(frame, max_value, path):
    header = f"P5\n{frame.shape[1]} {frame.shape[0]}\n{max_value}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(frame.tobytes())


def _read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise VideoFormatError(f"{path}: not a binary PGM (P5) file")
    # Header tokens may be separated by whitespace and '#' comment lines.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise VideoFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(tok) for tok in tokens)
    except ValueError as exc:
        raise VideoFormatError(f"{path}: bad PGM header tokens {tokens}") from exc
    if maxval < 1 or maxval > 255:
        raise VideoFormatError(f"{path}: unsupported PGM maxval {maxval}")
    payload = data[pos : pos + width * height]
    if len(payload) != width * height:
        raise VideoFormatError(f"{path}: PGM payload truncated")
    frame = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return frame, maxval


def _depth_for_maxval(maxval, path):
    depth = int(maxval).bit_length()
    if (1 << depth) - 1 != maxval:
        raise VideoFormatError(f"{path}: PGM maxval {maxval} is not 2^k - 1")
    return depth


def save_pgm_sequence(volume, path):
    """Write one P5 file per frame under a directory.

    A path ending in .pgm is accepted for single-frame volumes.
    """
    if str(path).endswith(".pgm"):
        if volume.frames != 1:
            raise VideoFormatError(f"{path}: single .pgm target needs a 1-frame volume")
        _write_pgm(volume.data[0], volume.max_value, path)
        return
    os.makedirs(path, exist_ok=True)
    for t in range(volume.frames):
        _write_pgm(volume.data[t], volume.max_value, os.path.join(path, f"frame_{t:04d}.pgm"))


def load_pgm_sequence(path):
    """Read a .pgm file (one frame) or a directory of zero-padded frames."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".pgm"))
        if not names:
            raise VideoFormatError(f"{path}: no .pgm files found")
        files = [os.path.join(path, n) for n in names]
    else:
        if not os.path.exists(path):
            raise VideoFormatError(f"{path}: no such file")
        files = [path]
    frames = []
    maxvals = set()
    for f in files:
        frame, maxval = _read_pgm(f)
        frames.append(frame)
        maxvals.add(maxval)
    if len(maxvals) != 1:
        raise VideoFormatError(f"{path}: frames disagree on maxval {sorted(maxvals)}")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise VideoFormatError(f"{path}: frames disagree on size {sorted(shapes)}")
    depth = _depth_for_maxval(maxvals.pop(), path)
    return VideoVolume(data=np.stack(frames), bit_depth=depth)


# -- y4m ---------------------------------------------------------------

_Y4M_MAGIC = b"YUV4MPEG2"


def save_y4m(volume, path, fps=(25, 1)):
    """Write a mono y4m stream, one luma plane per frame."""
    header = (
        f"YUV4MPEG2 W{volume.width} H{volume.height} "
        f"F{fps[0]}:{fps[1]} Ip A1:1 Cmono"
    )
    if volume.bit_depth != 8:
        header += f" XBITDEPTH={volume.bit_depth}"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        for t in range(volume.frames):
            fh.write(b"FRAME\n")
            fh.write(volume.data[t].tobytes())


def load_y4m(path):
    """Read a mono y4m stream; chroma-bearing colorspaces are rejected."""
    with open(path, "rb") as fh:
        data = fh.read()
    newline = data.find(b"\n")
    if newline < 0 or not data.startswith(_Y4M_MAGIC):
        raise VideoFormatError(f"{path}: not a y4m stream")
    header = data[:newline].decode("ascii", errors="replace")
    width = height = None
    depth = 8
    colorspace = "420"  # y4m default when no C tag is present
    for tok in header.split()[1:]:
        kind, val = tok[0], tok[1:]
        if kind == "W":
            width = int(val)
        elif kind == "H":
            height = int(val)
        elif kind == "C":
            colorspace = val
        elif kind == "X" and val.startswith("BITDEPTH="):
            depth = int(val.split("=", 1)[1])
    if width is None or height is None:
        raise VideoFormatError(f"{path}: y4m header missing W or H")
    if not re.fullmatch(r"mono\w*", colorspace):
        raise VideoFormatError(
            f"{path}: colorspace C{colorspace} carries chroma; only Cmono is supported"
        )
    frame_bytes = width * height
    frames = []
    pos = newline + 1
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0 or not data[pos:nl].startswith(b"FRAME"):
            raise VideoFormatError(f"{path}: malformed FRAME marker at byte {pos}")
        start = nl + 1
        payload = data[start : start + frame_bytes]
        if len(payload) != frame_bytes:
            raise VideoFormatError(f"{path}: truncated frame payload at byte {start}")
        frames.append(np.frombuffer(payload, dtype=np.uint8).reshape(height, width))
        pos = start + frame_bytes
    if not frames:
        raise VideoFormatError(f"{path}: y4m stream contains no frames")
    return VideoVolume(data=np.stack(frames), bit_depth=depth)


# -- dispatch ----------------------------------------------------------

def load_video(path):
    """Load by extension: .y4m, .pgm or PGM directory, else raw+sidecar."""
    p = str(path)
    if p.endswith(".y4m"):
        return load_y4m(p)
    if p.endswith(".pgm") or os.path.isdir(p):
        return load_pgm_sequence(p)
    return load_raw(p)


def save_video(volume, path):
    """Save by extension, mirroring load_video."""
    p = str(path)
    if p.endswith(".y4m"):
        save_y4m(volume, p)
    elif p.endswith(".pgm") or (not os.path.splitext(p)[1] and not p.endswith(".raw")):
        save_pgm_sequence(volume, p)
    else:
        save_raw(volume, p)
