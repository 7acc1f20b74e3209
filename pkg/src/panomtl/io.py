"""File formats: PFM (float maps), 8-bit PNG, ASCII PLY point clouds."""
import os

import numpy as np
from PIL import Image


def write_pfm(path, data):
    """Write a (H, W) or (H, W, 3) float map as little-endian PFM.

    Rows are stored bottom-to-top as the format requires; channel order is
    the array's last axis (x, y, z for normals).
    """
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    H, W = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{W} {H}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        W, H = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        C = 3 if kind == b"PF" else 1
        raw = np.frombuffer(f.read(), dtype=dtype)
    if raw.size != H * W * C:
        raise ValueError(f"{path}: expected {H * W * C} floats, found {raw.size}")
    arr = raw.reshape((H, W, C) if C == 3 else (H, W))[::-1]
    return np.ascontiguousarray(arr.astype(np.float32))


def write_png(path, data):
    """Save a uint8 (H, W) or (H, W, 3) array."""
    arr = np.asarray(data)
    if arr.dtype != np.uint8:
        raise TypeError(f"PNG data must be uint8, got {arr.dtype}")
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        return np.array(im)


def to_uint8(x):
    """Map [0, 1] floats to 8 bits with round-half-up."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_normals(n):
    """Colour-code unit normals as (n + 1) / 2 per channel."""
    return to_uint8((np.asarray(n, dtype=np.float64) + 1.0) * 0.5)


def write_ply(path, points, colors=None):
    """ASCII PLY with float vertices and optional uint8 RGB.

    Coordinates are printed with 17 significant digits so float64 values
    survive the round trip exactly.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if len(colors) != len(pts):
            raise ValueError("one colour per point required")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for i, p in enumerate(pts):
            row = "%.17g %.17g %.17g" % tuple(p)
            if colors is not None:
                row += " %d %d %d" % tuple(colors[i])
            f.write(row + "\n")


def read_ply(path):
    """Return ``(points, colors or None)`` from an ASCII PLY written by ``write_ply``."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n, props = 0, []
        for line in f:
            parts = line.split()
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if parts[0] == "element" and parts[1] == "vertex":
                n = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        body = np.loadtxt(f, dtype=np.float64, ndmin=2) if n else np.zeros((0, len(props)))
    if body.shape[0] != n:
        raise ValueError(f"{path}: header says {n} vertices, found {body.shape[0]}")
    points = body[:, :3]
    colors = body[:, 3:6].astype(np.uint8) if len(props) >= 6 else None
    return points, colors


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
