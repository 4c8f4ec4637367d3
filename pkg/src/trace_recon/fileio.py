"""Image files (8-bit PGM/PPM, raw F32) and the trajectory CSV."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

__all__ = [
    "ImageFormatError",
    "read_pnm",
    "write_pnm",
    "read_f32",
    "write_f32",
    "read_image",
    "write_image",
    "TRACE_CSV_HEADER",
    "write_trace_csv",
    "read_trace_csv",
]


class ImageFormatError(ValueError):
    pass


_PNM_HEADER = re.compile(rb"\A(P[56])(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) with maxval 255 -> [C,H,W] in [0,1]."""
    raw = Path(path).read_bytes()
    m = _PNM_HEADER.match(raw)
    if not m:
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    payload = raw[m.end():]
    expected = w * h * channels
    if len(payload) < expected:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8).reshape(h, w, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def write_pnm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ImageFormatError(f"PNM needs 1 or 3 channels, got {c}")
    q = np.clip(np.round(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + q.transpose(1, 2, 0).tobytes())


def write_f32(path, arr) -> None:
    """ASCII header ``F32 C H W`` then little-endian float32 payload."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ImageFormatError("F32 files hold [C,H,W] arrays")
    c, h, w = arr.shape
    Path(path).write_bytes(f"F32 {c} {h} {w}\n".encode() + arr.astype("<f4").tobytes())


def read_f32(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ImageFormatError(f"{path}: missing F32 header line")
    parts = raw[:nl].split()
    if len(parts) != 4 or parts[0] != b"F32":
        raise ImageFormatError(f"{path}: malformed F32 header {raw[:nl]!r}")
    try:
        c, h, w = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed F32 header {raw[:nl]!r}") from exc
    payload = raw[nl + 1:]
    if len(payload) != 4 * c * h * w:
        raise ImageFormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * c * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def read_image(path) -> np.ndarray:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(3)
    if magic == b"F32":
        return read_f32(path)
    return read_pnm(path)


def write_image(path, img) -> None:
    path = Path(path)
    if path.suffix == ".f32":
        write_f32(path, img)
    else:
        write_pnm(path, img)


TRACE_CSV_HEADER = ("t", "delta", "beta_delta", "loss_data", "loss_couple", "psnr", "ssim")


def _fmt(v: float) -> str:
    return "%.8e" % v


def write_trace_csv(path, record) -> None:
    """One row per trajectory step, t descending."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_CSV_HEADER)
        for s in record.steps:
            writer.writerow(
                [s.t, _fmt(s.delta), _fmt(s.beta_delta), _fmt(s.loss_data), _fmt(s.loss_couple), _fmt(s.psnr), _fmt(s.ssim)]
            )


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh, strict=True)
        header = next(reader)
        if tuple(header) != TRACE_CSV_HEADER:
            raise ValueError(f"unexpected trace.csv header {header}")
        rows = []
        for raw in reader:
            row = {"t": int(raw[0])}
            for key, value in zip(header[1:], raw[1:]):
                if value in ("inf", "nan", "-inf") and key not in ("psnr", "ssim"):
                    raise ValueError(f"non-finite literal {value!r} in column {key}")
                row[key] = float(value)
            rows.append(row)
    return rows
