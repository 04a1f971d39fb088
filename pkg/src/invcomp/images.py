"""Lossless raster I/O and tensor layout helpers.

All arrays are float32 in [0, 1], RGB channel order, (H, W, C) or (H, W).
PNG files are written in 8- or 16-bit depth.  Trimaps are encoded as
grayscale 0/128/255 with tolerance bands on read: values up to 25 count as
background, 230 and above as foreground, everything else as unknown (scaled
accordingly for 16-bit files).
"""

from __future__ import annotations

from pathlib import Path
from typing import Tuple

import cv2
import numpy as np
import torch

from .compositing import TRIMAP_BACKGROUND, TRIMAP_FOREGROUND, TRIMAP_UNKNOWN
from .errors import FormatError, ValidationError


def _to_uint(arr: np.ndarray, bits: int) -> np.ndarray:
    if bits == 8:
        return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if bits == 16:
        return np.clip(np.rint(arr * 65535.0), 0, 65535).astype(np.uint16)
    raise ValidationError(f"unsupported bit depth {bits}")


def _from_uint(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    raise FormatError(f"unsupported raster dtype {arr.dtype}")


def save_rgb(path: str | Path, arr: np.ndarray, bits: int = 8) -> None:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"save_rgb expects (H, W, 3), got {arr.shape}")
    data = _to_uint(arr, bits)
    cv2.imwrite(str(path), cv2.cvtColor(data, cv2.COLOR_RGB2BGR))


def save_gray(path: str | Path, arr: np.ndarray, bits: int = 8) -> None:
    if arr.ndim != 2:
        raise ValidationError(f"save_gray expects (H, W), got {arr.shape}")
    cv2.imwrite(str(path), _to_uint(arr, bits))


def load_rgb(path: str | Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot decode image {path}")
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    if raw.shape[2] == 4:
        raw = raw[..., :3]
    return _from_uint(cv2.cvtColor(raw, cv2.COLOR_BGR2RGB))


def load_gray(path: str | Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot decode image {path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
    return _from_uint(raw)


def save_trimap(path: str | Path, trimap: np.ndarray) -> None:
    out = np.full(trimap.shape, 128, dtype=np.uint8)
    out[trimap == TRIMAP_BACKGROUND] = 0
    out[trimap == TRIMAP_FOREGROUND] = 255
    cv2.imwrite(str(path), out)


def _classify_trimap(raw: np.ndarray) -> np.ndarray:
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
    if raw.dtype == np.uint16:
        raw = (raw // 257).astype(np.uint8)
    trimap = np.full(raw.shape, TRIMAP_UNKNOWN, dtype=np.uint8)
    trimap[raw <= 25] = TRIMAP_BACKGROUND
    trimap[raw >= 230] = TRIMAP_FOREGROUND
    return trimap


def load_trimap(path: str | Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot decode trimap {path}")
    return _classify_trimap(raw)


def load_trimap_bytes(payload: bytes) -> np.ndarray:
    raw = cv2.imdecode(np.frombuffer(payload, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError("cannot decode trimap payload")
    return _classify_trimap(raw)


def chw(arr: np.ndarray) -> torch.Tensor:
    """(H, W) or (H, W, C) numpy -> (C, H, W) float32 tensor."""
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(torch.float32)


def hwc(t: torch.Tensor) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) tensor -> (H, W, C) or (H, W) float32 numpy."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValidationError(f"hwc expects a single image, got batch {t.shape[0]}")
        t = t[0]
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return arr[..., 0] if arr.shape[2] == 1 else arr


def downsample_preview(arr: np.ndarray, max_side: int = 1024) -> np.ndarray:
    h, w = arr.shape[:2]
    side = max(h, w)
    if side <= max_side:
        return arr
    s = max_side / side
    return cv2.resize(arr, (max(1, round(w * s)), max(1, round(h * s))), interpolation=cv2.INTER_AREA)


def encode_png(arr: np.ndarray, bits: int = 8) -> bytes:
    data = _to_uint(arr, bits)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", data)
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def decode_png(payload: bytes) -> np.ndarray:
    raw = cv2.imdecode(np.frombuffer(payload, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError("cannot decode raster payload")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[..., :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return _from_uint(raw)
