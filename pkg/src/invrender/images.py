"""Image files: linear EXR (canonical), Radiance HDR, and tone-mapped PNG previews."""

from __future__ import annotations

import os

import cv2
import numpy as np
import OpenEXR

GAMMA = 2.2


def write_exr(path, image) -> None:
    """Write a float32 EXR: (H, W, 3) as an RGB layer, (H, W) as a single Y channel."""
    arr = np.ascontiguousarray(image, dtype=np.float32)
    if arr.ndim == 2:
        channels = {"Y": arr}
    elif arr.ndim == 3 and arr.shape[2] == 3:
        channels = {"RGB": arr}
    else:
        raise ValueError(f"cannot store an array of shape {arr.shape} as EXR")
    header = {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}
    OpenEXR.File(header, channels).write(str(path))


def read_exr(path) -> np.ndarray:
    """Float64 pixels; RGB files give (H, W, 3), luminance-only files (H, W)."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    ch = OpenEXR.File(str(path)).channels()
    if "RGB" in ch:
        return ch["RGB"].pixels.astype(np.float64)
    if "RGBA" in ch:
        return ch["RGBA"].pixels[..., :3].astype(np.float64)
    if "Y" in ch:
        return ch["Y"].pixels.astype(np.float64)
    if all(k in ch for k in "RGB"):
        return np.stack([ch[k].pixels for k in "RGB"], -1).astype(np.float64)
    raise ValueError(f"{path}: no RGB or Y channels (found {sorted(ch)})")


def write_hdr(path, image) -> None:
    arr = np.asarray(image, dtype=np.float32)
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr[..., ::-1])):
        raise OSError(f"could not write {path}")


def read_hdr(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH | cv2.IMREAD_COLOR)
    if arr is None:
        raise FileNotFoundError(path)
    return arr[..., ::-1].astype(np.float64)


def tonemap(image, exposure: float = 1.0) -> np.ndarray:
    """Linear radiance to 8-bit display values: scale, clip, then gamma 2.2."""
    v = np.clip(np.asarray(image, dtype=np.float64) * exposure, 0.0, 1.0) ** (1.0 / GAMMA)
    return np.round(v * 255.0).astype(np.uint8)


def write_png(path, image, exposure: float = 1.0) -> None:
    """Tone-mapped preview of a linear image (grayscale for 2-D arrays)."""
    px = tonemap(image, exposure)
    if px.ndim == 3:
        px = px[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(px)):
        raise OSError(f"could not write {path}")


def read_png(path) -> np.ndarray:
    """Decode an sRGB-ish preview back to approximate linear values."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise FileNotFoundError(path)
    if arr.ndim == 3:
        arr = arr[..., 2::-1]
    return (arr.astype(np.float64) / 255.0) ** GAMMA


def read_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".exr":
        return read_exr(path)
    if ext == ".hdr":
        return read_hdr(path)
    if ext == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format {ext!r} for {path}")


def write_image(path, image, exposure: float = 1.0) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".exr":
        write_exr(path, image)
    elif ext == ".hdr":
        write_hdr(path, image)
    elif ext == ".png":
        write_png(path, image, exposure)
    else:
        raise ValueError(f"unsupported image format {ext!r} for {path}")
