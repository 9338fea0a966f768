# src/qmr_motion/stack.py
"""
Image-sequence containers and the QMRSTACK file format.

An ImageStack holds N frames of H×W intensities (float64 internally) plus the
per-frame inversion times. Files store 32-bit little-endian floats behind a
small JSON header:

    bytes 0-8   b"QMRSTACK1"
    byte  9     b"\\n"
    4 bytes     little-endian uint32 header length n
    n bytes     UTF-8 JSON header
    payload     n_frames*height*width[*channels] values, frame-major, row-major
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptionError, DegenerateInputError, FormatError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"QMRSTACK1"
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _readonly(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ImageStack:
    """N × H × W finite intensities with optional inversion times (ms) and pixel spacing (mm)."""

    frames: np.ndarray
    inversion_times: Optional[np.ndarray] = None
    spacing: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValidationError(f"frames must be N x H x W, got shape {frames.shape}")
        n, h, w = frames.shape
        if n < 2:
            raise ValidationError(f"a stack needs at least 2 frames, got {n}")
        if h < 8 or w < 8:
            raise ValidationError(f"frames must be at least 8x8, got {h}x{w}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("frames contain NaN or Inf")
        object.__setattr__(self, "frames", _readonly(frames, np.float64))

        if self.inversion_times is not None:
            times = np.asarray(self.inversion_times, dtype=np.float64).reshape(-1)
            if times.shape[0] != n:
                raise ValidationError(f"{times.shape[0]} inversion times for {n} frames")
            if not np.all(np.isfinite(times)) or np.any(times <= 0):
                raise ValidationError("inversion times must be finite and strictly positive")
            object.__setattr__(self, "inversion_times", _readonly(times, np.float64))

        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 2 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be two positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def with_frames(self, frames: np.ndarray) -> "ImageStack":
        """New stack with the same metadata and different intensities."""
        return ImageStack(frames, self.inversion_times, self.spacing)

    def matrix(self) -> np.ndarray:
        """Frames flattened to the N × (H·W) matrix used by the decomposition."""
        return self.frames.reshape(self.n_frames, -1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageStack):
            return NotImplemented
        if (self.inversion_times is None) != (other.inversion_times is None):
            return False
        same_times = self.inversion_times is None or np.array_equal(self.inversion_times, other.inversion_times)
        return (self.frames.shape == other.frames.shape and np.array_equal(self.frames, other.frames)
                and same_times and self.spacing == other.spacing)

    __hash__ = None


@dataclass(frozen=True)
class RoiMask:
    mask: np.ndarray
    label: str = "roi"

    def __post_init__(self):
        mask = np.asarray(self.mask).astype(bool)
        if mask.ndim != 2:
            raise ValidationError(f"mask must be H x W, got shape {mask.shape}")
        if not mask.any():
            raise ValidationError(f"mask '{self.label}' has no true pixels")
        object.__setattr__(self, "mask", _readonly(mask, bool))

    def check_matches(self, shape: Tuple[int, int]):
        if self.mask.shape != tuple(shape):
            raise ValidationError(f"mask '{self.label}' is {self.mask.shape}, expected {tuple(shape)}")

    @property
    def count(self) -> int:
        return int(self.mask.sum())


# --- Container I/O ---

def write_container(path: str, array: np.ndarray, dtype: str, header_extra: Optional[Dict[str, Any]] = None):
    """Writes a 3D (N,H,W) or 4D (N,H,W,C) array in the QMRSTACK container."""
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype '{dtype}'")
    array = np.asarray(array)
    if array.ndim not in (3, 4):
        raise ValidationError(f"container payload must be 3D or 4D, got {array.ndim}D")
    header: Dict[str, Any] = {
        "n_frames": int(array.shape[0]),
        "height": int(array.shape[1]),
        "width": int(array.shape[2]),
        "dtype": dtype,
    }
    if array.ndim == 4:
        header["channels"] = int(array.shape[3])
    if header_extra:
        header.update(header_extra)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(b"\n")
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    logger.debug("Wrote %s (%s, shape %s)", path, dtype, array.shape)


def read_container(path: str) -> Tuple[Dict[str, Any], np.ndarray]:
    """Reads a QMRSTACK container, returning (header, array as float64 or uint8)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"No such file: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 14 or data[:9] != MAGIC or data[9:10] != b"\n":
        raise FormatError(f"{path}: missing QMRSTACK1 magic")
    (header_length,) = struct.unpack("<I", data[10:14])
    header_end = 14 + header_length
    if header_end > len(data):
        raise CorruptionError(f"{path}: header length {header_length} exceeds file size")
    try:
        header = json.loads(data[14:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid UTF-8 JSON ({e})") from e
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    for key in ("n_frames", "height", "width", "dtype"):
        if key not in header:
            raise FormatError(f"{path}: header lacks required key '{key}'")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype '{header['dtype']}'")

    shape = [int(header["n_frames"]), int(header["height"]), int(header["width"])]
    if "channels" in header:
        shape.append(int(header["channels"]))
    if any(s <= 0 for s in shape):
        raise FormatError(f"{path}: non-positive dimension in header {shape}")
    dtype = _DTYPES[header["dtype"]]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = data[header_end:]
    if len(payload) != expected:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    array = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if dtype.kind == "f":
        array = array.astype(np.float64)
        if np.isnan(array).any():
            raise ValidationError(f"{path}: payload contains NaN")
    else:
        array = array.copy()
    return header, array


def save_stack(stack: ImageStack, path: str):
    extra: Dict[str, Any] = {"spacing_mm": list(stack.spacing)}
    if stack.inversion_times is not None:
        extra["inversion_times_ms"] = [float(t) for t in stack.inversion_times]
    write_container(path, stack.frames, "f32le", extra)


def load_stack(path: str) -> ImageStack:
    header, frames = read_container(path)
    if header["dtype"] != "f32le" or frames.ndim != 3:
        raise FormatError(f"{path}: not an image stack (dtype {header['dtype']}, {frames.ndim}D)")
    times = header.get("inversion_times_ms")
    spacing = tuple(header.get("spacing_mm", (1.0, 1.0)))
    return ImageStack(frames, None if times is None else np.asarray(times, dtype=np.float64), spacing)


def save_masks(masks: Sequence[RoiMask], path: str):
    if not masks:
        raise ValidationError("no masks to save")
    array = np.stack([m.mask for m in masks]).astype(np.uint8)
    write_container(path, array, "u8", {"labels": [m.label for m in masks]})


def load_masks(path: str) -> List[RoiMask]:
    header, array = read_container(path)
    if header["dtype"] != "u8" or array.ndim != 3:
        raise FormatError(f"{path}: not a mask container")
    if np.any(array > 1):
        raise ValidationError(f"{path}: mask values must be 0 or 1")
    labels = header.get("labels") or [f"roi{k}" for k in range(array.shape[0])]
    return [RoiMask(array[k].astype(bool), str(labels[k])) for k in range(array.shape[0])]


def load_mask(path: str, label: Optional[str] = None) -> RoiMask:
    """First mask in the file, or the one carrying `label`."""
    masks = load_masks(path)
    if label is None:
        return masks[0]
    for mask in masks:
        if mask.label == label:
            return mask
    raise ValidationError(f"{path}: no mask labelled '{label}'")


# --- Intensity handling ---

def normalize_stack(stack: ImageStack) -> Tuple[ImageStack, Tuple[float, float]]:
    """
    Maps the global minimum to 0 and the global maximum to 1 with one affine map
    shared by all frames. Returns the normalized stack and (scale, offset) such
    that normalized = (frames - offset) * scale.
    """
    low = float(stack.frames.min())
    high = float(stack.frames.max())
    if not high > low:
        raise DegenerateInputError("cannot normalize a constant stack")
    scale = 1.0 / (high - low)
    frames = np.clip((stack.frames - low) * scale, 0.0, 1.0)
    return stack.with_frames(frames), (scale, low)


def denormalize_stack(stack: ImageStack, params: Tuple[float, float]) -> ImageStack:
    scale, offset = params
    return stack.with_frames(stack.frames / scale + offset)


def crop_center(stack: ImageStack, height: int, width: int) -> ImageStack:
    """Center crop to height × width (the resample-then-crop preprocessing keeps only this step)."""
    h, w = stack.shape
    if height > h or width > w:
        raise ValidationError(f"cannot crop {h}x{w} to {height}x{width}")
    top = (h - height) // 2
    left = (w - width) // 2
    return stack.with_frames(stack.frames[:, top:top + height, left:left + width])
