# src/qmr_motion/export.py
"""Report artifacts: 8-bit grayscale map images (PNG or PGM) and CSV tables."""

import csv
import logging
import os
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ValidationError

logger = logging.getLogger(__name__)

IMAGE_FORMATS = ("png", "pgm")


def window_to_uint8(values: np.ndarray, mask: Optional[np.ndarray] = None,
                    window: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Min-max windows a 2D map to 0..255; pixels outside `mask` are black."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError(f"map must be 2D, got shape {values.shape}")
    selected = np.isfinite(values) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(values))
    if window is None:
        if not selected.any():
            return np.zeros(values.shape, dtype=np.uint8)
        window = (float(values[selected].min()), float(values[selected].max()))
    low, high = window
    span = high - low if high > low else 1.0
    scaled = np.clip((values - low) / span, 0.0, 1.0) * 255.0
    scaled[~selected] = 0.0
    return np.round(scaled).astype(np.uint8)


def save_map_image(values: np.ndarray, path: str, mask: Optional[np.ndarray] = None,
                   window: Optional[Tuple[float, float]] = None):
    """Writes a windowed map; the format follows the file extension (.png or .pgm)."""
    extension = os.path.splitext(path)[1].lower().lstrip(".")
    if extension not in IMAGE_FORMATS:
        raise ValidationError(f"unsupported image format '{extension}', use one of {IMAGE_FORMATS}")
    pixels = window_to_uint8(values, mask, window)
    if extension == "png":
        Image.fromarray(pixels).save(path, format="PNG")
    else:
        height, width = pixels.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    logger.debug("Wrote map image %s", path)


def save_map_images(maps: Dict[str, np.ndarray], directory: str, mask: Optional[np.ndarray] = None,
                    image_format: str = "png") -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, values in maps.items():
        path = os.path.join(directory, f"{name}.{image_format}")
        save_map_image(values, path, mask)
        paths.append(path)
    return paths


def flatten_report(report: Dict, prefix: str = "") -> Dict[str, object]:
    """Nested dicts become dotted keys; lists of scalars are kept as ';'-joined strings."""
    flat: Dict[str, object] = {}
    for key in sorted(report):
        value = report[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_report(value, name + "."))
        elif isinstance(value, (list, tuple)):
            flat[name] = ";".join(str(v) for v in value)
        else:
            flat[name] = value
    return flat


def write_csv(rows: Iterable[Dict[str, object]], path_or_stream):
    rows = list(rows)
    fieldnames: List[str] = []
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    stream = open(path_or_stream, "w", newline="", encoding="utf-8") if isinstance(path_or_stream, str) else path_or_stream
    try:
        writer = csv.DictWriter(stream, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if isinstance(path_or_stream, str):
            stream.close()


def write_pixel_csv(path: str, maps: Dict[str, np.ndarray], mask: np.ndarray):
    """One row per masked pixel with every map's value, for external agreement plots."""
    rows_idx, cols_idx = np.nonzero(mask)
    rows = []
    for r, c in zip(rows_idx, cols_idx):
        row = {"row": int(r), "col": int(c)}
        row.update({name: float(values[r, c]) for name, values in maps.items()})
        rows.append(row)
    write_csv(rows, path)
