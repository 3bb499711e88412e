"""File-emitting visualization: portable pixmaps with segmentation
boundaries and sparse flow arrows, plus volume-curve CSVs."""

from __future__ import annotations

import numpy as np

from . import metrics

# background has no overlay; LV red, Myo green, RV blue; arrows yellow
CLASS_COLORS = {1: (235, 60, 60), 2: (60, 220, 90), 3: (80, 120, 245)}
ARROW_COLOR = (250, 220, 40)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("expected HxWx3 uint8")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError("not a P6 pixmap")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        f.readline()
        return np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)


def draw_line(rgb: np.ndarray, x0: float, y0: float, x1: float, y1: float, color) -> None:
    """Bresenham line, endpoints clipped to the image."""
    h, w = rgb.shape[:2]
    x0, y0, x1, y1 = int(round(x0)), int(round(y0)), int(round(x1)), int(round(y1))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            rgb[y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def overlay_frame(frame: np.ndarray, labels: np.ndarray | None = None,
                  flow: np.ndarray | None = None, arrow_stride: int = 4,
                  min_arrow_px: float = 0.2) -> np.ndarray:
    """Grayscale frame with class boundaries and a sparse arrow field.

    Arrows start every `arrow_stride` pixels and trace the displacement;
    displacements below `min_arrow_px` are omitted.
    """
    g = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat((g * 255.0).astype(np.uint8)[:, :, None], 3, axis=2).copy()
    if labels is not None:
        for cls, color in CLASS_COLORS.items():
            for x, y in metrics.extract_contour(labels == cls):
                rgb[int(y), int(x)] = color
    if flow is not None:
        h, w = g.shape
        for y in range(arrow_stride // 2, h, arrow_stride):
            for x in range(arrow_stride // 2, w, arrow_stride):
                dx, dy = float(flow[0, y, x]), float(flow[1, y, x])
                if dx * dx + dy * dy >= min_arrow_px * min_arrow_px:
                    draw_line(rgb, x, y, x + dx, y + dy, ARROW_COLOR)
    return rgb


def write_volume_csv(path, curve: list[float]) -> None:
    with open(path, "w") as f:
        f.write("frame,area\n")
        for i, v in enumerate(curve):
            f.write(f"{i},{v!r}\n")
