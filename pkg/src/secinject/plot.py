"""Tiny self-drawn line chart written as binary PPM."""

from __future__ import annotations

import numpy as np

PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
]


def _line(canvas, x0, y0, x1, y1, color, dashed=False):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    step = 0
    h, w, _ = canvas.shape
    while True:
        if 0 <= x0 < w and 0 <= y0 < h and (not dashed or (step // 4) % 2 == 0):
            canvas[y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
        step += 1


def line_chart(series: dict, baseline: float | None = None, width: int = 480,
               height: int = 320, margin: int = 30) -> np.ndarray:
    """series: label -> list of (x, y) with y in [0, 1]. Returns an RGB array."""
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    xs = [x for pts in series.values() for x, _ in pts] or [0, 1]
    xmin, xmax = min(xs), max(xs)
    if xmax == xmin:
        xmax = xmin + 1

    def to_px(x, y):
        px = margin + round((x - xmin) / (xmax - xmin) * (width - 2 * margin))
        py = height - margin - round(min(max(y, 0.0), 1.0) * (height - 2 * margin))
        return int(px), int(py)

    black = (0, 0, 0)
    _line(canvas, margin, height - margin, width - margin, height - margin, black)
    _line(canvas, margin, margin, margin, height - margin, black)
    for tick in (0.25, 0.5, 0.75, 1.0):
        _, ty = to_px(xmin, tick)
        _line(canvas, margin - 4, ty, margin, ty, black)
    if baseline is not None:
        _, by = to_px(xmin, baseline)
        _line(canvas, margin, by, width - margin, by, (90, 90, 90), dashed=True)
    for i, (_, pts) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        pix = [to_px(x, y) for x, y in pts]
        for (a, b), (c, d) in zip(pix, pix[1:]):
            _line(canvas, a, b, c, d, color)
        for a, b in pix:
            canvas[max(b - 2, 0):b + 3, max(a - 2, 0):a + 3] = color
    return canvas


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
