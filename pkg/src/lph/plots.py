"""Self-contained deterministic chart rendering.

Charts are rasterized directly into PPM images (no plotting library) so
re-rendering from the same CSV is byte-identical. Each output embeds the
source CSV path and its sha256 in the PPM comment as provenance.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .storage import read_csv, save_ppm

WIDTH, HEIGHT = 480, 320
MARGIN = 48
PALETTE = [(208, 64, 48), (48, 112, 200), (56, 160, 88), (176, 128, 32),
           (128, 64, 176)]

# 5x7 bitmap digits/letters actually needed for axis labels
_GLYPHS = {
    "0": "01110100011001110101110011000101110",
    "1": "00100011000010000100001000010001110",
    "2": "01110100010000100110010001000011111",
    "3": "01110100010000101110000011000101110",
    "4": "00010001100101011111000100001000010",
    "5": "11111100001111000001000011000101110",
    "6": "01110100001111010001100011000101110",
    "7": "11111000010001000100010001000010000",
    "8": "01110100010001101110100011000101110",
    "9": "01110100011000101111000011000101110",
    ".": "00000000000000000000000000011000110",
    "-": "00000000000000001110000000000000000",
    " ": "00000000000000000000000000000000000",
}


def _draw_text(canvas, x, y, text, color=(30, 30, 30)):
    for ch in text:
        bits = _GLYPHS.get(ch)
        if bits is None:
            x += 6
            continue
        for row in range(7):
            for col in range(5):
                if bits[row * 5 + col] == "1":
                    py, px = y + row, x + col
                    if 0 <= py < canvas.shape[0] and 0 <= px < canvas.shape[1]:
                        canvas[py, px] = color
        x += 6


def _line(canvas, x0, y0, x1, y1, color):
    n = max(abs(x1 - x0), abs(y1 - y0), 1)
    for i in range(n + 1):
        x = int(round(x0 + (x1 - x0) * i / n))
        y = int(round(y0 + (y1 - y0) * i / n))
        if 0 <= y < canvas.shape[0] and 0 <= x < canvas.shape[1]:
            canvas[y, x] = color


def _marker(canvas, x, y, color):
    canvas[max(0, y - 2):y + 3, max(0, x - 2):x + 3] = color


def _frame(canvas):
    canvas[:] = 255
    _line(canvas, MARGIN, HEIGHT - MARGIN, WIDTH - 12, HEIGHT - MARGIN, (0, 0, 0))
    _line(canvas, MARGIN, 12, MARGIN, HEIGHT - MARGIN, (0, 0, 0))


def _scale(values, lo_pix, hi_pix):
    vmin, vmax = float(min(values)), float(max(values))
    if vmax == vmin:
        vmax = vmin + 1.0
    def to_pix(v):
        return int(round(lo_pix + (hi_pix - lo_pix) * (v - vmin) / (vmax - vmin)))
    return to_pix, vmin, vmax


def _provenance(csv_path):
    with open(csv_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    return f"source {os.path.basename(csv_path)} sha256 {digest}"


def line_chart(csv_path, out_path, x_col, y_cols, group_col=None):
    """One polyline per y column (or per group value for a single y)."""
    header, rows = read_csv(csv_path)
    if not rows:
        return None
    idx = {name: header.index(name) for name in header}
    series = {}
    if group_col is not None:
        y = y_cols[0]
        for row in rows:
            series.setdefault(str(row[idx[group_col]]), []).append(
                (float(row[idx[x_col]]), float(row[idx[y]])))
    else:
        for y in y_cols:
            series[y] = [(float(r[idx[x_col]]), float(r[idx[y]])) for r in rows]
    series = {k: sorted(v) for k, v in series.items()}
    canvas = np.zeros((HEIGHT, WIDTH, 3), dtype=np.uint8)
    _frame(canvas)
    all_x = [p[0] for pts in series.values() for p in pts]
    all_y = [p[1] for pts in series.values() for p in pts]
    sx, xmin, xmax = _scale(all_x, MARGIN, WIDTH - 20)
    sy, ymin, ymax = _scale(all_y, HEIGHT - MARGIN, 16)
    for ci, (name, pts) in enumerate(sorted(series.items())):
        color = PALETTE[ci % len(PALETTE)]
        prev = None
        for xv, yv in pts:
            px, py = sx(xv), sy(yv)
            if prev is not None:
                _line(canvas, prev[0], prev[1], px, py, color)
            _marker(canvas, px, py, color)
            prev = (px, py)
        _line(canvas, WIDTH - 120, 20 + 12 * ci, WIDTH - 100, 20 + 12 * ci, color)
    _draw_text(canvas, MARGIN - 4, HEIGHT - MARGIN + 6, f"{xmin:g}")
    _draw_text(canvas, WIDTH - 60, HEIGHT - MARGIN + 6, f"{xmax:g}")
    _draw_text(canvas, 2, HEIGHT - MARGIN - 8, f"{ymin:.3g}")
    _draw_text(canvas, 2, 12, f"{ymax:.3g}")
    save_ppm(out_path, canvas.astype(np.float32) / 255.0,
             comment=_provenance(csv_path))
    return out_path


def bar_chart(csv_path, out_path, label_col, y_col):
    header, rows = read_csv(csv_path)
    if not rows:
        return None
    idx = {name: header.index(name) for name in header}
    labels = [str(r[idx[label_col]]) for r in rows]
    values = [float(r[idx[y_col]]) for r in rows]
    canvas = np.zeros((HEIGHT, WIDTH, 3), dtype=np.uint8)
    _frame(canvas)
    sy, ymin, ymax = _scale([0.0] + values, HEIGHT - MARGIN, 16)
    span = (WIDTH - 20 - MARGIN) // max(1, len(values))
    for i, v in enumerate(values):
        x0 = MARGIN + 4 + i * span
        x1 = x0 + max(4, span - 8)
        top = sy(v)
        color = PALETTE[i % len(PALETTE)]
        canvas[min(top, HEIGHT - MARGIN):HEIGHT - MARGIN, x0:x1] = color
    _draw_text(canvas, 2, 12, f"{ymax:.3g}")
    _draw_text(canvas, 2, HEIGHT - MARGIN - 8, f"{ymin:.3g}")
    save_ppm(out_path, canvas.astype(np.float32) / 255.0,
             comment=_provenance(csv_path))
    return out_path


def plot_ablation_summary(summary_csv, out_dir):
    made = []
    stem = os.path.splitext(os.path.basename(summary_csv))[0]
    for metric in ("iou_mean", "spectrum_mean"):
        out = os.path.join(out_dir, f"{stem}_{metric}_vs_ts.ppm")
        if line_chart(summary_csv, out, "t_s", [metric], group_col="arm"):
            made.append(out)
    return made


def plot_cost(cost_csv, out_dir):
    made = []
    stem = os.path.splitext(os.path.basename(cost_csv))[0]
    out = os.path.join(out_dir, f"{stem}_macs.ppm")
    if bar_chart(cost_csv, out, "t_s", "macs_total"):
        made.append(out)
    return made
