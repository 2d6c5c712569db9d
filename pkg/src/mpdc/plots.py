"""Self-contained SVG scatter plots of checkpoint ensembles.

One figure per coordinate pair; checkpoint times are colored red, orange,
green, blue, purple in order, and obstacle outlines are overlaid from the
zero-level set of the barrier.
"""

from __future__ import annotations

import os

import numpy as np

from .rewards import Cylinder, DoubleWedge

PALETTE = ("red", "orange", "green", "blue", "purple")
SIZE = 480
MARGIN = 40


def _scale(vals, lo, hi):
    return MARGIN + (vals - lo) / (hi - lo) * (SIZE - 2 * MARGIN)


def scatter_svg(frames: dict, pair: tuple[int, int],
                obstacle=None, title: str = "") -> str:
    """Build the SVG text for one coordinate pair over checkpoint frames."""
    a, b = pair
    xs = np.concatenate([pts[:, a] for pts in frames.values()])
    ys = np.concatenate([pts[:, b] for pts in frames.values()])
    pad = 0.5
    lo_x, hi_x = xs.min() - pad, xs.max() + pad
    lo_y, hi_y = ys.min() - pad, ys.max() + pad
    if obstacle is not None:
        lo_x, hi_x = min(lo_x, -1.0), max(hi_x, 1.0)
        lo_y, hi_y = min(lo_y, -1.0), max(hi_y, 1.0)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" '
             f'height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
             f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>',
             f'<text x="{SIZE // 2}" y="20" text-anchor="middle" '
             f'font-size="14">{title} (x_{a}, x_{b})</text>']

    if obstacle is not None and pair == (0, 1):
        parts.append(_obstacle_outline(obstacle, lo_x, hi_x, lo_y, hi_y))

    for color, (t, pts) in zip(PALETTE, sorted(frames.items())):
        px = _scale(pts[:, a], lo_x, hi_x)
        py = SIZE - _scale(pts[:, b], lo_y, hi_y)
        circles = "".join(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="{color}" '
            f'fill-opacity="0.5"/>' for x, y in zip(px, py))
        parts.append(f'<g data-time="{t}">{circles}</g>')

    legend_y = 36
    for color, t in zip(PALETTE, sorted(frames)):
        parts.append(f'<circle cx="{SIZE - 90}" cy="{legend_y}" r="4" '
                     f'fill="{color}"/><text x="{SIZE - 80}" y="{legend_y + 4}" '
                     f'font-size="11">t={t:g}</text>')
        legend_y += 16
    parts.append("</svg>")
    return "\n".join(parts)


def _obstacle_outline(shape, lo_x, hi_x, lo_y, hi_y) -> str:
    if isinstance(shape, Cylinder):
        cx = _scale(np.array([0.0]), lo_x, hi_x)[0]
        cy = SIZE - _scale(np.array([0.0]), lo_y, hi_y)[0]
        rx = shape.radius / (hi_x - lo_x) * (SIZE - 2 * MARGIN)
        ry = shape.radius / (hi_y - lo_y) * (SIZE - 2 * MARGIN)
        return (f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{rx:.2f}" '
                f'ry="{ry:.2f}" fill="none" stroke="black" stroke-width="1.5"/>')
    if isinstance(shape, DoubleWedge):
        # zero-level boundary of the clamped barrier:
        # slope * x1^2 - x2^2 = gap, two branches in x1
        ys = np.linspace(lo_y, hi_y, 120)
        x_edge = np.sqrt((shape.gap + ys ** 2) / shape.slope)
        lines = []
        for sign in (1.0, -1.0):
            pts = zip(_scale(sign * x_edge, lo_x, hi_x),
                      SIZE - _scale(ys, lo_y, hi_y))
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            lines.append(f'<polyline points="{path}" fill="none" '
                         f'stroke="black" stroke-width="1.5"/>')
        return "".join(lines)
    return ""


def export_plots(frames: dict, dim: int, out_dir: str,
                 pairs: list[tuple[int, int]] | None = None,
                 obstacle=None, title: str = "") -> list[str]:
    """Write one SVG per coordinate pair; defaults to (0,1), (2,3), ...

    Checkpoint frames must be complete; an explicitly empty pair list writes
    nothing.
    """
    if not frames:
        raise ValueError("no checkpoint frames to plot")
    if pairs is None:
        pairs = [(a, a + 1) for a in range(0, dim - 1, 2)]
    written = []
    os.makedirs(out_dir, exist_ok=True)
    for pair in pairs:
        a, b = pair
        if not (0 <= a < dim and 0 <= b < dim):
            raise ValueError(f"coordinate pair {pair} out of range for d={dim}")
        svg = scatter_svg(frames, pair, obstacle=obstacle, title=title)
        path = os.path.join(out_dir, f"scatter_x{a}_x{b}.svg")
        with open(path, "w") as fh:
            fh.write(svg)
        written.append(path)
    return written
