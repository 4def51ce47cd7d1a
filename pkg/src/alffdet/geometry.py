"""Boxes, grid geometry and Gaussian heatmap target rendering.

The heatmap target puts a truncated Gaussian bump at every object center:
response exp(-d^2 / 2 sigma^2) inside a disc of radius min(w, h) in grid
cells, zero outside.  Per-object responses are summed and clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel coordinates, corners (x1, y1, x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise GeometryError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def cx(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class GridSpec:
    """Image size and the pixels-per-cell stride of the heatmap grid."""

    image_w: int
    image_h: int
    stride: int = 8

    def __post_init__(self):
        if self.image_w % self.stride or self.image_h % self.stride:
            raise GeometryError(
                f"image size {self.image_w}x{self.image_h} not divisible by "
                f"stride {self.stride}"
            )

    @property
    def grid_w(self) -> int:
        return self.image_w // self.stride

    @property
    def grid_h(self) -> int:
        return self.image_h // self.stride


@dataclass
class HeatmapTarget:
    """Single-channel target grid plus the per-object sigmas used to build it."""

    grid: np.ndarray  # (1, grid_h, grid_w), values in [0, 1]
    sigmas: list[float]


def center_of(b: Box) -> tuple[float, float]:
    """Arithmetic midpoint of the box corners."""
    return (b.cx, b.cy)


def heatmap_sigma(b: Box, spec: GridSpec) -> float:
    """Spread of the Gaussian bump, in grid cells, tied to object size.

    One third of the min box side in cells, floored at one cell so tiny
    objects keep a usable footprint.
    """
    return max(min(b.w, b.h) / spec.stride, 1.0) / 3.0


def clip_box(b: Box, spec: GridSpec) -> Box:
    """Clip a box to the image bounds; raises if nothing remains."""
    return Box(
        max(b.x1, 0.0),
        max(b.y1, 0.0),
        min(b.x2, float(spec.image_w)),
        min(b.y2, float(spec.image_h)),
    )


def _check_inside(b: Box, spec: GridSpec) -> None:
    if b.x1 < 0 or b.y1 < 0 or b.x2 > spec.image_w or b.y2 > spec.image_h:
        raise GeometryError(
            f"box ({b.x1}, {b.y1}, {b.x2}, {b.y2}) outside "
            f"{spec.image_w}x{spec.image_h} image"
        )


def render_heatmap(boxes: list[Box], spec: GridSpec, dtype=np.float64) -> HeatmapTarget:
    """Render the clamped sum of truncated Gaussian bumps for all boxes.

    Cell (ix, iy) is evaluated at cell-center coordinates (ix + 0.5, iy + 0.5)
    in grid units; centers are never rounded.  The per-object truncation
    radius is min(w, h) / stride cells.
    """
    gh, gw = spec.grid_h, spec.grid_w
    grid = np.zeros((1, gh, gw), dtype=dtype)
    xs = np.arange(gw, dtype=dtype) + 0.5
    ys = np.arange(gh, dtype=dtype) + 0.5
    sigmas = []
    for b in boxes:
        _check_inside(b, spec)
        sigma = heatmap_sigma(b, spec)
        sigmas.append(sigma)
        ccx = b.cx / spec.stride
        ccy = b.cy / spec.stride
        radius = min(b.w, b.h) / spec.stride
        d2 = (xs[None, :] - ccx) ** 2 + (ys[:, None] - ccy) ** 2
        bump = np.exp(-d2 / (2.0 * sigma * sigma))
        bump[d2 > radius * radius] = 0.0
        grid[0] += bump
    np.clip(grid, 0.0, 1.0, out=grid)
    return HeatmapTarget(grid=grid, sigmas=sigmas)
