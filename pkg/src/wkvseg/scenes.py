"""Synthetic instance scenes: anti-aliased shapes over a textured background.

Masks are rasterised exactly at pixel centres; the image is rendered with
4x4 supersampling. Later shapes occlude earlier ones and each instance mask
holds only its visible pixels.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

SUPERSAMPLE = 4


@dataclass
class Shape:
    kind: str  # "ellipse" or "polygon"
    color: tuple[float, float, float]
    center: tuple[float, float] = (0.0, 0.0)
    radii: tuple[float, float] = (1.0, 1.0)
    angle: float = 0.0
    vertices: np.ndarray | None = None  # (n, 2) counter-clockwise, (x, y) pixels

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        if self.kind == "ellipse":
            cx, cy = self.center
            c, s = np.cos(self.angle), np.sin(self.angle)
            dx, dy = xs - cx, ys - cy
            u = (c * dx + s * dy) / self.radii[0]
            v = (-s * dx + c * dy) / self.radii[1]
            return u * u + v * v <= 1.0
        inside = np.ones(np.broadcast(xs, ys).shape, dtype=bool)
        verts = self.vertices
        for a, b in zip(verts, np.roll(verts, -1, axis=0)):
            cross = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
            inside &= cross >= 0
        return inside


def rectangle(x0, y0, x1, y1, color) -> Shape:
    """Axis-aligned rectangle covering pixel-space [x0, x1] x [y0, y1]."""
    verts = np.array([[x0, y0], [x0, y1], [x1, y1], [x1, y0]], dtype=float)
    if _signed_area(verts) < 0:
        verts = verts[::-1]
    return Shape("polygon", tuple(color), vertices=verts)


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    masks: list[np.ndarray]  # boolean (H, W)
    boxes: list[tuple[int, int, int, int]]  # inclusive pixel bounds (x0, y0, x1, y1)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def normalized_box(self, i: int) -> tuple[float, float, float, float]:
        h, w = self.size
        x0, y0, x1, y1 = self.boxes[i]
        return (x0 / w, y0 / h, (x1 + 1) / w, (y1 + 1) / h)


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def _background(rng, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.25, 0.6, size=3)
    tex = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.uniform(1, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
    tex = tex / 4.0 * 0.08
    return np.clip(base[None, None, :] + tex[..., None], 0.0, 1.0)


def _distinct_colors(rng, n: int) -> list[tuple[float, float, float]]:
    hues = (rng.uniform() + np.arange(n) / n) % 1.0
    rng.shuffle(hues)
    out = []
    for i, h in enumerate(hues):
        value = 0.95 if i % 2 == 0 else 0.75
        out.append(colorsys.hsv_to_rgb(h, rng.uniform(0.7, 1.0), value))
    return out


def _random_shape(rng, size: int, color) -> Shape:
    kind = rng.choice(["ellipse", "rectangle", "polygon"])
    cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
    scale = rng.uniform(0.12, 0.25) * size
    if kind == "ellipse":
        radii = (scale * rng.uniform(0.7, 1.3), scale * rng.uniform(0.7, 1.3))
        return Shape("ellipse", tuple(color), (cx, cy), radii, rng.uniform(0, np.pi))
    if kind == "rectangle":
        hw, hh = scale * rng.uniform(0.7, 1.3), scale * rng.uniform(0.7, 1.3)
        return rectangle(cx - hw, cy - hh, cx + hw, cy + hh, color)
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    r = scale * rng.uniform(0.8, 1.3, size=n)
    verts = np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)
    if _signed_area(verts) < 0:
        verts = verts[::-1]
    return Shape("polygon", tuple(color), vertices=verts)


def render_scene(size: int, shapes: list[Shape], background: np.ndarray | None = None,
                 min_pixels: int = 1) -> SyntheticScene:
    """Paint ``shapes`` in order; drop instances left with < ``min_pixels``."""
    image = np.full((size, size, 3), 0.5) if background is None else background.copy()
    centers = np.arange(size) + 0.5
    cx, cy = np.meshgrid(centers, centers)
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    sx = (np.arange(size)[:, None] + sub[None, :]).ravel()
    sxx, syy = np.meshgrid(sx, sx)

    masks = []
    for shape in shapes:
        cover = shape.contains(sxx, syy).reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
        image = image * (1.0 - cover[..., None]) + cover[..., None] * np.asarray(shape.color)
        m = shape.contains(cx, cy)
        masks = [prev & ~m for prev in masks]
        masks.append(m)
    kept = [m for m in masks if m.sum() >= min_pixels]
    return SyntheticScene(image.astype(np.float32), kept, [tight_box(m) for m in kept])


def gen_scene(seed: int, size: int = 64, n_shapes: int = 5, min_pixels: int = 16) -> SyntheticScene:
    """Random scene with exactly ``n_shapes`` visible instances."""
    if n_shapes < 1:
        raise ContractError("n_shapes must be >= 1")
    rng = np.random.default_rng(seed)
    background = _background(rng, size)
    colors = _distinct_colors(rng, n_shapes)
    for _ in range(100):
        shapes = [_random_shape(rng, size, c) for c in colors]
        scene = render_scene(size, shapes, background, min_pixels)
        if len(scene.masks) == n_shapes:
            return scene
    raise ContractError(f"could not place {n_shapes} visible shapes in a {size}px scene")
