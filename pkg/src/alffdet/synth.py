"""Seeded synthetic head-scene generation and annotation I/O.

Scenes are grayscale images of bright filled ellipses ("heads") over a
smooth textured background.  Geometry is exact by construction, which keeps
every downstream target and metric checkable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .evaluation import iou
from .geometry import Box
from .pgmio import write_pgm


class SynthError(ValueError):
    pass


@dataclass
class SceneConfig:
    image_w: int = 160
    image_h: int = 160
    count_min: int = 20
    count_max: int = 90
    radius_min: float = 3.0
    radius_max: float = 7.0
    max_pair_iou: float = 0.1
    bg_seed: int = 0
    snap_stride: int | None = None  # snap centers to heatmap cell centers

    def __post_init__(self):
        if self.count_min > self.count_max or self.radius_min > self.radius_max:
            raise SynthError("min must not exceed max in scene config")
        if self.radius_max * 2 >= min(self.image_w, self.image_h):
            raise SynthError("heads too large for the image")


@dataclass
class AnnotationRecord:
    image_id: int
    boxes: list[Box]


def _bilinear_upscale(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    ch, cw = coarse.shape
    ys = np.linspace(0.0, ch - 1.0, h)
    xs = np.linspace(0.0, cw - 1.0, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
            + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
            + coarse[np.ix_(y1, x1)] * fy * fx)


def generate_scene(cfg: SceneConfig, seed: int, image_id: int = 0):
    """Render one scene; returns ((h, w) image in [0, 1], AnnotationRecord).

    Fully determined by (cfg, seed, image_id).  Raises after 1000 rejected
    placements for a single head.
    """
    rng = rngmod.stream(seed, rngmod.SCENE, image_id, cfg.bg_seed)
    h, w = cfg.image_h, cfg.image_w
    coarse = rng.uniform(0.0, 0.35, (h // 8 + 2, w // 8 + 2))
    img = _bilinear_upscale(coarse, h, w)
    n = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    boxes: list[Box] = []
    yy = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xx = np.arange(w, dtype=np.float64)[None, :] + 0.5
    for _ in range(n):
        placed = False
        for _attempt in range(1000):
            rx = rng.uniform(cfg.radius_min, cfg.radius_max)
            ry = rng.uniform(cfg.radius_min, cfg.radius_max)
            cx = rng.uniform(rx + 0.5, w - rx - 0.5)
            cy = rng.uniform(ry + 0.5, h - ry - 0.5)
            if cfg.snap_stride:
                s = cfg.snap_stride
                cx = (np.floor(cx / s) + 0.5) * s
                cy = (np.floor(cy / s) + 0.5) * s
                cx = min(max(cx, rx + 0.5), w - rx - 0.5)
                cy = min(max(cy, ry + 0.5), h - ry - 0.5)
            cand = Box(cx - rx, cy - ry, cx + rx, cy + ry)
            if all(iou(cand, b) <= cfg.max_pair_iou for b in boxes):
                boxes.append(cand)
                intensity = rng.uniform(0.55, 0.95)
                mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
                img[mask] = np.maximum(img[mask], intensity)
                placed = True
                break
        if not placed:
            raise SynthError(
                f"could not place head {len(boxes) + 1}/{n} within 1000 attempts "
                f"under max pairwise IoU {cfg.max_pair_iou}")
    return np.clip(img, 0.0, 1.0), AnnotationRecord(image_id=image_id, boxes=boxes)


PROFILES = {
    "low": SceneConfig(count_min=20, count_max=90, radius_min=3.0, radius_max=7.0,
                       max_pair_iou=0.1),
    "high": SceneConfig(count_min=100, count_max=290, radius_min=2.0, radius_max=4.0,
                        max_pair_iou=0.35),
}


def make_split(profile: str, n_images: int, seed: int, out_dir: str,
               image_size: int = 160, snap_stride: int | None = None) -> list[AnnotationRecord]:
    """Write a dataset directory: images/NNNN.pgm, annotations.csv, meta.csv."""
    if profile not in PROFILES:
        raise SynthError(f"unknown profile {profile!r}; expected low or high")
    if n_images < 1:
        raise SynthError("n_images must be >= 1")
    base = PROFILES[profile]
    cfg = SceneConfig(image_w=image_size, image_h=image_size,
                      count_min=base.count_min, count_max=base.count_max,
                      radius_min=base.radius_min, radius_max=base.radius_max,
                      max_pair_iou=base.max_pair_iou, snap_stride=snap_stride)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    meta_lines = []
    for i in range(n_images):
        img, rec = generate_scene(cfg, seed, image_id=i)
        write_pgm(os.path.join(img_dir, f"{i:04d}.pgm"), img)
        records.append(rec)
        meta_lines.append(f"{i},0,{len(rec.boxes)}\n")
    write_annotations(records, os.path.join(out_dir, "annotations.csv"))
    with open(os.path.join(out_dir, "meta.csv"), "w") as f:
        f.writelines(meta_lines)
    return records


def write_annotations(records: list[AnnotationRecord], path: str) -> None:
    with open(path, "w") as f:
        for rec in records:
            for b in rec.boxes:
                f.write(f"{rec.image_id},{b.x1!r},{b.y1!r},{b.x2!r},{b.y2!r}\n")


def read_annotations(path: str) -> list[AnnotationRecord]:
    """Inverse of write_annotations; rejects malformed lines and image ids
    split across non-contiguous blocks."""
    records: list[AnnotationRecord] = []
    seen: set[int] = set()
    cur: AnnotationRecord | None = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 fields, got {len(parts)}")
                img_id = int(parts[0])
                box = Box(*(float(v) for v in parts[1:]))
            except ValueError as e:
                raise SynthError(f"{path}:{lineno}: {e}") from e
            if cur is None or img_id != cur.image_id:
                if img_id in seen:
                    raise SynthError(
                        f"{path}:{lineno}: image id {img_id} appears in "
                        f"multiple non-contiguous blocks")
                cur = AnnotationRecord(image_id=img_id, boxes=[])
                records.append(cur)
                seen.add(img_id)
            cur.boxes.append(box)
    return records


def read_meta(path: str) -> list[tuple[int, int, int]]:
    """meta.csv rows as (image_id, scene_id, head_count)."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                a, b, c = (int(v) for v in line.split(","))
            except ValueError as e:
                raise SynthError(f"{path}:{lineno}: {e}") from e
            rows.append((a, b, c))
    return rows
