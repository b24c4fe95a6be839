"""Synthetic single-class detection scenes.

Smooth value-noise backgrounds with achromatic discs and squares; the target
is a grid of objectness bits, one per cell, set when an object centre falls
in the cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .fileio import ensure_dir, image_to_u8, read_json, read_ppm, u8_to_image, write_json, write_ppm
from .rng import substream
from .tensor import bilinear_matrix

SIZE_RANGE = (3, 10)
CONTRAST_RANGE = (0.15, 0.35)
MAX_OBJECTS = 4


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W) float32 in [0, 1], values on the 8-bit lattice
    labels: np.ndarray  # (G, G) uint8
    meta: list = field(default_factory=list)

    @property
    def cells(self) -> list[list[int]]:
        return [[int(r), int(c)] for r, c in zip(*np.nonzero(self.labels))]


def _value_noise(rng: np.random.Generator, size: int, coarse: int) -> np.ndarray:
    grid = rng.uniform(0.0, 1.0, (coarse, coarse))
    m = bilinear_matrix(coarse, size, coarse / size)
    return m @ grid @ m.T


def cell_of(row: int, col: int, size: int, grid: int) -> tuple[int, int]:
    cell = size // grid
    return row // cell, col // cell


def gen_synthetic_scene(seed: int, size: int = 96, grid: int = 6, n_objects: int | None = None,
                        index: int = 0) -> SyntheticScene:
    if size % grid:
        raise ConfigError(f"image size {size} must be a multiple of the grid {grid}")
    rng = substream(seed, "data", index)
    lum = _value_noise(rng, size, 7)
    tint = np.stack([_value_noise(rng, size, 5) for _ in range(3)])
    img = 0.25 + 0.5 * (0.65 * lum[None] + 0.35 * tint)
    count = int(rng.integers(0, MAX_OBJECTS + 1)) if n_objects is None else n_objects
    yy, xx = np.mgrid[0:size, 0:size]
    labels = np.zeros((grid, grid), dtype=np.uint8)
    meta = []
    for _ in range(count):
        kind = "disc" if rng.random() < 0.5 else "square"
        extent = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
        cy, cx = (int(v) for v in rng.integers(0, size, 2))
        contrast = float(rng.uniform(*CONTRAST_RANGE)) * (1 if rng.random() < 0.5 else -1)
        half = (extent - 1) / 2.0
        if kind == "disc":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (extent / 2.0) ** 2
        else:
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        img[:, mask] += contrast
        labels[cell_of(cy, cx, size, grid)] = 1
        meta.append({"kind": kind, "center": [cy, cx], "size": extent, "contrast": round(contrast, 6)})
    img = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0
    return SyntheticScene(img.astype(np.float32), labels, meta)


@dataclass
class SceneSet:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, G, G) uint8

    def __len__(self) -> int:
        return len(self.images)

    @property
    def grid(self) -> int:
        return self.labels.shape[-1]

    def subset(self, idx) -> "SceneSet":
        return SceneSet(self.images[idx], self.labels[idx])


def make_scene_set(seed: int, count: int, size: int = 96, grid: int = 6, start: int = 0) -> SceneSet:
    scenes = [gen_synthetic_scene(seed, size, grid, index=start + i) for i in range(count)]
    images = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 3, size, size), np.float32)
    labels = np.stack([s.labels for s in scenes]) if scenes else np.zeros((0, grid, grid), np.uint8)
    return SceneSet(images, labels)


def save_dataset(directory, scenes: list[SyntheticScene], grid: int) -> dict:
    d = ensure_dir(directory)
    entries = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:05d}.ppm"
        write_ppm(d / name, image_to_u8(s.image))
        entries.append({"file": name, "cells": s.cells})
    labels = {"grid": grid, "scenes": entries}
    write_json(d / "labels.json", labels)
    return labels


def load_dataset(directory) -> SceneSet:
    d = Path(directory)
    if not (d / "labels.json").exists():
        raise InputError(f"{directory}: no labels.json")
    meta = read_json(d / "labels.json")
    grid = int(meta["grid"])
    if not meta["scenes"]:
        raise InputError(f"{directory}: dataset is empty")
    images, labels = [], []
    for entry in meta["scenes"]:
        images.append(u8_to_image(read_ppm(d / entry["file"])))
        lab = np.zeros((grid, grid), np.uint8)
        for r, c in entry["cells"]:
            lab[r, c] = 1
        labels.append(lab)
    return SceneSet(np.stack(images), np.stack(labels))
