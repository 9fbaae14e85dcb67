"""Synthetic paired-domain dataset.

Source images are outline drawings of a randomly posed shape on a white
background; the paired target image fills the exact same silhouette with a
striped texture from a warm colour family on a dark background. Content is
the shape class and its pose; appearance is stroke colour/width in the source
domain and stripe colour/phase in the target domain.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import write_image, write_manifest
from .errors import ContractError

SHAPES = ("circle", "triangle", "square", "cross")
SOURCE_BACKGROUND = np.array([1.0, 1.0, 1.0])
TARGET_BACKGROUND = np.array([0.12, 0.14, 0.22])


@dataclass(frozen=True)
class ShapeParams:
    shape: str
    cx: float
    cy: float
    radius: float
    angle: float


def sample_params(rng: np.random.Generator, size: int = 32) -> ShapeParams:
    margin = 0.3 * size
    return ShapeParams(
        shape=SHAPES[rng.integers(len(SHAPES))],
        cx=rng.uniform(margin, size - margin),
        cy=rng.uniform(margin, size - margin),
        radius=rng.uniform(0.17, 0.3) * size,
        angle=rng.uniform(0.0, 2.0 * np.pi),
    )


def shape_mask(p: ShapeParams, size: int = 32) -> np.ndarray:
    """Boolean silhouette sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - p.cx, yy - p.cy
    c, s = np.cos(p.angle), np.sin(p.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = p.radius
    if p.shape == "circle":
        return u * u + v * v <= r * r
    if p.shape == "square":
        h = r / np.sqrt(2.0)
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if p.shape == "cross":
        w = 0.35 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= w)) | ((np.abs(v) <= r) & (np.abs(u) <= w))
    if p.shape == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            t = 2.0 * np.pi * k / 3.0
            # half-planes whose boundary lies at distance r/2 from the centre
            inside &= np.cos(t) * u + np.sin(t) * v <= r / 2.0
        return inside
    raise ContractError(f"unknown shape {p.shape!r}")


def outline(mask: np.ndarray, width: int) -> np.ndarray:
    cross = ndimage.generate_binary_structure(2, 1)
    interior = ndimage.binary_erosion(mask, structure=cross, iterations=width, border_value=0)
    return mask & ~interior


def render_source(p: ShapeParams, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    mask = shape_mask(p, size)
    stroke = colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.15, 0.6))
    width = int(rng.integers(2, 4))
    img = np.broadcast_to(SOURCE_BACKGROUND, (size, size, 3)).copy()
    img[outline(mask, width)] = stroke
    return img * 2.0 - 1.0


def render_target(p: ShapeParams, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    mask = shape_mask(p, size)
    hue = rng.uniform(0.0, 0.12)
    light = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.85, 1.0)))
    dark = np.array(colorsys.hsv_to_rgb((hue + 0.03) % 1.0, rng.uniform(0.7, 1.0), rng.uniform(0.45, 0.6)))
    phase = rng.integers(4)
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = ((xx + yy + phase) // 2) % 2 == 0
    fill = np.where(stripes[..., None], light, dark)
    img = np.broadcast_to(TARGET_BACKGROUND, (size, size, 3)).copy()
    img[mask] = fill[mask]
    return img * 2.0 - 1.0


def silhouette(image: np.ndarray, domain: str) -> np.ndarray:
    """Recover the filled shape mask from a rendered [-1, 1] image."""
    rgb = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    bg = SOURCE_BACKGROUND if domain == "source" else TARGET_BACKGROUND
    fg = np.abs(rgb - bg).max(axis=-1) > 0.04
    if domain == "source":
        return ndimage.binary_fill_holes(fg)
    return fg


@dataclass
class ToyData:
    source: np.ndarray
    target: np.ndarray
    kappa: np.ndarray
    target_eval: np.ndarray
    source_params: list
    eval_params: list


def make_toy_arrays(n_src: int, n_tar: int, seed: int, n_eval: int = 0, size: int = 32) -> ToyData:
    """Render the toy pools in memory.

    Independent random streams make the source pool depend only on
    ``(seed, n_src)`` and the first k targets identical for every ``n_tar >= k``,
    so few-shot sets of different sizes are nested.
    """
    if n_tar > n_src:
        raise ContractError("n_tar must not exceed n_src")
    src_rng = np.random.default_rng([seed, 0])
    params = [sample_params(src_rng, size) for _ in range(n_src)]
    source = np.stack([render_source(p, src_rng, size) for p in params]) if n_src else np.zeros((0, size, size, 3))
    kappa = np.random.default_rng([seed, 1]).permutation(n_src)[:n_tar]
    tar_rng = np.random.default_rng([seed, 2])
    target = np.stack([render_target(params[k], tar_rng, size) for k in kappa]) if n_tar else np.zeros((0, size, size, 3))
    eval_rng = np.random.default_rng([seed, 3])
    eval_params = [sample_params(eval_rng, size) for _ in range(n_eval)]
    target_eval = (np.stack([render_target(p, eval_rng, size) for p in eval_params])
                   if n_eval else np.zeros((0, size, size, 3)))
    return ToyData(source.astype(np.float32), target.astype(np.float32), kappa,
                   target_eval.astype(np.float32), params, eval_params)


def write_toy(out_dir, n_src: int, n_tar: int, seed: int, n_eval: int = 1000, size: int = 32) -> Path:
    """Write ``source/``, ``target/``, ``target_eval/`` and ``manifest.tsv`` under ``out_dir``."""
    toy = make_toy_arrays(n_src, n_tar, seed, n_eval, size)
    out = Path(out_dir)
    dirs = {name: out / name for name in ("source", "target", "target_eval")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    src_names = [f"src_{i:05d}.png" for i in range(n_src)]
    for name, img in zip(src_names, toy.source):
        write_image(dirs["source"] / name, img)
    rows = []
    for i, (img, k) in enumerate(zip(toy.target, toy.kappa)):
        name = f"tar_{i:05d}.png"
        write_image(dirs["target"] / name, img)
        rows.append((name, src_names[k]))
    for i, img in enumerate(toy.target_eval):
        write_image(dirs["target_eval"] / f"eval_{i:05d}.png", img)
    write_manifest(out / "manifest.tsv", rows)
    return out
