"""Paired image pools, manifest loading and Lab chroma-shift augmentation.

Images are handled as float32 arrays in channels-last layout with values in
[-1, 1]; a pool is a stacked ``(N, H, W, 3)`` array.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from skimage import color

from .errors import ContractError, LoadError, ManifestError

log = logging.getLogger(__name__)

# Valid range of the chromatic Lab channels; shifted values are clamped here.
LAB_CHROMA_MIN = -128.0
LAB_CHROMA_MAX = 127.0


@dataclass(frozen=True)
class PairedDataset:
    """Source pool, target pool and the injective target->source index map ``kappa``."""

    source: np.ndarray
    target: np.ndarray
    kappa: np.ndarray
    source_names: tuple = ()
    target_names: tuple = ()

    def __post_init__(self):
        src, tar = self.source, self.target
        if src.ndim != 4 or tar.ndim != 4 or src.shape[-1] != 3 or tar.shape[-1] != 3:
            raise ContractError("pools must have shape (N, H, W, 3)")
        if src.shape[1:] != tar.shape[1:]:
            raise ContractError(f"source images {src.shape[1:3]} and target images {tar.shape[1:3]} differ in size")
        if len(tar) > len(src):
            raise ContractError(f"N_tar={len(tar)} exceeds N_src={len(src)}")
        kappa = np.asarray(self.kappa, dtype=np.int64)
        if kappa.shape != (len(tar),):
            raise ManifestError("kappa needs exactly one source index per target sample")
        if len(kappa) and (kappa.min() < 0 or kappa.max() >= len(src)):
            raise ManifestError("kappa refers to a source index outside the pool")
        if len(set(kappa.tolist())) != len(kappa):
            raise ManifestError("kappa is not injective: two targets share a source image")
        if len(tar) > len(src) / 10:
            log.warning("N_tar=%d is not much smaller than N_src=%d", len(tar), len(src))
        for pool in (src, tar):
            if pool.size and (pool.min() < -1.0 or pool.max() > 1.0):
                raise ContractError("pixel values must lie in [-1, 1]")
        # kappa is stored as an immutable int64 array
        kappa = kappa.copy()
        kappa.setflags(write=False)
        object.__setattr__(self, "kappa", kappa)
        for name in ("source", "target"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_source(self) -> int:
        return len(self.source)

    @property
    def n_target(self) -> int:
        return len(self.target)

    @property
    def image_size(self) -> int:
        return self.source.shape[1]

    def paired_source(self) -> np.ndarray:
        """Source images in target order: row i is x_src[kappa[i]]."""
        return self.source[self.kappa]

    def subset(self, n_target: int) -> "PairedDataset":
        """Keep the first ``n_target`` pairs; the source pool is unchanged."""
        return PairedDataset(self.source, self.target[:n_target], self.kappa[:n_target],
                             self.source_names, self.target_names[:n_target])


def read_image(path, size: int) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.BICUBIC)
            arr = np.asarray(img, dtype=np.float32)
    except FileNotFoundError:
        raise LoadError(f"image file not found: {path}") from None
    except OSError as exc:
        raise LoadError(f"cannot decode image {path}: {exc}") from None
    return arr / 127.5 - 1.0


def write_image(path, image: np.ndarray) -> None:
    """Write one [-1, 1] channels-last image as an 8-bit PNG."""
    arr = np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_manifest(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(p.strip() for p in parts):
            raise ManifestError(f"{path}:{lineno}: expected '<target_file><TAB><source_file>'")
        rows.append((parts[0].strip(), parts[1].strip()))
    return rows


def write_manifest(path, rows) -> None:
    Path(path).write_text("".join(f"{t}\t{s}\n" for t, s in rows), encoding="utf-8")


def _list_images(directory: Path) -> list[str]:
    exts = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg", ".webp"}
    return sorted(p.name for p in directory.iterdir() if p.suffix.lower() in exts)


def load_pool(directory, size: int = 32, names=None) -> tuple[np.ndarray, tuple]:
    directory = Path(directory)
    if not directory.is_dir():
        raise LoadError(f"image directory not found: {directory}")
    if names is None:
        names = _list_images(directory)
    images = [read_image(directory / name, size) for name in names]
    if not images:
        return np.zeros((0, size, size, 3), np.float32), ()
    return np.stack(images), tuple(names)


def load_dataset(source_dir, target_dir, manifest, size: int = 32) -> PairedDataset:
    """Load both pools and build ``kappa`` from the manifest rows.

    The source pool holds every image in ``source_dir``; the target pool holds
    exactly the manifest's target files, in manifest order.
    """
    rows = read_manifest(manifest)
    targets = [t for t, _ in rows]
    if len(set(targets)) != len(targets):
        dup = next(t for t in targets if targets.count(t) > 1)
        raise ManifestError(f"target file {dup!r} appears in more than one manifest row")
    sources = [s for _, s in rows]
    if len(set(sources)) != len(sources):
        dup = next(s for s in sources if sources.count(s) > 1)
        raise ManifestError(f"source file {dup!r} is paired with more than one target")
    source_dir, target_dir = Path(source_dir), Path(target_dir)
    for name in targets:
        if not (target_dir / name).is_file():
            raise LoadError(f"target image listed in manifest is missing: {target_dir / name}")
    for name in sources:
        if not (source_dir / name).is_file():
            raise LoadError(f"source image listed in manifest is missing: {source_dir / name}")
    source, source_names = load_pool(source_dir, size)
    target, target_names = load_pool(target_dir, size, names=targets)
    index = {name: i for i, name in enumerate(source_names)}
    kappa = np.array([index[s] for s in sources], dtype=np.int64)
    return PairedDataset(source, target, kappa, source_names, target_names)


# -- Lab augmentation -------------------------------------------------------

def rgb_to_lab(x: np.ndarray) -> np.ndarray:
    """[-1, 1] RGB -> CIE Lab (D65, sRGB companding)."""
    return color.rgb2lab((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, illuminant="D65")


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """CIE Lab -> [-1, 1] RGB; out-of-gamut colours are clipped."""
    with warnings.catch_warnings():
        # lab2rgb warns when it has to clip negative XYZ values
        warnings.simplefilter("ignore", UserWarning)
        rgb = color.lab2rgb(lab, illuminant="D65")
    return np.clip(rgb * 2.0 - 1.0, -1.0, 1.0)


def shift_chroma(lab: np.ndarray, shift_a: float, shift_b: float) -> np.ndarray:
    out = np.array(lab, dtype=np.float64, copy=True)
    out[..., 1] += shift_a
    out[..., 2] += shift_b
    return out


def lab_chroma_shift(x: np.ndarray, shift_a: float, shift_b: float) -> np.ndarray:
    """Shift the a and b channels of ``x`` in Lab space and convert back.

    Works on a single ``(H, W, 3)`` image or a stack of them.
    """
    lab = shift_chroma(rgb_to_lab(x), shift_a, shift_b)
    np.clip(lab[..., 1:], LAB_CHROMA_MIN, LAB_CHROMA_MAX, out=lab[..., 1:])
    return lab_to_rgb(lab).astype(np.float32)


@dataclass(frozen=True)
class AugmentationConfig:
    chroma_shift_range: float = 15.0
    copies_per_sample: int = 8

    def __post_init__(self):
        if not 0.0 <= self.chroma_shift_range <= LAB_CHROMA_MAX:
            raise ContractError("chroma_shift_range must lie in [0, 127]")
        if self.copies_per_sample < 1:
            raise ContractError("copies_per_sample must be positive")


def augment_target_pool(d: PairedDataset, cfg: AugmentationConfig, seed: int) -> np.ndarray:
    """Return ``N_tar * copies_per_sample`` chroma-shifted copies of the target pool.

    Copies of sample i occupy rows ``i*copies .. (i+1)*copies - 1``.
    """
    rng = np.random.default_rng(seed)
    r = cfg.chroma_shift_range
    shifts = rng.uniform(-r, r, size=(d.n_target, cfg.copies_per_sample, 2))
    lab = rgb_to_lab(d.target)
    out = np.empty((d.n_target, cfg.copies_per_sample) + d.target.shape[1:], np.float32)
    for i in range(d.n_target):
        for k in range(cfg.copies_per_sample):
            shifted = shift_chroma(lab[i], *shifts[i, k])
            np.clip(shifted[..., 1:], LAB_CHROMA_MIN, LAB_CHROMA_MAX, out=shifted[..., 1:])
            out[i, k] = lab_to_rgb(shifted)
    return out.reshape((-1,) + d.target.shape[1:])


# -- tensors ----------------------------------------------------------------

def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) array -> (N, 3, H, W) float tensor."""
    return torch.tensor(np.array(images, dtype=np.float32, copy=True)).permute(0, 3, 1, 2).contiguous()


def to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).cpu().numpy()
