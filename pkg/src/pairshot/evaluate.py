"""FID / KID metrics, the Rand and Syn synthesis manners, the target-only GAN baseline and sample grids."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import losses as L
from .config import ModelConfig, TrainConfig
from .data import PairedDataset, to_tensor
from .errors import ContractError, NumericError, PhaseOrderError
from .nets import ModelBundle
from .train import TrainState, _update, new_state

MANNERS = ("rand", "syn")
EIG_CLAMP = 1e-10
# negative eigenvalues below -EIG_REL_TOL * max|eig| are treated as a failed square root
EIG_REL_TOL = 1e-6


@dataclass(frozen=True)
class FeatureMoments:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ContractError("moments need at least 2 samples")
        f = len(self.mean)
        if self.cov.shape != (f, f):
            raise ContractError(f"covariance shape {self.cov.shape} does not match mean dim {f}")


@torch.no_grad()
def extract_features(images, extractor, chunk: int = 250) -> np.ndarray:
    """Pooled features of (N, H, W, 3) images as a float64 (N, f) array."""
    x = to_tensor(np.asarray(images)) if not torch.is_tensor(images) else images
    feats = [extractor.pooled(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return torch.cat(feats).double().numpy()


def moments_from_features(feats: np.ndarray) -> FeatureMoments:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ContractError("need at least 2 feature vectors")
    return FeatureMoments(feats.mean(0), np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], -1), len(feats))


def extract_moments(images, extractor) -> FeatureMoments:
    if len(images) < 2:
        raise ContractError("extract_moments needs at least 2 images")
    return moments_from_features(extract_features(images, extractor))


def _sym_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    _check_eigs(w, "covariance")
    return (v * np.sqrt(np.where(w < EIG_CLAMP, 0.0, w))) @ v.T


def _check_eigs(w: np.ndarray, what: str) -> None:
    scale = max(np.abs(w).max(initial=0.0), 1.0)
    if w.min(initial=0.0) < -EIG_REL_TOL * scale:
        raise NumericError(
            f"{what} has eigenvalue {w.min():.3e} (largest magnitude {scale:.3e}); "
            "matrix square root is not defined")


def fid(m1: FeatureMoments, m2: FeatureMoments) -> float:
    """Frechet distance between two Gaussian feature fits.

    Tr((S1 S2)^1/2) is computed as the trace of the square root of the
    symmetric matrix S1^1/2 S2 S1^1/2, which has the same spectrum.
    """
    if m1.mean.shape != m2.mean.shape:
        raise ContractError(f"feature dims differ: {m1.mean.shape} vs {m2.mean.shape}")
    s1 = 0.5 * (m1.cov + m1.cov.T)
    s2 = 0.5 * (m2.cov + m2.cov.T)
    r1 = _sym_sqrt(s1)
    _check_eigs(np.linalg.eigvalsh(s2), "covariance")
    prod = r1 @ s2 @ r1
    lam = np.linalg.eigvalsh(0.5 * (prod + prod.T))
    _check_eigs(lam, "covariance product")
    tr_sqrt = np.sqrt(np.where(lam < EIG_CLAMP, 0.0, lam)).sum()
    diff = m1.mean - m2.mean
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a @ b.T / a.shape[1] + 1.0) ** 3


def _kid_sums(f1, f2):
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.ndim != 2 or f2.ndim != 2 or f1.shape[1] != f2.shape[1]:
        raise ContractError("kid needs two (n, f) feature arrays with equal f")
    if len(f1) < 2 or len(f2) < 2:
        raise ContractError("kid needs at least 2 samples per set")
    return polynomial_kernel(f1, f1), polynomial_kernel(f2, f2), polynomial_kernel(f1, f2)


def kid(feats1, feats2) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    kxx, kyy, kxy = _kid_sums(feats1, feats2)
    n, m = len(kxx), len(kyy)
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(xx + yy - 2.0 * kxy.mean())


def kid_standard_error(feats1, feats2) -> float:
    """Delete-one jackknife standard error of :func:`kid` (needs >= 3 samples per set)."""
    kxx, kyy, kxy = _kid_sums(feats1, feats2)
    n, m = len(kxx), len(kyy)
    if n < 3 or m < 3:
        raise ContractError("jackknife needs at least 3 samples per set")
    sxx = kxx.sum() - np.trace(kxx)
    syy = kyy.sum() - np.trace(kyy)
    sxy = kxy.sum()
    yy = syy / (m * (m - 1))
    xx = sxx / (n * (n - 1))
    # drop x_i
    sxx_i = sxx - 2.0 * (kxx.sum(1) - np.diag(kxx))
    theta_x = sxx_i / ((n - 1) * (n - 2)) + yy - 2.0 * (sxy - kxy.sum(1)) / ((n - 1) * m)
    # drop y_j
    syy_j = syy - 2.0 * (kyy.sum(1) - np.diag(kyy))
    theta_y = xx + syy_j / ((m - 1) * (m - 2)) - 2.0 * (sxy - kxy.sum(0)) / (n * (m - 1))
    var = (n - 1) / n * ((theta_x - theta_x.mean()) ** 2).sum()
    var += (m - 1) / m * ((theta_y - theta_y.mean()) ** 2).sum()
    return float(np.sqrt(var))


# -- synthesis ----------------------------------------------------------------

@torch.no_grad()
def synthesize(bundle: ModelBundle, manner: str, n: int, seed: int, dataset: PairedDataset | None = None,
               phase: str | None = None, chunk: int = 250) -> np.ndarray:
    """Generate ``n`` target-domain images as a (n, H, W, 3) array.

    ``rand`` draws both codes from N(0, I); ``syn`` samples the content posterior of
    random source images and the target-appearance posterior of random target images.
    """
    manner = manner.lower()
    if manner not in MANNERS:
        raise ContractError(f"manner must be one of {MANNERS}, got {manner!r}")
    cfg = bundle.cfg
    g = torch.Generator().manual_seed(seed)
    if manner == "rand":
        z_c = torch.randn(n, cfg.d_content, generator=g)
        z_a = torch.randn(n, cfg.d_appearance, generator=g)
    else:
        if phase == "baseline":
            raise ContractError("the target-only baseline has no encoders; use the rand manner")
        if dataset is None:
            raise ContractError("syn synthesis needs the paired dataset")
        src_idx = torch.randint(0, dataset.n_source, (n,), generator=g)
        tar_idx = torch.randint(0, dataset.n_target, (n,), generator=g)
        z_c = torch.cat([bundle.content_enc(to_tensor(dataset.source[src_idx[i:i + chunk].numpy()])).sample(g)
                         for i in range(0, n, chunk)])
        z_a = torch.cat([bundle.app_enc_tar(to_tensor(dataset.target[tar_idx[i:i + chunk].numpy()])).sample(g)
                         for i in range(0, n, chunk)])
    out = [bundle.gen_tar(z_c[i:i + chunk], z_a[i:i + chunk]) for i in range(0, n, chunk)]
    return torch.cat(out).permute(0, 2, 3, 1).numpy() if out else np.zeros((0, cfg.image_size, cfg.image_size, 3), np.float32)


@torch.no_grad()
def disentanglement_distances(bundle: ModelBundle, source_images: np.ndarray, n_pairs: int = 256,
                              seed: int = 0) -> dict:
    """Mean perceptual-feature change of G_src under an appearance swap vs a content swap.

    Content codes are posterior means of random source images, appearance codes
    are drawn from N(0, I). ``d_appearance`` varies z^A with z^C fixed;
    ``d_content`` varies z^C with z^A fixed.
    """
    if len(source_images) < 2:
        raise ContractError("need at least two source images")
    g = torch.Generator().manual_seed(seed)
    n = len(source_images)
    i = torch.randint(0, n, (n_pairs,), generator=g)
    j = (i + 1 + torch.randint(0, n - 1, (n_pairs,), generator=g)) % n
    z_i = bundle.content_enc(to_tensor(source_images[i.numpy()])).mean
    z_j = bundle.content_enc(to_tensor(source_images[j.numpy()])).mean
    a1 = torch.randn(n_pairs, bundle.cfg.d_appearance, generator=g)
    a2 = torch.randn(n_pairs, bundle.cfg.d_appearance, generator=g)
    feat = bundle.perceptual_features
    base = feat(bundle.gen_src(z_i, a1))
    d_app = (base - feat(bundle.gen_src(z_i, a2))).abs().mean().item()
    d_con = (base - feat(bundle.gen_src(z_j, a1))).abs().mean().item()
    return {"d_appearance": d_app, "d_content": d_con, "ratio": d_app / d_con if d_con > 0 else float("inf")}


# -- baseline -----------------------------------------------------------------

def train_baseline_s(target_pool: np.ndarray, model_cfg: ModelConfig, cfg: TrainConfig,
                     steps: int | None = None, on_report=None) -> TrainState:
    """Hinge GAN trained from scratch on the target pool only (same G_tar / D_tar architectures)."""
    if len(target_pool) < 1:
        raise ContractError("baseline needs at least one target sample")
    state = new_state(model_cfg, cfg)
    state.phase = "baseline"
    b = state.bundle
    real = to_tensor(target_pool)
    bs = min(cfg.batch_size_stage2, len(real))
    steps = cfg.steps_stage2 if steps is None else steps
    for _ in range(steps):
        report = L.LossReport("baseline", state.step + 1)
        x = real[torch.randperm(len(real), generator=state.rng)[:bs]]
        z_c = torch.randn(bs, model_cfg.d_content, generator=state.rng)
        z_a = torch.randn(bs, model_cfg.d_appearance, generator=state.rng)
        fake = b.gen_tar(z_c, z_a)
        d_loss = L.hinge_d_loss(b.disc_tar(x), b.disc_tar(fake.detach()))
        L.check_finite("L_IA_D_tar", d_loss, "baseline", report.step)
        _update(state.optimizers["disc_tar"], d_loss)
        b.disc_tar.requires_grad_(False)
        g_loss = L.hinge_g_loss(b.disc_tar(fake))
        L.check_finite("L_IA_G_tar", g_loss, "baseline", report.step)
        _update(state.optimizers["gen_tar"], g_loss)
        b.disc_tar.requires_grad_(True)
        report.add("L_IA_D_tar", d_loss)
        report.add("L_IA_G_tar", g_loss)
        state.step += 1
        state.history.append(report)
        if on_report is not None:
            on_report(report)
    return state


# -- reporting ----------------------------------------------------------------

def evaluate_generator(bundle: ModelBundle, real_images: np.ndarray, manner: str, extractor,
                       n_generated: int = 1000, seed: int = 0, dataset: PairedDataset | None = None,
                       phase: str | None = None, reference: str = "real") -> list[dict]:
    """FID and KID of ``n_generated`` samples against ``real_images``; one row per metric."""
    if phase not in (None, "stage2", "baseline"):
        raise PhaseOrderError(f"evaluation needs a stage-2 or baseline checkpoint, got phase {phase!r}")
    fake = synthesize(bundle, manner, n_generated, seed, dataset, phase)
    f_fake = extract_features(fake, extractor)
    f_real = extract_features(real_images, extractor)
    common = {"manner": manner, "n_gen": len(f_fake), "n_real": len(f_real),
              "extractor_id": extractor.identifier, "seed": seed, "reference": reference}
    return [
        {**common, "metric": "FID", "value": fid(moments_from_features(f_fake), moments_from_features(f_real))},
        {**common, "metric": "KID", "value": kid(f_fake, f_real)},
    ]


REPORT_FIELDS = ("manner", "metric", "value", "n_gen", "n_real", "extractor_id", "seed", "reference")


def write_report(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, REPORT_FIELDS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "value": repr(float(row["value"]))})
    return path


def read_report(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for row in rows:
        row["value"] = float(row["value"])
    return rows


def make_grid(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile the first rows*cols images row-major into one (rows*H, cols*W, 3) array."""
    images = np.asarray(images)
    if rows < 1 or cols < 1 or rows * cols > len(images):
        raise ContractError(f"a {rows}x{cols} grid needs {rows * cols} images, got {len(images)}")
    h, w = images.shape[1:3]
    tiles = images[:rows * cols].reshape(rows, cols, h, w, 3)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, 3)


def emit_grid(images: np.ndarray, rows: int, cols: int, path) -> Path:
    grid = make_grid(images, rows, cols)
    arr = np.clip(np.rint((grid + 1.0) * 127.5), 0, 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    return path
