"""Loss terms of both training stages.

Reconstruction, perceptual, appearance and relation terms use the mean
absolute deviation; content distances are Euclidean. Expectations are batch
means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ContractError, NonFiniteLossError
from .nets import GaussianPosterior


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def image_recon_loss(x_hat, x):
    _same_shape(x_hat, x, "image_recon_loss")
    return (x_hat - x).abs().mean()


def kl_loss(q: GaussianPosterior):
    """KL(q || N(0, I)) summed over dimensions and averaged over the batch."""
    mean, logvar = q
    _same_shape(mean, logvar, "kl_loss")
    if not (torch.isfinite(mean).all() and torch.isfinite(logvar).all()):
        raise ContractError("kl_loss: posterior contains non-finite values")
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(-1)
    return kl.mean()


def perceptual_loss(x1, x2, extractor):
    _same_shape(x1, x2, "perceptual_loss")
    return (extractor(x1) - extractor(x2)).abs().mean()


def appearance_recon_loss(z_rec, z):
    _same_shape(z_rec, z, "appearance_recon_loss")
    return (z_rec - z).abs().mean()


def hinge_d_loss(scores_real, scores_fake):
    if scores_real.numel() == 0 or scores_fake.numel() == 0:
        raise ContractError("hinge_d_loss needs at least one real and one fake score")
    return torch.relu(1.0 - scores_real).mean() + torch.relu(1.0 + scores_fake).mean()


def hinge_g_loss(scores_fake):
    if scores_fake.numel() == 0:
        raise ContractError("hinge_g_loss needs at least one fake score")
    return -scores_fake.mean()


def code_distance(a, b):
    """Row-wise Euclidean distance between code batches."""
    _same_shape(a, b, "code_distance")
    return (a - b).pow(2).sum(-1).sqrt()


@torch.no_grad()
def content_distance(content_enc, x_src_j, target_index, kappa, source_pool):
    """Distance between the content means of ``x_src_j`` and of the source image paired with target ``i``.

    ``target_index`` may be an int or a 1-D index tensor (batched, one per row of ``x_src_j``).
    """
    idx = torch.as_tensor(target_index, dtype=torch.long).reshape(-1)
    kappa = torch.as_tensor(kappa, dtype=torch.long)
    if (idx < 0).any() or (idx >= len(kappa)).any():
        raise ContractError(f"unknown target index {target_index!r}")
    # same memory layout on both paths, so a paired image gives exactly zero
    mu_j = content_enc(x_src_j.contiguous()).mean
    mu_k = content_enc(source_pool[kappa[idx]].contiguous()).mean
    return code_distance(mu_j, mu_k)


def relation_targets(content_means, src_idx, tar_idx, kappa):
    """Regression targets for the relation network from precomputed content means.

    Raises if any pair is a known correspondence (``src_idx == kappa[tar_idx]``).
    """
    src_idx = torch.as_tensor(src_idx, dtype=torch.long)
    paired = torch.as_tensor(kappa, dtype=torch.long)[torch.as_tensor(tar_idx, dtype=torch.long)]
    if (src_idx == paired).any():
        raise ContractError("relation pairs must not include a target's own source correspondence")
    return code_distance(content_means[src_idx], content_means[paired])


def relation_train_loss(relation, x_src, x_tar, src_idx, tar_idx, kappa, content_means):
    """Mean |R(x_src_j, x_tar_i) - D_c| over a batch of non-corresponding pairs."""
    target = relation_targets(content_means, src_idx, tar_idx, kappa).detach()
    return (relation(x_src, x_tar) - target).abs().mean()


def relation_gen_loss(relation, x_src_gen, x_tar_gen, z_content_i, z_content_j, idx_i, idx_j):
    """Mean |R(G_src(z_i, .), G_tar(z_j, .)) - ||z_i - z_j|||.

    ``idx_i``/``idx_j`` identify which source images the content codes came from
    and must differ pairwise.
    """
    if (torch.as_tensor(idx_i) == torch.as_tensor(idx_j)).any():
        raise ContractError("relation_gen_loss requires distinct content sources (i != j)")
    target = code_distance(z_content_i, z_content_j).detach()
    return (relation(x_src_gen, x_tar_gen) - target).abs().mean()


@dataclass
class LossReport:
    stage: str
    step: int
    values: dict = field(default_factory=dict)

    def add(self, name: str, value) -> None:
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if name in self.values:
            raise ValueError(f"loss {name!r} reported twice")
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value, self.stage, self.step)
        self.values[name] = value

    def to_line(self) -> str:
        parts = [f"step={self.step}", f"stage={self.stage}"]
        parts += [f"{k}={v!r}" for k, v in self.values.items()]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "LossReport":
        items = dict(tok.split("=", 1) for tok in line.split())
        step = int(items.pop("step"))
        stage = items.pop("stage")
        return cls(stage, step, {k: float(v) for k, v in items.items()})


def check_finite(name: str, value, stage=None, step=None):
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(name, float(value.detach().reshape(-1)[0]), stage, step)
    return value
