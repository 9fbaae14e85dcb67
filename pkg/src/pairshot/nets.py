"""Encoders, generators, discriminators, the relation network and fixed feature extractors.

All image tensors are ``(N, 3, H, W)`` in [-1, 1]. The convolutional backbone
halves the resolution until a 2x2 map remains (four stages at 32x32).
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ContractError

NETWORKS = ("content_enc", "app_enc_src", "app_enc_tar", "gen_src", "gen_tar",
            "disc_src", "disc_tar", "relation")


class GaussianPosterior(NamedTuple):
    mean: torch.Tensor
    logvar: torch.Tensor

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + torch.exp(0.5 * self.logvar) * eps

    def select(self, idx) -> "GaussianPosterior":
        return GaussianPosterior(self.mean[idx], self.logvar[idx])


def n_stages(image_size: int) -> int:
    n = int(round(math.log2(image_size))) - 1
    if image_size < 8 or 2 ** (n + 1) != image_size:
        raise ContractError(f"image size must be a power of two >= 8, got {image_size}")
    return n


def check_images(x: torch.Tensor, image_size: int, channels: int = 3) -> None:
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != image_size or x.shape[3] != image_size:
        raise ContractError(
            f"expected images of shape (N, {channels}, {image_size}, {image_size}), got {tuple(x.shape)}")


def norm_groups(channels: int) -> int:
    return math.gcd(channels, 4)


class Backbone(nn.Module):
    """Strided conv stack: in_ch x S x S -> (width * 2**(n-1)) x 2 x 2, group-normalised after the first stage."""

    def __init__(self, in_ch: int, width: int, image_size: int):
        super().__init__()
        layers = []
        ch = in_ch
        for i in range(n_stages(image_size)):
            out = width * 2 ** min(i, 3)
            layers.append(nn.Conv2d(ch, out, 4, 2, 1))
            if i > 0:
                layers.append(nn.GroupNorm(norm_groups(out), out))
            layers.append(nn.LeakyReLU(0.2))
            ch = out
        self.net = nn.Sequential(*layers)
        self.out_features = ch * 4

    def forward(self, x):
        return self.net(x).flatten(1)


class Encoder(nn.Module):
    def __init__(self, dim: int, width: int, image_size: int):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.backbone = Backbone(3, width, image_size)
        self.head = nn.Linear(self.backbone.out_features, 2 * dim)

    def forward(self, x) -> GaussianPosterior:
        check_images(x, self.image_size)
        mean, logvar = self.head(self.backbone(x)).chunk(2, dim=1)
        return GaussianPosterior(mean, logvar)


class Generator(nn.Module):
    """(z_content, z_appearance) -> image; transposed-conv stages double the resolution from 2x2.

    Group normalisation in the upsampling stages keeps the output off the tanh
    plateau early in training; without it an outline-on-white source domain
    collapses to a blank image.
    """

    def __init__(self, d_content: int, d_appearance: int, width: int, image_size: int):
        super().__init__()
        self.d_content, self.d_appearance = d_content, d_appearance
        n = n_stages(image_size)
        top = width * 2 ** min(n - 1, 3)
        self.top = top
        self.fc = nn.Linear(d_content + d_appearance, top * 4)
        blocks = []
        ch = top
        for i in reversed(range(1, n)):
            out = width * 2 ** min(i - 1, 3)
            blocks += [nn.ConvTranspose2d(ch, out, 4, 2, 1), nn.GroupNorm(norm_groups(out), out), nn.LeakyReLU(0.2)]
            ch = out
        self.blocks = nn.Sequential(*blocks)
        self.to_rgb = nn.ConvTranspose2d(ch, 3, 4, 2, 1)

    def forward(self, z_content, z_appearance):
        if (z_content.dim() != 2 or z_appearance.dim() != 2 or z_content.shape[1] != self.d_content
                or z_appearance.shape[1] != self.d_appearance or len(z_content) != len(z_appearance)):
            raise ContractError(
                f"expected codes (N, {self.d_content}) and (N, {self.d_appearance}), "
                f"got {tuple(z_content.shape)} and {tuple(z_appearance.shape)}")
        h = F.leaky_relu(self.fc(torch.cat([z_content, z_appearance], 1)), 0.2)
        h = self.blocks(h.view(len(h), self.top, 2, 2))
        return torch.tanh(self.to_rgb(h))


class Discriminator(nn.Module):
    """Raw (unsquashed) realness score per image."""

    def __init__(self, width: int, image_size: int, in_ch: int = 3):
        super().__init__()
        self.image_size, self.in_ch = image_size, in_ch
        self.backbone = Backbone(in_ch, width, image_size)
        self.head = nn.Linear(self.backbone.out_features, 1)

    def forward(self, x):
        check_images(x, self.image_size, self.in_ch)
        return self.head(self.backbone(x)).squeeze(1)


class RelationNet(nn.Module):
    """Predicts the content-code distance of an ordered (source, target) image pair."""

    def __init__(self, width: int, image_size: int):
        super().__init__()
        self.image_size = image_size
        self.backbone = Backbone(6, width, image_size)
        self.head = nn.Linear(self.backbone.out_features, 1)

    def forward(self, x_src, x_tar):
        check_images(x_src, self.image_size)
        check_images(x_tar, self.image_size)
        if len(x_src) != len(x_tar):
            raise ContractError("source and target batches differ in length")
        h = self.backbone(torch.cat([x_src, x_tar], 1))
        return F.softplus(self.head(h)).squeeze(1)


def zero_final_layer(net: nn.Module) -> None:
    """Zero the weights and bias of the output affine layer."""
    head = net.head if hasattr(net, "head") else net.to_rgb
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()


# -- fixed feature extractors -------------------------------------------------

class RandomConvExtractor(nn.Module):
    """Seeded, randomly initialised and frozen three-block conv feature extractor.

    ``forward`` returns the final feature map (after the third block's ReLU);
    ``pooled`` average-pools it to a 2x2 grid and flattens it.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        layers = []
        ch = 3
        for i, w in enumerate(widths):
            for _ in range(2):
                conv = nn.Conv2d(ch, w, 3, 1, 1)
                with torch.no_grad():
                    conv.weight.normal_(0.0, math.sqrt(2.0 / (ch * 9)), generator=g)
                    conv.bias.zero_()
                layers += [conv, nn.ReLU()]
                ch = w
            if i < len(widths) - 1:
                layers.append(nn.AvgPool2d(2))
        self.net = nn.Sequential(*layers)
        self.requires_grad_(False)
        self.eval()
        self.identifier = f"random-conv:seed={seed}:widths={'-'.join(map(str, widths))}"

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        return self.net(x)

    def pooled(self, x):
        return F.adaptive_avg_pool2d(self.net(x), 2).flatten(1)


class ScriptedExtractor(nn.Module):
    """Wraps an externally supplied TorchScript feature network (e.g. a pretrained VGG slice)."""

    def __init__(self, path):
        super().__init__()
        self.net = torch.jit.load(str(path), map_location="cpu")
        self.net.requires_grad_(False)
        self.net.eval()
        self.identifier = f"torchscript:{Path(path).name}"

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        return self.net(x)

    def pooled(self, x):
        f = self.net(x)
        if f.dim() == 4:
            f = F.adaptive_avg_pool2d(f, 2).flatten(1)
        return f


def load_extractor(name: str) -> nn.Module:
    """``random:<seed>`` or ``torchscript:<path>``."""
    kind, _, arg = name.partition(":")
    if kind == "random":
        return RandomConvExtractor(int(arg or 0))
    if kind == "torchscript":
        return ScriptedExtractor(arg)
    raise ContractError(f"unknown extractor name {name!r}")


# -- bundle -----------------------------------------------------------------

class ModelBundle(nn.Module):
    """Every learnable network of the model plus the frozen perceptual extractor."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        s, w = cfg.image_size, cfg.width
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.content_enc = Encoder(cfg.d_content, w, s)
            self.app_enc_src = Encoder(cfg.d_appearance, w, s)
            self.app_enc_tar = Encoder(cfg.d_appearance, w, s)
            self.gen_src = Generator(cfg.d_content, cfg.d_appearance, w, s)
            self.gen_tar = Generator(cfg.d_content, cfg.d_appearance, w, s)
            self.disc_src = Discriminator(w, s)
            self.disc_tar = Discriminator(w, s)
            self.relation = RelationNet(w, s)
        # not a registered submodule: never saved, never trained
        object.__setattr__(self, "perceptual", load_extractor(cfg.perceptual_extractor))

    def net(self, name: str) -> nn.Module:
        if name not in NETWORKS:
            raise KeyError(name)
        return getattr(self, name)

    def freeze(self, *names: str) -> None:
        for name in names:
            self.net(name).requires_grad_(False)

    def unfreeze(self, *names: str) -> None:
        for name in names:
            self.net(name).requires_grad_(True)

    def is_frozen(self, name: str) -> bool:
        return not any(p.requires_grad for p in self.net(name).parameters())

    def encode_content(self, x) -> GaussianPosterior:
        return self.content_enc(x)

    def encode_appearance(self, x, domain: str) -> GaussianPosterior:
        return self._pick("app_enc", domain)(x)

    def generate(self, z_content, z_appearance, domain: str):
        return self._pick("gen", domain)(z_content, z_appearance)

    def discriminate(self, x, domain: str):
        return self._pick("disc", domain)(x)

    def relation_score(self, x_src, x_tar):
        return self.relation(x_src, x_tar)

    def perceptual_features(self, x):
        check_images(x, self.cfg.image_size)
        return self.perceptual(x)

    def _pick(self, prefix: str, domain: str) -> nn.Module:
        if domain == "source":
            return getattr(self, f"{prefix}_src")
        if domain == "target":
            return getattr(self, f"{prefix}_tar")
        raise ContractError(f"domain must be 'source' or 'target', got {domain!r}")
