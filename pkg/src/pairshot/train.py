"""Training phases: source disentanglement, relation-network fitting, target generator.

Every random draw during training goes through ``TrainState.rng`` so a
checkpoint (which stores that generator's state) resumes bit-identically.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .config import ModelConfig, TrainConfig
from .data import PairedDataset, to_tensor
from .errors import CheckpointError, ConfigError, PhaseOrderError
from .nets import NETWORKS, GaussianPosterior, ModelBundle

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
PHASES = ("init", "stage1", "relation", "stage2", "baseline")

# optimizer name -> networks it updates
OPTIMIZER_GROUPS = {
    "disc_src": ("disc_src",),
    "gen_src": ("content_enc", "app_enc_src", "gen_src"),
    "relation": ("relation",),
    "disc_tar": ("disc_tar",),
    "gen_tar": ("app_enc_tar", "gen_tar"),
}

STAGE1_TERMS = ("L_IA_D_src", "L_IR_src", "L_KL_src", "L_P", "L_AR_src", "L_IA_G_src")
STAGE2_TERMS = ("L_IA_D_tar", "L_IR_tar", "L_KL_tar", "L_AR_tar", "L_IA_G_tar", "L_RG_tar")
STAGE2_FROZEN = ("content_enc", "app_enc_src", "gen_src", "disc_src", "relation")


@dataclass
class TrainState:
    bundle: ModelBundle
    cfg: TrainConfig
    optimizers: dict
    rng: torch.Generator
    step: int = 0
    phase: str = "init"
    history: list = field(default_factory=list)
    frozen_reference: dict = field(default_factory=dict, repr=False)

    @property
    def model_cfg(self) -> ModelConfig:
        return self.bundle.cfg


def new_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    bundle = ModelBundle(model_cfg, seed=cfg.seed)
    return TrainState(bundle, cfg, _make_optimizers(bundle, cfg),
                      torch.Generator().manual_seed(cfg.seed))


def _make_optimizers(bundle: ModelBundle, cfg: TrainConfig) -> dict:
    opts = {}
    for name, nets in OPTIMIZER_GROUPS.items():
        params = [p for n in nets for p in bundle.net(n).parameters()]
        lr = cfg.lr_relation if name == "relation" else cfg.lr
        opts[name] = torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2))
    return opts


@contextlib.contextmanager
def no_param_grad(*modules):
    """Temporarily stop gradients into ``modules`` while still backpropagating through them."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _randn(state: TrainState, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=state.rng)


def _randint(state: TrainState, high: int, n: int) -> torch.Tensor:
    return torch.randint(0, high, (n,), generator=state.rng)


def _update(opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def _emit(state: TrainState, report: L.LossReport, on_report: Callable | None) -> None:
    state.history.append(report)
    if on_report is not None:
        on_report(report)


# -- stage 1 ------------------------------------------------------------------

def train_stage1_step(state: TrainState, batch: torch.Tensor, on_report=None) -> L.LossReport:
    """One hinge-discriminator update, then one update of both source encoders and G_src."""
    if state.phase not in ("init", "stage1"):
        raise PhaseOrderError(f"stage-1 step requested in phase {state.phase!r}")
    state.phase = "stage1"
    b, w = state.bundle, state.cfg.stage1_weights
    report = L.LossReport("stage1", state.step + 1)

    q_content = b.content_enc(batch)
    q_app = b.app_enc_src(batch)
    z_content = q_content.sample(state.rng)
    x_rec = b.gen_src(z_content, q_app.sample(state.rng))
    z_app_prior = _randn(state, len(batch), state.model_cfg.d_appearance)
    x_swap = b.gen_src(z_content, z_app_prior)

    d_loss = L.hinge_d_loss(b.disc_src(batch), b.disc_src(x_swap.detach()))
    L.check_finite("L_IA_D_src", d_loss, "stage1", report.step)
    _update(state.optimizers["disc_src"], d_loss)
    report.add("L_IA_D_src", d_loss)

    with no_param_grad(b.disc_src):
        terms = {
            "L_IR_src": L.image_recon_loss(x_rec, batch),
            "L_KL_src": L.kl_loss(q_content) + L.kl_loss(q_app),
            "L_P": L.perceptual_loss(x_rec, x_swap, b.perceptual),
            "L_AR_src": L.appearance_recon_loss(b.app_enc_src(x_swap).mean, z_app_prior),
            "L_IA_G_src": L.hinge_g_loss(b.disc_src(x_swap)),
        }
        weights = {"L_IR_src": w.recon, "L_KL_src": w.kl, "L_P": w.perceptual,
                   "L_AR_src": w.appearance_recon, "L_IA_G_src": w.adversarial}
        for name, value in terms.items():
            L.check_finite(name, value, "stage1", report.step)
        total = sum(weights[k] * v for k, v in terms.items())
        _update(state.optimizers["gen_src"], total)
    for name, value in terms.items():
        report.add(name, value)
    state.step += 1
    _emit(state, report, on_report)
    return report


def run_stage1(state: TrainState, d: PairedDataset, steps: int | None = None, on_report=None,
               on_step=None) -> TrainState:
    source = to_tensor(d.source)
    steps = state.cfg.steps_stage1 if steps is None else steps
    bs = min(state.cfg.batch_size, len(source))
    for _ in range(steps):
        idx = torch.randperm(len(source), generator=state.rng)[:bs]
        train_stage1_step(state, source[idx], on_report)
        if on_step is not None:
            on_step(state)
    return state


# -- relation network ------------------------------------------------------------

@torch.no_grad()
def content_posteriors(bundle: ModelBundle, images: torch.Tensor, chunk: int = 256) -> GaussianPosterior:
    means, logvars = [], []
    for start in range(0, len(images), chunk):
        q = bundle.content_enc(images[start:start + chunk])
        means.append(q.mean)
        logvars.append(q.logvar)
    return GaussianPosterior(torch.cat(means), torch.cat(logvars))


def sample_relation_pairs(gen: torch.Generator, n: int, n_source: int, kappa: torch.Tensor):
    """Draw ``n`` (source j, target i) index pairs with j != kappa(i)."""
    tar = torch.randint(0, len(kappa), (n,), generator=gen)
    src = torch.randint(0, n_source - 1, (n,), generator=gen)
    src = src + (src >= kappa[tar]).long()
    return src, tar


@dataclass
class PreparedData:
    """Tensors reused by every relation / stage-2 step (content means are fixed once E^C is frozen)."""

    source: torch.Tensor
    target: torch.Tensor
    kappa: torch.Tensor
    content: GaussianPosterior
    augmented: torch.Tensor | None = None

    @classmethod
    def build(cls, bundle: ModelBundle, d: PairedDataset, aug: np.ndarray | None = None) -> "PreparedData":
        source = to_tensor(d.source)
        return cls(source, to_tensor(d.target), torch.tensor(np.array(d.kappa), dtype=torch.long),
                   content_posteriors(bundle, source),
                   None if aug is None else to_tensor(aug))


def _check_relation_data(data: PreparedData) -> None:
    if len(data.kappa) < 2:
        raise ConfigError("relation training needs at least 2 target samples")
    if len(data.source) < 2:
        raise ConfigError("relation training needs at least 2 source samples")


def relation_step(state: TrainState, data: PreparedData, on_report=None) -> L.LossReport:
    b = state.bundle
    report = L.LossReport("relation", state.step + 1)
    src, tar = sample_relation_pairs(state.rng, state.cfg.batch_size_relation, len(data.source), data.kappa)
    loss = L.relation_train_loss(b.relation, data.source[src], data.target[tar], src, tar,
                                 data.kappa, data.content.mean)
    L.check_finite("L_RT_tar", loss, "relation", report.step)
    _update(state.optimizers["relation"], loss)
    report.add("L_RT_tar", loss)
    state.step += 1
    _emit(state, report, on_report)
    return report


def _freeze_for_relation(state: TrainState) -> None:
    state.bundle.freeze("content_enc", "app_enc_src", "gen_src", "disc_src")
    state.bundle.unfreeze("relation")


def train_relation(state: TrainState, d: PairedDataset | PreparedData, steps: int | None = None,
                   on_report=None, on_step=None) -> TrainState:
    """Fit R to content distances of non-corresponding cross-domain pairs; only R changes."""
    if state.phase not in ("stage1", "relation"):
        raise PhaseOrderError(f"relation training requires a trained stage 1 (phase is {state.phase!r})")
    data = d if isinstance(d, PreparedData) else PreparedData.build(state.bundle, d)
    _check_relation_data(data)
    state.phase = "relation"
    _freeze_for_relation(state)
    steps = state.cfg.steps_relation if steps is None else steps
    for _ in range(steps):
        relation_step(state, data, on_report)
        if on_step is not None:
            on_step(state)
    return state


@torch.no_grad()
def relation_probe(bundle: ModelBundle, data: PreparedData, n_pairs: int = 256, seed: int = 0) -> dict:
    """Mean |R - D_c| and mean D_c over a fixed set of admissible training pairs."""
    gen = torch.Generator().manual_seed(seed)
    src, tar = sample_relation_pairs(gen, n_pairs, len(data.source), data.kappa)
    target = L.relation_targets(data.content.mean, src, tar, data.kappa)
    pred = torch.cat([bundle.relation(data.source[src[k:k + 128]], data.target[tar[k:k + 128]])
                      for k in range(0, n_pairs, 128)])
    err = (pred - target).abs().mean().item()
    mean_dc = target.mean().item()
    return {"mean_abs_error": err, "mean_distance": mean_dc, "relative_error": err / mean_dc}


# -- stage 2 ------------------------------------------------------------------

def begin_stage2(state: TrainState) -> None:
    """Warm-start the target networks and freeze everything stage 2 must not touch."""
    if state.phase == "stage2":
        return
    if state.phase != "relation" and not state.cfg.disable_relation_loss:
        raise PhaseOrderError("stage 2 needs a trained relation network")
    if state.phase not in ("stage1", "relation"):
        raise PhaseOrderError(f"stage 2 requires a trained stage 1 (phase is {state.phase!r})")
    b = state.bundle
    if state.cfg.warm_start_appearance:
        b.app_enc_tar.load_state_dict(b.app_enc_src.state_dict())
    if state.cfg.warm_start_generator:
        b.gen_tar.load_state_dict(b.gen_src.state_dict())
    b.freeze(*STAGE2_FROZEN)
    b.unfreeze("app_enc_tar", "gen_tar", "disc_tar")
    if state.cfg.relation_joint:
        b.unfreeze("relation")
    state.phase = "stage2"


def _snapshot_frozen(state: TrainState) -> None:
    state.frozen_reference = {
        name: {k: v.clone() for k, v in state.bundle.net(name).state_dict().items()}
        for name in STAGE2_FROZEN if not (name == "relation" and state.cfg.relation_joint)
    }


def _assert_frozen(state: TrainState) -> None:
    for name, ref in state.frozen_reference.items():
        for key, value in state.bundle.net(name).state_dict().items():
            assert torch.equal(value, ref[key]), f"frozen parameter {name}.{key} changed during stage 2"


def _sample_codes(state: TrainState, q: GaussianPosterior, idx: torch.Tensor) -> torch.Tensor:
    return q.select(idx).sample(state.rng)


def train_stage2_step(state: TrainState, data: PreparedData, on_report=None) -> L.LossReport:
    """One D_tar update, then one update of E^A_tar and G_tar on the weighted stage-2 objective."""
    if state.phase != "stage2":
        raise PhaseOrderError("call begin_stage2 before stage-2 steps")
    if data.augmented is None:
        raise ConfigError("stage 2 needs the augmented target pool")
    cfg, b, w = state.cfg, state.bundle, state.cfg.stage2_weights
    use_adv = not cfg.disable_stage2_adversarial
    use_rel = not cfg.disable_relation_loss
    report = L.LossReport("stage2", state.step + 1)
    n_tar, n_src = len(data.target), len(data.source)
    bs = min(cfg.batch_size_stage2, n_tar)

    tar_idx = torch.randperm(n_tar, generator=state.rng)[:bs]
    x_tar = data.target[tar_idx]
    z_pair = _sample_codes(state, data.content, data.kappa[tar_idx])
    x_aug = data.augmented[_randint(state, len(data.augmented), bs)]
    syn_idx = _randint(state, n_src, bs)
    z_syn = _sample_codes(state, data.content, syn_idx)

    q_tar = b.app_enc_tar(x_tar)
    z_app_tar = q_tar.sample(state.rng)
    q_aug = b.app_enc_tar(x_aug)
    z_app_aug = q_aug.sample(state.rng).detach()

    terms, weights = {}, {}
    if use_adv:
        x_syn = b.gen_tar(z_syn, z_app_tar)
        d_loss = L.hinge_d_loss(b.disc_tar(x_tar), b.disc_tar(x_syn.detach()))
        L.check_finite("L_IA_D_tar", d_loss, "stage2", report.step)
        _update(state.optimizers["disc_tar"], d_loss)
        report.add("L_IA_D_tar", d_loss)

    with no_param_grad(b.disc_tar, b.relation):
        x_rec = b.gen_tar(z_pair, z_app_tar)
        terms["L_IR_tar"], weights["L_IR_tar"] = L.image_recon_loss(x_rec, x_tar), w.recon
        terms["L_KL_tar"], weights["L_KL_tar"] = L.kl_loss(q_aug), w.kl
        x_ar = b.gen_tar(z_pair, z_app_aug)
        terms["L_AR_tar"] = L.appearance_recon_loss(b.app_enc_tar(x_ar).mean, z_app_aug)
        weights["L_AR_tar"] = w.appearance_recon
        if use_adv:
            terms["L_IA_G_tar"], weights["L_IA_G_tar"] = L.hinge_g_loss(b.disc_tar(x_syn)), w.adversarial
        if use_rel:
            n_pairs = cfg.batch_size
            i = _randint(state, n_src, n_pairs)
            j = (i + 1 + _randint(state, n_src - 1, n_pairs)) % n_src
            z_i, z_j = data.content.mean[i], data.content.mean[j]
            with torch.no_grad():
                x_src_gen = b.gen_src(z_i, _randn(state, n_pairs, state.model_cfg.d_appearance))
            z_app_rel = z_app_tar.detach()[_randint(state, bs, n_pairs)]
            x_tar_gen = b.gen_tar(z_j, z_app_rel)
            terms["L_RG_tar"] = L.relation_gen_loss(b.relation, x_src_gen, x_tar_gen, z_i, z_j, i, j)
            weights["L_RG_tar"] = w.relation
        if cfg.stage2_perceptual:
            z_alt = _randn(state, bs, state.model_cfg.d_appearance)
            terms["L_P_tar"] = L.perceptual_loss(x_rec, b.gen_tar(z_pair, z_alt), b.perceptual)
            weights["L_P_tar"] = w.perceptual
        for name, value in terms.items():
            L.check_finite(name, value, "stage2", report.step)
        total = sum(weights[k] * v for k, v in terms.items())
        _update(state.optimizers["gen_tar"], total)
    for name, value in terms.items():
        report.add(name, value)

    if cfg.relation_joint:
        src, tar = sample_relation_pairs(state.rng, cfg.batch_size_relation, n_src, data.kappa)
        rt = L.relation_train_loss(b.relation, data.source[src], data.target[tar], src, tar,
                                   data.kappa, data.content.mean)
        L.check_finite("L_RT_tar", rt, "stage2", report.step)
        _update(state.optimizers["relation"], rt)
        report.add("L_RT_tar", rt)

    state.step += 1
    if cfg.check_frozen:
        if not state.frozen_reference:
            raise AssertionError("no frozen-parameter snapshot; use run_stage2 or call _snapshot_frozen")
        _assert_frozen(state)
    _emit(state, report, on_report)
    return report


def run_stage2(state: TrainState, d: PairedDataset | PreparedData, aug: np.ndarray | None = None,
               steps: int | None = None, on_report=None, on_step=None) -> TrainState:
    begin_stage2(state)
    if isinstance(d, PreparedData):
        data = d if aug is None else dataclasses.replace(d, augmented=to_tensor(aug))
    else:
        data = PreparedData.build(state.bundle, d, aug)
    if state.cfg.relation_joint:
        _check_relation_data(data)
    _snapshot_frozen(state)
    steps = state.cfg.steps_stage2 if steps is None else steps
    for _ in range(steps):
        train_stage2_step(state, data, on_report)
        if on_step is not None:
            on_step(state)
    return state


# -- checkpoints ----------------------------------------------------------------

def _meta(state: TrainState) -> dict:
    m = state.model_cfg
    return {
        "format": CHECKPOINT_FORMAT,
        "image_size": m.image_size, "d_content": m.d_content, "d_appearance": m.d_appearance,
        "width": m.width, "perceptual_extractor": m.perceptual_extractor,
        "phase": state.phase, "step": state.step, "seed": state.cfg.seed,
        "frozen": {name: state.bundle.is_frozen(name) for name in NETWORKS},
    }


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "meta": _meta(state),
        "train_config": dataclasses.asdict(state.cfg),
        "nets": {name: state.bundle.net(name).state_dict() for name in NETWORKS},
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers.items()},
        "rng": state.rng.get_state(),
        "history": [r.to_line() for r in state.history],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint_meta(path) -> dict:
    return _read(path)["meta"]


def _read(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("meta", {}).get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a format-{CHECKPOINT_FORMAT} checkpoint")
    return payload


def _train_config_from(raw: dict) -> TrainConfig:
    raw = dict(raw)
    for key in ("stage1_weights", "stage2_weights"):
        raw[key] = type(TrainConfig().stage1_weights)(**raw[key])
    return TrainConfig(**raw)


def load_checkpoint(path, model_cfg: ModelConfig | None = None, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState. ``model_cfg``, when given, must match the stored dimensions."""
    payload = _read(path)
    meta = payload["meta"]
    stored = ModelConfig(image_size=meta["image_size"], d_content=meta["d_content"],
                         d_appearance=meta["d_appearance"], width=meta["width"],
                         perceptual_extractor=meta["perceptual_extractor"])
    if model_cfg is not None:
        for key in ("image_size", "d_content", "d_appearance", "width"):
            if getattr(model_cfg, key) != getattr(stored, key):
                raise CheckpointError(
                    f"checkpoint {key}={getattr(stored, key)} does not match configured {getattr(model_cfg, key)}")
    cfg = cfg if cfg is not None else _train_config_from(payload["train_config"])
    state = new_state(stored, cfg)
    for name in NETWORKS:
        state.bundle.net(name).load_state_dict(payload["nets"][name])
        state.bundle.net(name).requires_grad_(not meta["frozen"][name])
    for name, opt in state.optimizers.items():
        opt.load_state_dict(payload["optimizers"][name])
        # moments come from the file, hyperparameters from the (possibly new) config
        for group in opt.param_groups:
            group["lr"] = cfg.lr_relation if name == "relation" else cfg.lr
            group["betas"] = (cfg.beta1, cfg.beta2)
    state.rng.set_state(payload["rng"])
    state.step = meta["step"]
    state.phase = meta["phase"]
    state.history = [L.LossReport.from_line(line) for line in payload["history"]]
    return state
