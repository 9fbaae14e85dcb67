import dataclasses

import numpy as np
import pytest
import torch

from pairshot import losses as L
from pairshot import train as T
from pairshot.config import LossWeights, ModelConfig, TrainConfig
from pairshot.data import AugmentationConfig, PairedDataset, augment_target_pool
from pairshot.errors import CheckpointError, ConfigError, NonFiniteLossError, PhaseOrderError
from pairshot.toy import make_toy_arrays

MODEL = ModelConfig(image_size=16, d_content=8, d_appearance=3, width=8)


def small_cfg(**kw):
    base = dict(seed=0, batch_size=8, batch_size_stage2=4, batch_size_relation=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy():
    t = make_toy_arrays(40, 6, seed=0, size=16)
    d = PairedDataset(t.source, t.target, t.kappa)
    return d, augment_target_pool(d, AugmentationConfig(10.0, 2), seed=0)


def run_to_stage2(d, aug, cfg, s1=2, rel=2):
    state = T.new_state(MODEL, cfg)
    T.run_stage1(state, d, s1)
    if not cfg.disable_relation_loss:
        T.train_relation(state, d, rel)
    return state


def params(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def same_params(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def test_stage1_deterministic(toy):
    d, _ = toy
    runs = []
    for _ in range(2):
        state = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 3)
        runs.append(([r.to_line() for r in state.history], params(state.bundle)))
    assert runs[0][0] == runs[1][0]
    assert same_params(runs[0][1], runs[1][1])
    other = T.run_stage1(T.new_state(MODEL, small_cfg(seed=1)), d, 3)
    assert [r.to_line() for r in other.history] != runs[0][0]


def test_stage1_report_terms(toy):
    d, _ = toy
    state = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 2)
    for report in state.history:
        assert tuple(report.values) == T.STAGE1_TERMS
        assert all(np.isfinite(v) for v in report.values.values())


@pytest.mark.parametrize("ablation,expected", [
    ("full", set(T.STAGE2_TERMS)),
    ("no-relation", set(T.STAGE2_TERMS) - {"L_RG_tar"}),
    ("no-relation-no-adversarial", set(T.STAGE2_TERMS) - {"L_RG_tar", "L_IA_D_tar", "L_IA_G_tar"}),
])
def test_stage2_report_terms_per_ablation(toy, ablation, expected):
    d, aug = toy
    cfg = small_cfg().with_ablation(ablation)
    state = run_to_stage2(d, aug, cfg)
    T.run_stage2(state, d, aug, 2)
    for report in state.history[-2:]:
        assert report.stage == "stage2"
        assert set(report.values) == expected


def test_no_adversarial_requires_no_relation():
    with pytest.raises(ConfigError):
        TrainConfig(disable_stage2_adversarial=True)


def test_stage2_step_leaves_frozen_networks_unchanged(toy):
    d, aug = toy
    state = run_to_stage2(d, aug, small_cfg(check_frozen=False))
    before = {n: params(state.bundle.net(n)) for n in T.STAGE2_FROZEN}
    tar_before = params(state.bundle.gen_tar)
    T.run_stage2(state, d, aug, 1)
    for n in T.STAGE2_FROZEN:
        assert same_params(before[n], params(state.bundle.net(n))), n
    assert not same_params(tar_before, params(state.bundle.gen_tar))


def test_relation_training_changes_only_relation(toy):
    d, _ = toy
    state = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 1)
    before = {n: params(state.bundle.net(n)) for n in ("content_enc", "gen_src", "app_enc_src")}
    rel_before = params(state.bundle.relation)
    T.train_relation(state, d, 2)
    for n, p in before.items():
        assert same_params(p, params(state.bundle.net(n))), n
    assert not same_params(rel_before, params(state.bundle.relation))


def test_warm_start_copies_source_networks(toy):
    d, aug = toy
    state = run_to_stage2(d, aug, small_cfg(warm_start_generator=True))
    T.begin_stage2(state)
    assert same_params(params(state.bundle.gen_src), params(state.bundle.gen_tar))
    assert same_params(params(state.bundle.app_enc_src), params(state.bundle.app_enc_tar))


def test_generator_starts_fresh_by_default(toy):
    d, aug = toy
    state = run_to_stage2(d, aug, small_cfg())
    T.begin_stage2(state)
    assert not same_params(params(state.bundle.gen_src), params(state.bundle.gen_tar))
    assert same_params(params(state.bundle.app_enc_src), params(state.bundle.app_enc_tar))


def test_phase_order_errors(toy):
    d, aug = toy
    fresh = T.new_state(MODEL, small_cfg())
    with pytest.raises(PhaseOrderError):
        T.train_relation(fresh, d, 1)
    with pytest.raises(PhaseOrderError):
        T.run_stage2(fresh, d, aug, 1)
    after_s1 = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 1)
    with pytest.raises(PhaseOrderError):
        T.run_stage2(after_s1, d, aug, 1)
    # the no-relation ablation may skip relation training
    ablated = T.run_stage1(T.new_state(MODEL, small_cfg().with_ablation("no-relation")), d, 1)
    T.run_stage2(ablated, d, aug, 1)
    with pytest.raises(PhaseOrderError):
        T.run_stage1(ablated, d, 1)


def test_relation_needs_two_targets():
    t = make_toy_arrays(20, 1, seed=0, size=16)
    d = PairedDataset(t.source, t.target, t.kappa)
    state = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 1)
    with pytest.raises(ConfigError):
        T.train_relation(state, d, 1)


def test_relation_pairs_exclude_correspondence():
    kappa = torch.tensor([3, 0, 7])
    src, tar = T.sample_relation_pairs(torch.Generator().manual_seed(0), 5000, 8, kappa)
    assert (src != kappa[tar]).all()
    assert src.min() >= 0 and src.max() <= 7
    assert set(src.tolist()) == set(range(8))


def test_non_finite_loss_aborts_naming_term(toy, monkeypatch):
    d, _ = toy
    state = T.new_state(MODEL, small_cfg())
    monkeypatch.setattr(L, "kl_loss", lambda q: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLossError, match="L_KL_src") as info:
        T.run_stage1(state, d, 1)
    assert info.value.term == "L_KL_src"


def test_checkpoint_round_trip(toy, tmp_path):
    d, _ = toy
    state = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 3)
    path = T.save_checkpoint(state, tmp_path / "s1.pt")
    back = T.load_checkpoint(path)
    assert same_params(params(state.bundle), params(back.bundle))
    for name, opt in state.optimizers.items():
        a, b = opt.state_dict(), back.optimizers[name].state_dict()
        assert a["param_groups"] == b["param_groups"]
        for k in a["state"]:
            for key, v in a["state"][k].items():
                assert torch.equal(v, b["state"][k][key])
    assert (back.step, back.phase) == (3, "stage1")
    assert [r.to_line() for r in back.history] == [r.to_line() for r in state.history]


def _resume_matches(first_half, second_half, tmp_path):
    state_a = first_half()
    path = T.save_checkpoint(state_a, tmp_path / "mid.pt")
    second_half(state_a)
    state_b = T.load_checkpoint(path)
    second_half(state_b)
    assert [r.to_line() for r in state_a.history[-5:]] == [r.to_line() for r in state_b.history[-5:]]
    assert same_params(params(state_a.bundle), params(state_b.bundle))


def test_stage1_resume_equals_uninterrupted(toy, tmp_path):
    d, _ = toy
    _resume_matches(lambda: T.run_stage1(T.new_state(MODEL, small_cfg()), d, 3),
                    lambda s: T.run_stage1(s, d, 5), tmp_path)


def test_stage2_resume_equals_uninterrupted(toy, tmp_path):
    d, aug = toy

    def first():
        state = run_to_stage2(d, aug, small_cfg())
        return T.run_stage2(state, d, aug, 2)

    _resume_matches(first, lambda s: T.run_stage2(s, d, aug, 5), tmp_path)


def test_checkpoint_dimension_mismatch(toy, tmp_path):
    d, _ = toy
    state = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 1)
    path = T.save_checkpoint(state, tmp_path / "s1.pt")
    with pytest.raises(CheckpointError, match="d_content"):
        T.load_checkpoint(path, dataclasses.replace(MODEL, d_content=MODEL.d_content + 1))
    with pytest.raises(CheckpointError):
        T.load_checkpoint(tmp_path / "missing.pt")


def test_frozen_flags_survive_checkpoint(toy, tmp_path):
    d, aug = toy
    state = run_to_stage2(d, aug, small_cfg())
    T.run_stage2(state, d, aug, 1)
    back = T.load_checkpoint(T.save_checkpoint(state, tmp_path / "s2.pt"))
    for name in T.STAGE2_FROZEN:
        assert back.bundle.is_frozen(name)
    assert not back.bundle.is_frozen("gen_tar")


def test_stage1_reduces_reconstruction_on_small_set():
    drops = []
    for seed in range(3):
        t = make_toy_arrays(50, 2, seed=seed)
        d = PairedDataset(t.source, t.target, t.kappa)
        model = ModelConfig(d_content=16, d_appearance=4, width=8)
        state = T.run_stage1(T.new_state(model, TrainConfig(seed=seed)), d, 200)
        ir = [r.values["L_IR_src"] for r in state.history]
        drops.append(ir[0] - ir[-1])
    assert np.median(drops) > 0


def test_resume_with_new_config_uses_its_hyperparameters(toy, tmp_path):
    d, _ = toy
    state = T.run_stage1(T.new_state(MODEL, small_cfg()), d, 1)
    path = T.save_checkpoint(state, tmp_path / "s1.pt")
    back = T.load_checkpoint(path, cfg=small_cfg(lr=1e-3, lr_relation=5e-4))
    assert back.optimizers["gen_src"].param_groups[0]["lr"] == 1e-3
    assert back.optimizers["relation"].param_groups[0]["lr"] == 5e-4
