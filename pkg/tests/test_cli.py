import subprocess
import sys

import pytest

from pairshot.cli import main
from pairshot.evaluate import read_report

TINY = ["model.image_size=16", "data.image_size=16", "model.width=8", "model.d_content=8",
        "model.d_appearance=3", "train.steps_stage1=3", "train.steps_relation=3", "train.steps_stage2=3",
        "train.batch_size=8", "train.batch_size_relation=8", "train.batch_size_stage2=4",
        "data.copies_per_sample=2", "eval.n_generated=20"]


def overrides(toy, *extra):
    items = TINY + [f"data.source_dir={toy / 'source'}", f"data.target_dir={toy / 'target'}",
                    f"data.manifest={toy / 'manifest.tsv'}", f"data.eval_dir={toy / 'target_eval'}", *extra]
    return [arg for item in items for arg in ("--override", item)]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "data"
    assert main(["make-toy", str(out), "--n-src", "40", "--n-tar", "4", "--n-eval", "12", "--size", "16"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(toy, tmp_path_factory):
    run = tmp_path_factory.mktemp("run") / "full"
    assert main(["train", "--run-dir", str(run), "--seed", "1", *overrides(toy)]) == 0
    return run


def test_full_pipeline_writes_phase_checkpoints(run_dir):
    for name in ("stage1.pt", "relation.pt", "stage2.pt", "config.ini",
                 "stage1.log", "relation.log", "stage2.log"):
        assert (run_dir / name).is_file(), name
    assert "L_RG_tar" in (run_dir / "stage2.log").read_text()
    assert "seed = 1" in (run_dir / "config.ini").read_text()


def test_rerun_is_byte_identical(toy, run_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--run-dir", str(again), "--seed", "1", *overrides(toy)]) == 0
    for name in ("stage1.log", "relation.log", "stage2.log", "config.ini"):
        assert (again / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_stage2_without_checkpoint_is_phase_error(toy, tmp_path, capsys):
    code = main(["train", "--run-dir", str(tmp_path / "empty"), "--stage", "2", *overrides(toy)])
    assert code != 0
    assert "PhaseOrderError" in capsys.readouterr().err


def test_no_relation_ablation_has_no_relation_term(toy, tmp_path):
    run = tmp_path / "abl"
    assert main(["train", "--run-dir", str(run), "--ablation", "no-relation", *overrides(toy)]) == 0
    log = (run / "stage2.log").read_text()
    assert log and "L_RG_tar" not in log
    assert not (run / "relation.pt").exists()


def test_stage2_resumes_from_relation_checkpoint(toy, run_dir, tmp_path):
    run = tmp_path / "resume"
    run.mkdir()
    (run / "relation.pt").write_bytes((run_dir / "relation.pt").read_bytes())
    assert main(["train", "--run-dir", str(run), "--stage", "2", "--seed", "1", *overrides(toy)]) == 0
    assert (run / "stage2.log").read_bytes() == (run_dir / "stage2.log").read_bytes()


def test_generate_rand(toy, run_dir, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert main(["generate", "--checkpoint", str(run_dir / "stage2.pt"), "--n", "64", "--seed", "3",
                     "--out", str(out), *overrides(toy)]) == 0
    samples = sorted(out_a.glob("sample_*.png"))
    assert len(samples) == 64 and (out_a / "grid.png").is_file()
    for f in samples + [out_a / "grid.png"]:
        assert f.read_bytes() == (out_b / f.name).read_bytes()


def test_generate_syn_needs_manifest(toy, run_dir, tmp_path, capsys):
    ok = main(["generate", "--checkpoint", str(run_dir / "stage2.pt"), "--manner", "syn", "--n", "4",
               "--out", str(tmp_path / "syn"), *overrides(toy)])
    assert ok == 0
    code = main(["generate", "--checkpoint", str(run_dir / "stage2.pt"), "--manner", "syn", "--n", "4",
                 "--out", str(tmp_path / "syn2"), *overrides(toy, f"data.manifest={toy / 'missing.tsv'}")])
    assert code != 0
    assert "LoadError" in capsys.readouterr().err


def test_generate_rejects_stage1_checkpoint(toy, run_dir, tmp_path):
    assert main(["generate", "--checkpoint", str(run_dir / "stage1.pt"), "--out", str(tmp_path / "x"),
                 *overrides(toy)]) != 0


def test_evaluate_report(toy, run_dir, tmp_path):
    paths = []
    for name in ("a.tsv", "b.tsv"):
        paths.append(tmp_path / name)
        assert main(["evaluate", "--checkpoint", str(run_dir / "stage2.pt"), "--manner", "rand", "--seed", "0",
                     "--out", str(paths[-1]), *overrides(toy)]) == 0
    rows = read_report(paths[0])
    assert sorted(r["metric"] for r in rows) == ["FID", "KID"]
    assert {r["manner"] for r in rows} == {"rand"}
    assert all(r["reference"] == "held-out" and r["n_real"] == "12" for r in rows)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_baseline_and_full_rows_comparable(toy, run_dir, tmp_path):
    run = tmp_path / "base"
    assert main(["train", "--run-dir", str(run), "--stage", "baseline", *overrides(toy)]) == 0
    rows = {}
    for name, ckpt in (("base", run / "baseline.pt"), ("full", run_dir / "stage2.pt")):
        out = tmp_path / f"{name}.tsv"
        assert main(["evaluate", "--checkpoint", str(ckpt), "--out", str(out), *overrides(toy)]) == 0
        rows[name] = read_report(out)
    strip = [{k: v for k, v in r.items() if k != "value"} for r in rows["base"]]
    assert strip == [{k: v for k, v in r.items() if k != "value"} for r in rows["full"]]


def test_bad_override_exits_nonzero(toy, tmp_path):
    assert main(["train", "--run-dir", str(tmp_path / "r"), "--override", "train.nope=1"]) != 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pairshot", "make-toy", str(tmp_path / "t"), "--n-src", "3",
                           "--n-tar", "5"], capture_output=True, text=True)
    assert proc.returncode != 0 and "ContractError" in proc.stderr
