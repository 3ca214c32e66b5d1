import json

import numpy as np
import pytest
import torch

from diffuld.checkpoint import CheckpointError, ConfigMismatch, load_checkpoint, save_checkpoint
from diffuld.cli import main
from diffuld.config import PipelineConfig, desk_profile, paper_profile
from diffuld.evaluation import EvalReport
from diffuld.model import LandmarkNet, NetConfig
from diffuld.pipeline import (MissingPrerequisite, RUN_ROOT_ENV, STAGES, load_data, run_dir, run_pipeline,
                              run_stage, run_zeroshot)
from diffuld.selftrain import Interrupted

TINY = {"data.n_train": 30, "data.n_test": 10, "bootstrap.iterations": 60, "duld.total_iterations": 20,
        "duld.recluster_every": 10, "duld.n_init": 1, "proxy.total_iterations": 8,
        "duldpp.total_iterations": 20, "duldpp.recluster_every": 10, "duldpp.n_init": 1,
        "eval.consistency_images": 4}


def tiny(root, run_id="t", **extra):
    return desk_profile(run_root=str(root), run_id=run_id, **{**TINY, **extra})


@pytest.fixture(autouse=True)
def _no_env_root(monkeypatch):
    monkeypatch.delenv(RUN_ROOT_ENV, raising=False)


# --------------------------------------------------------------------------
# configuration


def test_full_scale_profile_constants():
    cfg = paper_profile()
    assert (cfg.k, cfg.q, cfg.vae.latent_dim) == (10, 5, 64)
    assert cfg.net.aggregated_channels == 128 and cfg.extract.max_keypoints == 3 * cfg.k
    assert cfg.bootstrap.lr == 1e-4 and cfg.duld.learning_rate == 1e-4
    assert cfg.proxy.learning_rate == 5e-5 and cfg.duldpp.learning_rate == 5e-4
    assert {cfg.bootstrap.batch_size, cfg.duld.batch_size, cfg.proxy.batch_size, cfg.duldpp.batch_size} == {12}
    assert cfg.duld.recluster_every == cfg.duldpp.recluster_every == 5000
    assert (cfg.bootstrap.iterations, cfg.duld.total_iterations, cfg.proxy.total_iterations,
            cfg.duldpp.total_iterations) == (50_000, 100_000, 50_000, 100_000)
    for s in (cfg.duld, cfg.proxy, cfg.duldpp):
        assert tuple(s.adam_betas) == (0.9, 0.999) and s.margin == 0.8
    assert tuple(cfg.bootstrap.betas) == (0.9, 0.999)


def test_zeroshot_default_k_is_10():
    assert PipelineConfig().k == 10


def test_desk_keypoint_cap_is_3k():
    cfg = desk_profile()
    assert cfg.extract.max_keypoints == 3 * cfg.k


def test_config_roundtrip_and_override(tmp_path):
    cfg = desk_profile()
    assert PipelineConfig.from_dict(json.loads(cfg.to_json())) == cfg
    changed = cfg.override("duld.total_iterations", "37").override("eval.pose_range_edges", "[0, 45, 90]")
    assert changed.duld.total_iterations == 37 and changed.eval.pose_range_edges == (0, 45, 90)
    with pytest.raises(KeyError):
        cfg.override("duld.nope", 1)
    with pytest.raises(ValueError):
        cfg.override("k", 0)
    (tmp_path / "c.json").write_text(changed.to_json())
    assert PipelineConfig.load(tmp_path / "c.json") == changed


def test_model_hash_tracks_shapes_only():
    cfg = desk_profile()
    assert cfg.override("duld.learning_rate", 0.5).model_hash() == cfg.model_hash()
    assert cfg.override("k", 7).model_hash() != cfg.model_hash()


# --------------------------------------------------------------------------
# checkpoints


@pytest.fixture(scope="module")
def probe_data(tmp_path_factory):
    return load_data(tiny(tmp_path_factory.mktemp("probe")))


def test_checkpoint_restores_identical_outputs(tmp_path, probe_data):
    net = LandmarkNet(probe_data.adapter, NetConfig(), seed=3)
    save_checkpoint(tmp_path, "duld", {"net": net.state_dict()}, "h1")
    other = LandmarkNet(probe_data.adapter, NetConfig(), seed=9)
    other.load_state_dict(load_checkpoint(tmp_path, "duld", "h1")["net"])
    stack = probe_data.test.raw([0, 1])
    with torch.no_grad():
        a, b = net(stack), other(stack)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_tampered_checkpoint_rejected(tmp_path):
    path = save_checkpoint(tmp_path, "bootstrap", {"x": torch.arange(10)}, "h")
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path, "bootstrap", "h")
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path, "bootstrap")


def test_changed_k_refused_unless_forced(tmp_path):
    cfg = desk_profile()
    save_checkpoint(tmp_path, "duld", {"v": 1}, cfg.model_hash())
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path, "duld", cfg.override("k", 8).model_hash())
    assert load_checkpoint(tmp_path, "duld", cfg.override("k", 8).model_hash(), force=True) == {"v": 1}


# --------------------------------------------------------------------------
# stages


def test_missing_prerequisite_is_named(tmp_path):
    with pytest.raises(MissingPrerequisite) as exc:
        run_stage("duldpp", tiny(tmp_path))
    assert exc.value.missing == "proxy" and "proxy" in str(exc.value)


def test_env_var_overrides_run_root(tmp_path, monkeypatch):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path / "env"))
    assert run_dir(tiny(tmp_path / "cfg")) == tmp_path / "env" / "t"


def test_zeroshot_noise_free_oracle_finds_every_identity(tmp_path):
    # side poses kept below the occlusion angle so every landmark is visible
    cfg = tiny(tmp_path, k=6, **{"backbone.noise_sigma": 0.0, "data.side_range": [40, 55]})
    landmarks, report = run_zeroshot(cfg)
    data = load_data(cfg)
    gt = np.stack([e.landmark_array() for e in data.test.entries])
    assert report.purity == 100.0
    assert np.isfinite(landmarks).all() and landmarks.shape == (10, 6, 2)
    # one discovered landmark per true identity
    owner = np.linalg.norm(landmarks[:, :, None] - gt[:, None], axis=-1).argmin(-1)
    assert all(sorted(row) == list(range(6)) for row in owner.tolist())
    again = run_zeroshot(cfg, write=False)[1]
    assert again.to_json() == report.to_json()


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = tiny(root)
    return cfg, run_pipeline(cfg, track=True)


def test_smoke_run_emits_one_report_per_stage(smoke):
    cfg, reports = smoke
    assert list(reports) == ["zeroshot", *STAGES]
    rd = run_dir(cfg)
    for stage in ("zeroshot", *STAGES):
        assert (rd / stage / "report.json").exists() and (rd / stage / "ced.csv").exists()
        assert (rd / stage / "clusters.bin").exists()
    for stage in STAGES:
        assert (rd / stage / "checkpoint.pt").exists() and (rd / stage / "losses.jsonl").exists()
        assert not (rd / stage / "resume.pt").exists()
    assert reports["duldpp"].clustering_accuracy is not None
    assert [h["iteration"] for h in reports["duld"].extra["recluster_history"]] == [0, 10, 20]
    extra = reports["proxy"].extra
    assert np.isfinite(extra["heldout_elbo_before"]) and np.isfinite(extra["heldout_elbo_after"])


def test_finished_stage_is_not_rerun(smoke):
    cfg, reports = smoke
    path = run_dir(cfg) / "duld" / "checkpoint.pt"
    stamp = path.stat().st_mtime_ns
    again = run_stage("duld", cfg)
    assert again.to_json() == reports["duld"].to_json() and path.stat().st_mtime_ns == stamp


def test_eval_stage_writes_separate_directory(smoke):
    cfg, reports = smoke
    rep = run_stage("eval", cfg)
    assert rep.stage == "duldpp"
    assert (run_dir(cfg) / "eval" / "duldpp" / "report.json").exists()
    assert rep.forward_nme == pytest.approx(reports["duldpp"].forward_nme)


def test_resume_after_interrupt_matches_clean_run(tmp_path, smoke):
    cfg_clean, reports = smoke
    cfg = tiny(tmp_path)
    run_stage("bootstrap", cfg)
    with pytest.raises(Interrupted):
        run_stage("duld", cfg, stop_after=13)
    assert (run_dir(cfg) / "duld" / "resume.pt").exists()
    resumed = load_checkpoint(run_dir(cfg), "duld", cfg.model_hash(), name="resume.pt")
    assert resumed["iteration"] == 10
    rep = run_stage("duld", cfg)
    assert not (run_dir(cfg) / "duld" / "resume.pt").exists()
    assert rep.to_json() == reports["duld"].to_json()
    clean = (run_dir(cfg_clean) / "duld" / "losses.jsonl").read_text()
    assert (run_dir(cfg) / "duld" / "losses.jsonl").read_text() == clean


# --------------------------------------------------------------------------
# command line


def test_cli_synth_and_ingest(tmp_path, capsys):
    assert main(["synth-data", str(tmp_path / "d"), "--n-train", "4", "--n-test", "2", "--seed", "1"]) == 0
    assert main(["ingest", str(tmp_path / "d")]) == 0
    assert "6 entries, 6 landmarks, 0 missing" in capsys.readouterr().out
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "annotations.jsonl").write_text("{oops\n")
    assert main(["ingest", str(tmp_path / "bad")]) == 2


def test_cli_save_config_mirrors_flags(tmp_path):
    out = tmp_path / "cfg.json"
    assert main(["bootstrap", "--k", "7", "--set", "duld.batch_size=3", "--run-id", "x", "--save-config",
                 str(out)]) == 0
    cfg = PipelineConfig.load(out)
    assert (cfg.k, cfg.duld.batch_size, cfg.run_id) == (7, 3, "x")
    assert main(["bootstrap", "--config", str(out), "--save-config", str(tmp_path / "again.json")]) == 0
    assert PipelineConfig.load(tmp_path / "again.json") == cfg


def test_cli_missing_prerequisite_exit_code(tmp_path, capsys):
    assert main(["train-duldpp", "--run-root", str(tmp_path)]) == 3
    assert "proxy" in capsys.readouterr().err
    assert main(["eval", "--run-root", str(tmp_path)]) == 3


def test_cli_zeroshot_on_written_dataset(tmp_path, capsys):
    main(["synth-data", str(tmp_path / "d"), "--n-train", "12", "--n-test", "4"])
    code = main(["zeroshot", "--data-root", str(tmp_path / "d"), "--k", "6", "--run-root", str(tmp_path / "r")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[-2])
    assert summary["purity"] >= 90.0
    assert (tmp_path / "r" / "default" / "zeroshot" / "report.json").exists()


def test_cli_plot(smoke, tmp_path, capsys):
    cfg, _ = smoke
    assert main(["plot", str(run_dir(cfg)), "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"ced.png", "duld_history.png", "duldpp_history.png"} <= names
    assert all((tmp_path / n).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for n in names)


def test_report_json_is_stable(smoke):
    cfg, reports = smoke
    text = (run_dir(cfg) / "duldpp" / "report.json").read_text()
    assert EvalReport.from_json(text).to_json() == text
