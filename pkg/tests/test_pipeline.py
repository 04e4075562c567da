import json

import numpy as np
import pytest
import torch

from pkgnet import config as C
from pkgnet import pipeline as P
from pkgnet.cli import main
from pkgnet.loss import LossWeights, compute_losses
from pkgnet.model import forward

TINY = {
    "data.source": "synthetic",
    "data.synthetic": {"n_train_videos": 2, "n_test_videos": 2, "frames_per_video": 40, "seed": 5},
    "teacher.backbone": "resnet18",
    "teacher.pretrained_weights": "random:0",
    "student.width": 8,
    "train.epochs": 3,
    "train.batch_size": 32,
    "train.learning_rate": 1e-3,
    "score.w_e": 0.5,
    "score.w_c": {1: 0.25, 2: 0.25},
    "score.window": 3,
}


def tiny(**extra):
    return C.load(None, {**TINY, **extra})


# ------------------------------------------------------------------ config

def test_defaults_match_recipe():
    cfg = C.Config()
    assert cfg.train.learning_rate == 1e-4 and cfg.train.lr_decay_factor == 0.8
    assert cfg.train.lr_decay_every == 60 and tuple(cfg.train.adam_betas) == (0.9, 0.999)
    assert (cfg.loss.lambda_e, cfg.loss.lambda_g, cfg.loss.lambda_c) == (0.7, 0.1, 0.2)


def test_lr_schedule():
    cfg = C.Config()
    assert all(P.lr_at_epoch(cfg, e) == 1e-4 for e in range(60))
    assert all(P.lr_at_epoch(cfg, e) == pytest.approx(0.8e-4) for e in range(60, 120))
    # the optimizer follows the same steps
    st = torch.nn.Linear(2, 2)
    opt, sched = P.make_optimizer(st, cfg)
    seen = []
    for e in range(121):
        seen.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    assert seen[59] == 1e-4 and seen[60] == pytest.approx(0.8e-4) and seen[120] == pytest.approx(0.64e-4)


def test_config_roundtrip(tmp_path):
    for name in C.preset_names():
        cfg = C.load(name)
        C.dump(cfg, tmp_path / f"{name}.yaml")
        assert C.load(tmp_path / f"{name}.yaml") == cfg


def test_presets():
    ped2 = C.load("ped2")
    assert ped2.teacher.tap_blocks == [1, 2] and ped2.score.w_c == {1: 0.65, 2: 0.35}
    assert ped2.score.w_e == 0.01 and (ped2.train.batch_size, ped2.train.epochs) == (128, 120)
    av = C.load("avenue")
    assert av.teacher.tap_blocks == [2] and av.teacher.backbone == "resnext50"
    sh = C.load("shanghaitech")
    assert (sh.train.batch_size, sh.train.epochs) == (256, 80) and sh.score.w_e == 0.85


def test_validation_lists_everything():
    with pytest.raises(C.ConfigError) as ei:
        C.load(None, {"data.root": "x", "score.window": 4, "loss.lambda_e": -1, "teacher.tap_blocks": []})
    assert len(ei.value.problems) >= 3


def test_unknown_key():
    with pytest.raises(C.ConfigError, match="unknown key train.epochz"):
        C.load(None, {"train.epochz": 3})


def test_missing_config_file():
    with pytest.raises(C.ConfigError, match="missing config file"):
        C.load("no/such/file.yaml")


# ------------------------------------------------------------------ training

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny()
    m, report = P.run_all(cfg, out)
    return out, cfg, m, report


def test_run_artifacts(trained):
    out, cfg, m, report = trained
    for name in ("config.yaml", "manifest.json", "stats.json", "scores.json", "eval_report.json"):
        assert (out / name).is_file(), name
    assert len(m.history) == 3 and m.final_checkpoint.endswith("final.pt")
    assert [h["lr"] for h in m.history] == [1e-3] * 3
    assert 0.0 <= report.auroc_micro <= 1.0
    assert C.load(out / "config.yaml") == cfg


def test_loss_decreases(trained):
    h = trained[2].history
    assert h[-1]["total"] < h[0]["total"]


def test_seed_reproducible(trained, tmp_path):
    m2 = P.train(tiny(), tmp_path)
    for a, b in zip(trained[2].history, m2.history):
        for k in ("L_e", "L_g", "L_c", "total"):
            assert b[k] == pytest.approx(a[k], rel=1e-5, abs=1e-12)


def test_ae_only_has_zero_lc(tmp_path):
    m = P.train(tiny(**{"student.mode": "AE_only", "train.epochs": 2}), tmp_path)
    assert all(h["L_c"] == 0.0 for h in m.history)


def test_checkpoint_cadence(tmp_path):
    m = P.train(tiny(**{"train.epochs": 4, "train.checkpoint_every": 2}), tmp_path)
    assert [p.rsplit("/", 1)[1] for p in m.checkpoints] == ["epoch_0002.pt", "final.pt"]


def test_non_finite_loss_aborts(pkg_pair):
    teacher, st = pkg_pair
    cfg = tiny()
    opt, _ = P.make_optimizer(st, cfg)
    batch = torch.full((2, 5, 3, 32, 32), float("nan"))
    with pytest.raises(P.TrainingError, match="non-finite"):
        P.train_step(st, teacher, opt, batch, cfg)


def test_override_equivalence_loss_level(pkg_pair):
    # lambda_c = 0 in PKG mode gives the same objective as AE_only mode
    teacher, st = pkg_pair
    clip = torch.rand(4, 5, 3, 32, 32)
    out = forward(st, teacher, clip)
    a = compute_losses(out, clip[:, -1], LossWeights(1.0, 0.1, 0.0), "PKG").total
    b = compute_losses(out, clip[:, -1], LossWeights(1.0, 0.1, 0.2), "AE_only").total
    assert a.item() == b.item()


def test_artifact_sufficiency(trained, tmp_path):
    # rescoring from the run directory alone reproduces the stored scores
    out = trained[0]
    before = json.loads((out / "scores.json").read_text())
    P.calibrate_run(out)
    P.score_run(out)
    after = json.loads((out / "scores.json").read_text())
    for vid in before["videos"]:
        np.testing.assert_allclose(after["videos"][vid]["raw"], before["videos"][vid]["raw"], atol=1e-6)
    r = P.eval_run(out)
    assert r.auroc_micro == pytest.approx(trained[3].auroc_micro, abs=1e-9)


# ------------------------------------------------------------------ cli

def _cli(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out.strip(), cap.err.strip()


def _tiny_flags():
    flags = []
    for k, v in TINY.items():
        if k in ("data.source", "data.synthetic"):
            continue
        flags += [f"--{k}", json.dumps(v) if isinstance(v, dict) else str(v)]
    return flags


def test_cli_end_to_end(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    code, out, err = _cli(capsys, "synth-data", "--out", data, "--seed", 5, "--data.synthetic.n_train_videos", 2,
                          "--data.synthetic.n_test_videos", 2, "--data.synthetic.frames_per_video", 40,
                          "--teacher.backbone", "resnet18", "--teacher.pretrained_weights", "random:0")
    assert code == 0, err
    cfg_path = json.loads(out)["config"]
    code, out, err = _cli(capsys, "train", "--config", cfg_path, "--out", run, "--seed", 1, *_tiny_flags(),
                          "--train.epochs", 2)
    assert code == 0, err
    assert C.load(run / "config.yaml").train.seed == 1
    for sub in ("calibrate", "score"):
        code, out, err = _cli(capsys, sub, "--out", run)
        assert code == 0, err
    code, out, err = _cli(capsys, "eval", "--out", run)
    assert code == 0, err
    assert 0 <= json.loads(out)["auroc_micro"] <= 1
    code, out, err = _cli(capsys, "eval", "--out", run, "--labels", data / "labels_test.json", "--no-smooth")
    assert code == 0, err
    assert json.loads((run / "eval_report.json").read_text())["smoothed"] is False
    code, out, err = _cli(capsys, "plot", "--out", run)
    assert code == 0, err
    assert len(json.loads(out)["files"]) == 3


def test_cli_override_matches_ae_objective(tmp_path, capsys):
    run = tmp_path / "run"
    code, _, err = _cli(capsys, "train", "--out", run, "--data.source", "synthetic",
                        "--data.synthetic", json.dumps(TINY["data.synthetic"]), *_tiny_flags(),
                        "--train.epochs", 2, "--loss.lambda_e", "1.0", "--loss.lambda_c", "0")
    assert code == 0, err
    m = P.RunManifest.read(run)
    assert m.config["loss"]["lambda_e"] == 1.0 and m.config["loss"]["lambda_c"] == 0
    for h in m.history:
        assert h["total"] == pytest.approx(h["L_e"] + 0.1 * h["L_g"], rel=1e-6)


def test_cli_eval_missing_scores(tmp_path, capsys):
    code, out, err = _cli(capsys, "eval", "--out", tmp_path)
    assert code != 0 and out == ""
    assert len(err.splitlines()) == 1
    payload = json.loads(err)
    assert str(tmp_path / "scores.json") in payload["message"]


def test_cli_unknown_flag_and_bad_config(tmp_path, capsys):
    code, _, err = _cli(capsys, "train", "--out", tmp_path, "--frobnicate")
    assert code == 2 and json.loads(err)["error"] == "UsageError"
    code, _, err = _cli(capsys, "train", "--out", tmp_path, "--config", "synthetic", "--score.window", 4,
                        "--loss.lambda_g", -1)
    payload = json.loads(err)
    assert code == 2 and len(payload["problems"]) == 2


def test_cli_calibrate_without_run(tmp_path, capsys):
    code, _, err = _cli(capsys, "calibrate", "--out", tmp_path)
    assert code == 1 and "manifest.json" in json.loads(err)["message"]
