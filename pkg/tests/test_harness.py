import csv
import json
import struct

import numpy as np
import pytest

from tvin import gridworld as gw
from tvin import transfer as tr
from tvin import vin
from tvin.harness import cli
from tvin.harness.config import ConfigError, read_config
from tvin.harness.presets import PRESETS, DataSpec, ExperimentPreset, get_preset
from tvin.harness.runner import RunManifest, Runner, replay, run_experiment
from tvin.harness.store import file_hash, load_model, save_model


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--domain", "news", "--m", "7", "--maps", "12", "--seed", "1",
                     "--out", str(d / "src.bin")]) == 0
    assert cli.main(["gen-data", "--domain", "moore", "--m", "7", "--maps", "12", "--seed", "2",
                     "--out", str(d / "tgt.bin")]) == 0
    assert cli.main(["gen-data", "--domain", "moore", "--m", "7", "--maps", "5", "--seed", "3",
                     "--split", "test", "--out", str(d / "test.bin")]) == 0
    assert cli.main(["train", "--data", str(d / "src.bin"), "--epochs", "1", "--h", "8",
                     "--out", str(d / "src.ck")]) == 0
    return d


def test_gen_data_header_and_determinism(files, tmp_path):
    raw = (files / "src.bin").read_bytes()
    magic, _, dom, m, n_maps, _ = struct.unpack_from("<4sHBHII", raw)
    assert (magic, dom, m, n_maps) == (b"TVIN", 0, 7, 12)
    again = tmp_path / "again.bin"
    cli.main(["gen-data", "--domain", "news", "--m", "7", "--maps", "12", "--seed", "1", "--out", str(again)])
    assert file_hash(again) == file_hash(files / "src.bin")


def test_train_outputs(files):
    meta = json.loads((files / "src.ck.json").read_text())
    assert meta == {"kind": "vin", "domain": "news", "K": 14, "F": 3, "h": 8}
    lines = (files / "src.ck.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,train_acc,wall_ms" and len(lines) == 2


def test_train_k_flag_overrides_default(files, tmp_path):
    out = tmp_path / "k5.ck"
    assert cli.main(["train", "--data", str(files / "src.bin"), "--epochs", "1", "--h", "8", "--K", "5",
                     "--out", str(out)]) == 0
    assert load_model(out).K == 5


def test_transfer_and_eval(files, tmp_path, capsys):
    tv, vi = tmp_path / "tvin.ck", tmp_path / "vini.ck"
    assert cli.main(["transfer", "--source", str(files / "src.ck"), "--data", str(files / "tgt.bin"),
                     "--pairs", "N=N", "--epochs", "1", "--out", str(tv)]) == 0
    assert cli.main(["transfer", "--source", str(files / "src.ck"), "--data", str(files / "tgt.bin"),
                     "--mode", "init", "--epochs", "1", "--out", str(vi)]) == 0
    model = load_model(tv)
    assert isinstance(model, tr.TvinModel)
    assert list(model.theta_values()) == ["North"]
    assert (tmp_path / "tvin.ck.theta.csv").read_text().startswith("epoch,theta_North")
    assert type(load_model(vi)) is vin.VinModel
    capsys.readouterr()
    out = tmp_path / "cmp.csv"
    assert cli.main(["eval", "--data", str(files / "test.bin"), "--models", f"{tv},{vi}", "--labels",
                     "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["model", "N", "source", "target", "pct_opt", "pct_suc"]
    assert [r[0] for r in rows[1:]] == ["labels", "tvin", "vini"]
    assert rows[1][4:] == ["100.00", "100.00"]


@pytest.mark.parametrize("argv,code", [
    (["train", "--data", "missing.bin", "--out", "x.ck"], 3),
    (["train", "--out", "x.ck"], 2),
    (["train", "--data", "d.bin", "--F", "x"], 2),
    (["experiment", "no-such-preset"], 2),
    (["bogus-command"], 2),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        rc = cli.main(argv)
    except SystemExit as e:  # argparse rejects malformed flags itself
        rc = e.code
    assert rc == code


def test_domain_mismatch_is_data_error(files):
    assert cli.main(["eval", "--data", str(files / "src.bin"), "--models", str(files / "src.ck")]) == 0
    assert cli.main(["eval", "--data", str(files / "tgt.bin"), "--models", str(files / "src.ck")]) == 3


def test_corrupt_dataset_is_data_error(tmp_path, files):
    bad = tmp_path / "bad.bin"
    bad.write_bytes((files / "src.bin").read_bytes()[:-3])
    assert cli.main(["train", "--data", str(bad), "--out", str(tmp_path / "x.ck")]) == 3


def test_bad_mapping_names_actions(files, tmp_path, capsys):
    rc = cli.main(["transfer", "--source", str(files / "src.ck"), "--data", str(files / "tgt.bin"),
                   "--pairs", "N=N,S=N", "--out", str(tmp_path / "x.ck")])
    assert rc == 2
    assert "North used twice" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(files, tmp_path):
    assert cli.main(["train", "--data", str(files / "src.bin"), "--epochs", "3", "--h", "8", "--lr", "1e30",
                     "--out", str(tmp_path / "x.ck")]) == 4


def test_config_precedence(files, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nepochs = 1\nh = 6   # inline\nK = 4\nbatch-size = 64\n")
    out = tmp_path / "c.ck"
    assert cli.main(["train", "--config", str(cfg), "--data", str(files / "src.bin"), "--K", "3",
                     "--out", str(out)]) == 0
    meta = json.loads((tmp_path / "c.ck.json").read_text())
    assert (meta["h"], meta["K"]) == (6, 3)  # config beats default, flag beats config


def test_config_errors(tmp_path, files):
    (tmp_path / "a.cfg").write_text("[section]\nx = 1\n")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "a.cfg")
    (tmp_path / "b.cfg").write_text("epochs = many\n")
    assert cli.main(["train", "--config", str(tmp_path / "b.cfg"), "--data", str(files / "src.bin"),
                     "--out", str(tmp_path / "b.ck")]) == 2


def test_check_commands(capsys):
    assert cli.main(["oracle-check", "--seeds", "6"]) == 0
    assert cli.main(["grad-check", "--seeds", "1"]) == 0
    assert "PASS op/conv2d" in capsys.readouterr().out


# -- presets and runner ---------------------------------------------------------------


def test_presets_follow_conventions():
    desk = get_preset("news2moore-desk")
    assert desk.target_n == (200, 1000) and desk.models == ("VIN", "VIN_i", "TVIN")
    assert desk.source_K == 20 and desk.ks == (30,)
    assert (desk.lr, desk.source_lr, desk.clip) == (0.005, 0.1, 1.0)
    assert vin.VinConfig(gw.NEWS).clip == 1.0
    assert get_preset("kf-sweep").target_K == (10, 20, 30) and get_preset("kf-sweep").F == (3, 5, 7)
    assert get_preset("action-ablation").pair_counts == (1, 2, 3, 4)
    assert get_preset("news2moore-hard").density == 0.5
    for p in PRESETS.values():
        assert ExperimentPreset.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        ExperimentPreset("x", DataSpec("news", 9, 10), DataSpec("moore", 9, 10), (10,), density=0.4)
    with pytest.raises(KeyError):
        get_preset("nope")


def test_cells_skip_duplicate_vin_rows(tmp_path):
    p = get_preset("smoke").with_overrides(pair_counts=(1, 2), models=("VIN", "TVIN"))
    cells = list(Runner(p, tmp_path).cells())
    assert [c[1] for c in cells].count("VIN") == len(p.target_n)
    assert {c[5] for c in cells if c[1] == "TVIN"} == {1, 2}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    rows, manifest = run_experiment(get_preset("smoke"), d, reference=True)
    return d, rows, manifest


def test_smoke_experiment_outputs(smoke_run):
    d, rows, manifest = smoke_run
    assert len(rows) == 6 and manifest.complete
    table = (d / "smoke-table.csv").read_text().splitlines()
    assert table[0].startswith("# epochs=2, final-epoch metrics")
    assert table[1] == "model,N,K,F,pairs,n_seeds,pct_opt,pct_suc"
    stages = [s.name for s in manifest.stages]
    assert stages.count("source") == 1 and stages.count("data-target-train") == 1
    on_disk = RunManifest.read(d / "manifest-smoke.json")
    assert on_disk.artifact_hashes() == manifest.artifact_hashes()


def test_rerun_reuses_cache(smoke_run):
    d, rows, manifest = smoke_run
    rows2, m2 = run_experiment(get_preset("smoke"), d, reference=True)
    assert all(s.reused for s in m2.stages)
    assert m2.artifact_hashes() == manifest.artifact_hashes()
    assert [r.report.pct_opt for r in rows2] == [r.report.pct_opt for r in rows]


def test_replay_reproduces_hashes(smoke_run, tmp_path):
    d, _, _ = smoke_run
    assert replay(d / "manifest-smoke.json", tmp_path) == {}


def test_failed_stage_leaves_partial_manifest(tmp_path, monkeypatch):
    from tvin.harness import runner as rn

    def boom(*a, **k):
        raise RuntimeError("stage failed")

    monkeypatch.setattr(rn.tr, "train_tvin", boom)
    with pytest.raises(RuntimeError):
        run_experiment(get_preset("smoke"), tmp_path, reference=True)
    m = RunManifest.read(tmp_path / "manifest-smoke.json")
    assert not m.complete
    assert "source" in [s.name for s in m.stages]
    assert not list((tmp_path / "cache").glob("*.partial"))


def test_store_roundtrip_tvin(tmp_path):
    src = vin.VinModel(vin.VinConfig(gw.NEWS, K=3, h=6, seed=1))
    model = tr.build_tvin(src, gw.NEWS, gw.DRIVE, tr.default_mapping(gw.NEWS, gw.DRIVE),
                          vin.VinConfig(gw.DRIVE, K=3, h=6, seed=2))
    model.theta[0].data[...] = 0.7
    save_model(model, tmp_path / "m.ck")
    back = load_model(tmp_path / "m.ck")
    obs = gw.render_observation(gw.DRIVE, gw.MapGen(6)(0, gw.DRIVE))[None]
    assert np.array_equal(vin.action_tables(back, obs), vin.action_tables(model, obs))
    assert {p.name for p in back.frozen_params()} == {p.name for p in model.frozen_params()}
