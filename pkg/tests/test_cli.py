import json
from pathlib import Path

import numpy as np
import pytest

from mantis_cd.cli import DEFAULTS, UsageError, load_config, main
from mantis_cd.inference import parse_landscape
from mantis_cd.mantis import Mantis, MantisConfig
from mantis_cd.pipeline import read_mask, synth_chip, write_image, write_mask
from mantis_cd.substrate import save_checkpoint


@pytest.fixture
def raster_pair(tmp_path):
    chip = synth_chip(64, np.random.default_rng(0))
    write_image(tmp_path / "a.png", chip.t1)
    write_image(tmp_path / "b.png", chip.t2)
    write_mask(tmp_path / "label.png", chip.mask)
    return tmp_path


@pytest.fixture
def checkpoint(tmp_path):
    cfg = MantisConfig(depth=3, nf=8, seed=0)
    return save_checkpoint(tmp_path / "ckpt", Mantis(cfg), cfg.to_dict())


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--a", "x.png"])
    assert exc.value.code == 1
    assert main(["gradcheck", "--only", "no_such_check"]) == 1
    assert main(["landscape", "--grid", "1"]) == 1


def test_config_defaults_and_validation(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    assert load_config(empty) == DEFAULTS
    assert load_config(None) == DEFAULTS
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"model": {"nf": 16}, "inference": {"stride": 32}}))
    cfg = load_config(partial)
    assert cfg["model"]["nf"] == 16 and cfg["model"]["depth"] == DEFAULTS["model"]["depth"]
    assert cfg["inference"]["stride"] == 32
    for bad in ('{"model": {"widht": 3}}', '{"optimizer": {}}', "[1, 2]", "{not json"):
        (tmp_path / "bad.json").write_text(bad)
        with pytest.raises(UsageError):
            load_config(tmp_path / "bad.json")
    with pytest.raises(UsageError):
        load_config(tmp_path / "missing.json")


def test_landscape_command(tmp_path, capsys):
    out = tmp_path / "land.csv"
    assert main(["landscape", "--grid", "5", "--depths", "0", "5", "--out", str(out)]) == 0
    parsed = parse_landscape(out.read_text())
    assert set(parsed) == {0, 5}
    assert main(["landscape", "--grid", "3"]) == 0
    assert capsys.readouterr().out.startswith("p_x,p_y,d,ftnmt")


def test_chip_command(raster_pair, capsys):
    out = raster_pair / "chips"
    args = ["chip", "--a", str(raster_pair / "a.png"), "--b", str(raster_pair / "b.png"),
            "--label", str(raster_pair / "label.png"), "--out", str(out), "--window", "32", "--stride", "16"]
    assert main(args) == 0
    assert len(list((out / "train" / "A").glob("*.png"))) == 9
    assert main(args[:-4] + ["--window", "32", "--split"]) == 0
    assert main(["chip", "--a", "nope.png", "--b", "nope.png", "--label", "nope.png", "--out", str(out)]) == 2


def test_eval_command(tmp_path, capsys):
    rng = np.random.default_rng(1)
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    for i in range(2):
        m = rng.uniform(size=(16, 16)) > 0.5
        write_mask(tmp_path / "gt" / f"{i}.png", m)
        write_mask(tmp_path / "pred" / f"{i}.png", m)
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--label", str(tmp_path / "gt")]) == 0
    total = capsys.readouterr().out.strip().splitlines()[-1].split()
    assert total[0] == "total" and all(float(v) == 1.0 for v in total[1:])
    (tmp_path / "gt" / "2.png").write_bytes((tmp_path / "gt" / "0.png").read_bytes())
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--label", str(tmp_path / "gt")]) == 2
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--label", str(tmp_path / "empty")]) == 2


def test_infer_command(raster_pair, checkpoint, capsys):
    out = raster_pair / "pred"
    rc = main(["infer", "--a", str(raster_pair / "a.png"), "--b", str(raster_pair / "b.png"),
               "--checkpoints", str(checkpoint), str(checkpoint), "--out", str(out), "--label",
               str(raster_pair / "label.png"), "--window", "32", "--stride", "16"])
    assert rc == 0
    for name in ("probability.png", "mask.png", "confidence.png", "confusion.png", "probability.f32"):
        assert (out / name).exists()
    meta = json.loads((out / "probability.json").read_text())
    prob = np.fromfile(out / "probability.f32", dtype=meta["dtype"]).reshape(meta["shape"])
    assert prob.shape == (64, 64) and prob.min() >= 0 and prob.max() <= 1
    np.testing.assert_array_equal(read_mask(out / "mask.png"), prob > 0.5)


def test_infer_errors(raster_pair, checkpoint, tmp_path):
    base = ["infer", "--a", str(raster_pair / "a.png"), "--b", str(raster_pair / "b.png"), "--out", str(tmp_path / "o")]
    assert main(base + ["--checkpoints", str(tmp_path / "nothing")]) == 2
    assert main(base + ["--checkpoints", str(checkpoint), "--window", "32", "--stride", "64"]) == 1
    manifest = json.loads((checkpoint / "manifest.json").read_text())
    manifest["config"]["nf"] = 16
    (checkpoint / "manifest.json").write_text(json.dumps(manifest))
    assert main(base + ["--checkpoints", str(checkpoint), "--window", "32", "--stride", "16"]) == 2


def test_train_command_synthetic(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"depth": 3}, "data": {"chip_size": 32, "val_synthetic": 2},
                               "schedule": {"stages": [[1e-3, 0], [1e-4, 2]]}}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--synthetic", "2", "--out", str(out), "--epochs", "2",
                 "--batch-size", "2", "--quiet"]) == 0
    front = json.loads((out / "pareto.json").read_text())
    assert front and all(Path(p, "manifest.json").exists() for p in front)
    assert (out / "train_log.csv").read_text().count("\n") == 3
    assert main(["train", "--out", str(out)]) == 1
