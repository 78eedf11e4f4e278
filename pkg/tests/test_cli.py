import json

import numpy as np
import pytest

from trajpred.cli import main
from trajpred.fixtures import load_fixture
from trajpred.scenario import dumps_scenario


def read_csv(path):
    rows = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return rows[0].split(","), [r.split(",") for r in rows[1:]]


def test_predict_writes_a_record(tmp_path, capsys):
    out = tmp_path / "pred.csv"
    assert main(["predict", "--scenario", "curved_road", "--t", "6.0", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["t", "x", "y"] and len(rows) == 40
    meta = [ln for ln in out.read_text().splitlines() if ln.startswith("# meta ")]
    assert json.loads(meta[0][len("# meta "):])["agent_id"] == 0


def test_predict_errors(tmp_path, capsys):
    assert main(["predict", "--scenario", "curved_road", "--t", "1.0"]) == 2
    assert "history" in capsys.readouterr().err
    assert main(["predict", "--scenario", "nowhere.json", "--t", "6.0"]) == 2
    assert main(["predict", "--scenario", "curved_road", "--t", "6.0", "--target", "5"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["predict", "--scenario", str(bad), "--t", "6.0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["predict", "--scenario", "curved_road"])
    assert exc.value.code == 2


def test_predict_offence_metadata(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(dumps_scenario(load_fixture("red_light_offence")))
    out = tmp_path / "p.csv"
    assert main(["predict", "--scenario", str(path), "--t", "6.0", "--out", str(out)]) == 0
    meta = [ln for ln in out.read_text().splitlines() if ln.startswith("# meta ")][0]
    assert "red_light_offence" in json.loads(meta[len("# meta "):])["warnings"]


def test_eval_curved_road(tmp_path):
    assert main(["eval", "--case", "curved_road", "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    for m in ("ours", "naive_fit", "constant_velocity"):
        assert f"curved_road_{m}.csv" in names
    assert "curved_road_summary.csv" in names
    header, rows = read_csv(tmp_path / "curved_road_summary.csv")
    assert header[0] == "method" and len(rows) == 3


def test_render_construction_and_light(tmp_path):
    assert main(["render", "--scenario", "red_light_construction", "--t", "5.0",
                 "--region=-10,-35,12,50", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == \
        ["context.csv", "mo.csv", "nonholonomic.csv", "static.csv"]
    _, rows = read_csv(tmp_path / "context.csv")
    grid = np.array(rows, dtype=float)
    before = (grid[:, 1] > -15) & (grid[:, 1] < 0) & (grid[:, 0] > 0.5) & (grid[:, 0] < 3.0)
    assert np.all(grid[before, 2] > 0)
    _, rows = read_csv(tmp_path / "nonholonomic.csv")
    assert not np.any(np.array(rows, dtype=float)[:, 2])


def test_render_bad_region(tmp_path):
    assert main(["render", "--scenario", "curved_road", "--region", "1,2,3",
                 "--out", str(tmp_path)]) == 2
    assert main(["render", "--scenario", "curved_road", "--region", "5,0,1,4",
                 "--out", str(tmp_path)]) == 2


def test_gen_data_is_deterministic_and_trains(tmp_path, capsys):
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    for p in (a, b):
        assert main(["gen-data", "--out", str(p), "--tracks-per-kind", "2", "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    capsys.readouterr()
    model = tmp_path / "m.npz"
    assert main(["train", "--data", str(a), "--out", str(model), "--epochs", "1",
                 "--hidden", "4"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("epoch,train_loss")
    assert main(["predict", "--scenario", "curved_road", "--t", "6.0", "--model", str(model),
                 "--out", str(tmp_path / "p.csv")]) == 0
