import json
import xml.etree.ElementTree as ET

import jsonschema
import pytest

from amber.cli import VIRIDIS, colormap, main, render_svg
from amber.dataset import MANIFEST_SCHEMA, generate_dataset, load_instances
from amber.fem import PRESETS, ExpertConfig
from amber.mesh import load_tmesh

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main(["generate", "--out", str(out), "--n-train", "2", "--n-test", "1",
                 "--preset", "easy", "--seed", "0"])
    assert code == 0
    return out / "manifest.json"


@pytest.fixture(scope="module")
def model(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", "--manifest", str(dataset), "--out", str(out), "--steps", "0",
                 "--agg", "max"]) == 0
    return out / "checkpoint.ambr"


def test_generate(dataset, tmp_path):
    manifest = json.loads(dataset.read_text())
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    assert [i["split"] for i in manifest["instances"]] == ["train", "train", "test"]
    assert manifest["config"]["n_refinements"] == 25 and manifest["seed"] == 0
    # a second run reproduces every expert mesh byte for byte
    again = tmp_path / "again"
    assert main(["generate", "--out", str(again), "--n-train", "2", "--n-test", "1",
                 "--seed", "0"]) == 0
    for inst in manifest["instances"]:
        a = (dataset.parent / inst["expert"]).read_bytes()
        assert a == (again / inst["expert"]).read_bytes()


def test_generate_seed_from_environment(tmp_path, monkeypatch):
    cfg = ExpertConfig(n_refinements=2)
    monkeypatch.setenv("AMBER_SEED", "5")
    from amber import cli
    seen = {}

    def fake(out, **kw):
        seen.update(kw)
        return generate_dataset(out, expert_cfg=cfg, **kw)
    monkeypatch.setattr("amber.dataset.generate_dataset", fake)
    assert cli.main(["generate", "--out", str(tmp_path), "--n-train", "1", "--n-test", "0"]) == 0
    assert seen["seed"] == 5
    monkeypatch.setenv("AMBER_SEED", "x")
    assert cli.main(["generate", "--out", str(tmp_path), "--n-train", "1"]) == 1


def test_more_refinements_give_larger_experts(tmp_path):
    assert PRESETS == {"easy": 25, "medium": 50, "hard": 75}
    few = generate_dataset(tmp_path / "a", 2, 0, 0, seed=3, expert_cfg=ExpertConfig(n_refinements=4))
    many = generate_dataset(tmp_path / "b", 2, 0, 0, seed=3, expert_cfg=ExpertConfig(n_refinements=8))
    for x, y in zip(json.loads(few.read_text())["instances"],
                    json.loads(many.read_text())["instances"]):
        assert y["n_elements"] > x["n_elements"]


def test_train_zero_steps(model, dataset, tmp_path):
    from amber.mpn import load_checkpoint
    ck = load_checkpoint(model)
    assert ck.adam.step == 0 and ck.extra["aggregator"] == "max"
    out = tmp_path / "run"
    assert main(["train", "--manifest", str(dataset), "--out", str(out), "--steps", "16",
                 "--node-budget", "500", "--seed", "1"]) == 0
    lines = (out / "train_log.jsonl").read_text().splitlines()
    events = [l for l in lines if '"event"' in l]
    assert len(lines) == 16 + len(events) and len(events) == 2


def test_train_usage_errors(dataset, tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path),
                 "--agg", "median"]) == 1
    assert main(["train", "--manifest", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path)]) == 2
    assert main([]) == 1


def test_infer_outputs(model, dataset, tmp_path):
    args = ["infer", "--checkpoint", str(model), "--manifest", str(dataset),
            "--instance", "train-0000", "--steps", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for t in range(3):
        mesh, fields = load_tmesh(tmp_path / "a" / f"mesh_{t:02d}.tmesh")
        assert len(fields["predicted_sizing"]) == mesh.n_elements
        svg = (tmp_path / "a" / f"mesh_{t:02d}.svg").read_bytes()
        root = ET.fromstring(svg)
        assert len(root.findall(f".//{SVG}polygon")) == mesh.n_elements
        assert svg == (tmp_path / "b" / f"mesh_{t:02d}.svg").read_bytes()
    assert not (tmp_path / "a" / "mesh_03.tmesh").exists()
    summary = json.loads((tmp_path / "a" / "inference.json").read_text())
    assert len(summary["n_elements"]) == 3 and not summary["truncated"]


def test_infer_from_geometry_file(model, dataset, tmp_path):
    inst = load_instances(dataset, "test")[0]
    geo = tmp_path / "problem.json"
    geo.write_text(json.dumps({"geometry": inst.domain.to_json(), "load": inst.load.to_json()}))
    assert main(["infer", "--checkpoint", str(model), "--geometry", str(geo), "--steps", "0",
                 "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "mesh_00.svg").exists()
    only_geo = tmp_path / "geo.json"
    only_geo.write_text(json.dumps(inst.domain.to_json()))
    assert main(["infer", "--checkpoint", str(model), "--geometry", str(only_geo),
                 "--out", str(tmp_path / "p")]) == 1
    assert main(["infer", "--checkpoint", str(model), "--manifest", str(dataset),
                 "--instance", "train-0000", "--steps", "1", "--max-elements", "5", "--strict",
                 "--out", str(tmp_path / "q")]) == 2


def test_evaluate(model, dataset, tmp_path, capsys):
    empty = tmp_path / "empty"
    assert main(["generate", "--out", str(empty), "--n-train", "0", "--n-test", "0"]) == 0
    assert main(["evaluate", "--checkpoint", str(model), "--manifest",
                 str(empty / "manifest.json")]) == 1
    assert "empty" in capsys.readouterr().err
    report = tmp_path / "report.json"
    assert main(["evaluate", "--checkpoint", str(model), "--manifest", str(dataset),
                 "--steps", "1", "--out", str(report)]) == 0
    table = capsys.readouterr().out.splitlines()
    rep = json.loads(report.read_text())
    mean = rep["aggregate"]["mean"]
    for t in range(2):
        cells = table[1 + t].split()
        assert int(cells[0]) == t
        assert float(cells[1]) == mean["dcd"][t]
        assert float(cells[2]) == mean["vol_diff"][t]
        assert float(cells[3]) == mean["n_elements"][t]
    assert float(table[3].rsplit(" ", 1)[1]) == mean["ndcd_final"]
    assert [g["id"] for g in rep["geometries"]] == ["test-0002"]


def test_svg_render_examples():
    from conftest import square_grid
    import numpy as np
    mesh = square_grid(3)
    sizing = np.linspace(0.1, 1.0, mesh.n_elements)
    svg = render_svg(mesh, sizing)
    root = ET.fromstring(svg)
    assert len(root.findall(f".//{SVG}polygon")) == mesh.n_elements
    assert svg == render_svg(mesh, sizing)
    np.testing.assert_allclose(colormap(0.0), VIRIDIS[0])
    np.testing.assert_allclose(colormap(1.0), VIRIDIS[-1])
    np.testing.assert_allclose(colormap(2.0), VIRIDIS[-1])
    flat = render_svg(mesh, np.full(mesh.n_elements, 0.3))
    assert len(ET.fromstring(flat).findall(f".//{SVG}polygon")) == mesh.n_elements
