import json
import os

import numpy as np
import pytest

from rftrace.cli import main
from rftrace.pnm import read_mask, write_mask, write_ppm
from rftrace.tensor import Tensor


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out)


def read_tree(root):
    tree = {}
    for dirpath, _dirs, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                tree[os.path.relpath(path, root)] = fh.read()
    return tree


class TestGen:
    def test_chain5_spec(self, tmp_path, capsys):
        code, doc = run_cli(capsys, "gen", "--model", "chain-5", "--seed", "1", "--out", str(tmp_path / "m"))
        assert code == 0
        graph = json.load(open(tmp_path / "m" / "main.graph.json"))
        convs = [n for n in graph["nodes"] if n["kind"] == "conv"]
        assert len(convs) == 5
        assert doc["manifest"]["command"] == "gen"

    def test_same_seed_identical_bytes(self, tmp_path, capsys, monkeypatch):
        # identical invocations (same relative out path) from two parents
        (tmp_path / "one").mkdir()
        (tmp_path / "two").mkdir()
        monkeypatch.chdir(tmp_path / "one")
        code1, _ = run_cli(capsys, "gen", "--model", "diamond", "--seed", "7", "--out", "m")
        monkeypatch.chdir(tmp_path / "two")
        code2, _ = run_cli(capsys, "gen", "--model", "diamond", "--seed", "7", "--out", "m")
        assert code1 == code2 == 0
        assert read_tree(tmp_path / "one" / "m") == read_tree(tmp_path / "two" / "m")

    def test_unknown_model_errors(self, tmp_path, capsys):
        code, doc = run_cli(capsys, "gen", "--model", "resnext", "--out", str(tmp_path / "x"))
        assert code == 1
        assert "error" in doc

    def test_toy_bundle_loads(self, tmp_path, capsys):
        code, _ = run_cli(capsys, "gen", "--model", "toy-r18-fpn", "--seed", "0", "--out", str(tmp_path / "toy"))
        assert code == 0
        from rftrace.segmenter import ModelBundle

        bundle = ModelBundle.load(tmp_path / "toy")
        assert set(bundle.level_graphs) == {"P3", "P4", "P5", "P6", "P7"}

    def test_pyramid_fixture_flops_window(self, tmp_path, capsys):
        out = tmp_path / "r50"
        code, _ = run_cli(capsys, "gen", "--model", "r50-fpn-approx", "--seed", "0", "--out", str(out))
        assert code == 0
        code, doc = run_cli(capsys, "flops", "--graph", str(out / "P3.graph.json"))
        assert code == 0
        assert abs(doc["total_full"] - 86.67e9) / 86.67e9 <= 0.15


@pytest.fixture(scope="module")
def chain_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("chainfix")
    code = main(["gen", "--model", "chain-5", "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


class TestTrace:
    def test_full_rect_no_cropping(self, chain_dir, capsys):
        code, doc = run_cli(
            capsys, "trace", "--graph", str(chain_dir / "main.graph.json"), "--rect", "0,0,255,255"
        )
        assert code == 0
        for nid, entry in doc["regions"].items():
            assert entry["cropped_fraction"] == 0.0

    def test_single_pixel_regions_grow_toward_input(self, chain_dir, capsys):
        code, doc = run_cli(
            capsys, "trace", "--graph", str(chain_dir / "main.graph.json"), "--click", "128,128"
        )
        assert code == 0
        sizes = []
        order = ["c04", "c03", "c02", "c01", "c00", "a.in"]
        for nid in order:
            t, l, b, r = doc["regions"][nid]["rect"]
            sizes.append((b - t + 1) * (r - l + 1))
        assert sizes == sorted(sizes)
        assert sizes[0] == 1

    def test_malformed_graph_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code, doc = run_cli(capsys, "trace", "--graph", str(bad), "--click", "0,0")
        assert code == 1
        assert doc["error"]["type"] == "GraphError"

    def test_out_of_bounds_click_errors(self, chain_dir, capsys):
        code, doc = run_cli(
            capsys, "trace", "--graph", str(chain_dir / "main.graph.json"), "--click", "999,0"
        )
        assert code == 1
        assert "error" in doc


class TestVerify:
    def test_chain_trials_pass(self, chain_dir, capsys):
        code, doc = run_cli(
            capsys,
            "verify",
            "--graph",
            str(chain_dir / "main.graph.json"),
            "--weights",
            str(chain_dir / "weights.json"),
            "--trials",
            "5",
            "--seed",
            "0",
        )
        assert code == 0
        assert doc["all_pass"] is True
        assert len(doc["trials"]) == 5

    def test_diamond_trials_parallel(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["gen", "--model", "diamond", "--seed", "2", "--out", str(out)]) == 0
        capsys.readouterr()
        code, doc = run_cli(
            capsys,
            "verify",
            "--graph",
            str(out / "main.graph.json"),
            "--weights",
            str(out / "weights.json"),
            "--trials",
            "8",
            "--jobs",
            "4",
            "--seed",
            "1",
        )
        assert code == 0
        assert doc["all_pass"] is True
        assert [t["trial"] for t in doc["trials"]] == list(range(8))


class TestFlops:
    def test_savings_in_range(self, chain_dir, capsys):
        code, doc = run_cli(
            capsys, "flops", "--graph", str(chain_dir / "main.graph.json"), "--click", "10,12"
        )
        assert code == 0
        assert 0.0 <= doc["savings_ratio"] <= 1.0
        assert doc["total_traced"] <= doc["total_full"]

    def test_full_only(self, chain_dir, capsys):
        code, doc = run_cli(capsys, "flops", "--graph", str(chain_dir / "main.graph.json"))
        assert code == 0
        assert doc["total_traced"] == doc["total_full"]
        assert doc["savings_ratio"] == 0.0


@pytest.fixture(scope="module")
def masks_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("masks")
    index = {}
    square = np.zeros((60, 60), dtype=bool)
    square[5:55, 5:55] = True
    write_mask(root / "sq.pgm", square)
    index["sq"] = {"file": "sq.pgm", "category": "square"}
    blob = np.zeros((40, 40), dtype=bool)
    blob[10:20, 8:30] = True
    blob[18:34, 20:28] = True
    write_mask(root / "blob.pgm", blob)
    index["blob"] = {"file": "blob.pgm", "category": "blob"}
    with open(root / "index.json", "w") as fh:
        json.dump(index, fh)
    return root


class TestClicksAndEval:
    def test_clicks_contract(self, masks_dir, tmp_path, capsys):
        clicks_path = tmp_path / "clicks.json"
        code, doc = run_cli(
            capsys, "clicks", "--masks", str(masks_dir), "--seed", "5", "--out", str(clicks_path)
        )
        assert code == 0
        clicks = doc["clicks"]
        assert len(clicks) == 50  # 25 per instance
        per_band = {}
        for c in clicks:
            if c["instance_id"] == "sq":
                per_band.setdefault(c["band"], 0)
                per_band[c["band"]] += 1
        assert per_band == {1: 5, 2: 5, 3: 5, 4: 5, 5: 5}
        square = read_mask(masks_dir / "sq.pgm")
        for c in clicks:
            if c["instance_id"] == "sq":
                assert square[c["y"], c["x"]]

    def test_clicks_deterministic(self, masks_dir, tmp_path, capsys):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        assert main(["clicks", "--masks", str(masks_dir), "--seed", "9", "--out", str(a)]) == 0
        assert main(["clicks", "--masks", str(masks_dir), "--seed", "9", "--out", str(b)]) == 0
        capsys.readouterr()
        assert json.load(open(a))["clicks"] == json.load(open(b))["clicks"]

    def test_eval_perfect_predictions(self, masks_dir, tmp_path, capsys):
        clicks_path = tmp_path / "clicks.json"
        assert main(["clicks", "--masks", str(masks_dir), "--seed", "1", "--out", str(clicks_path)]) == 0
        capsys.readouterr()
        preds = tmp_path / "preds"
        preds.mkdir()
        clicks = json.load(open(clicks_path))["clicks"]
        counter = {}
        for c in clicks:
            iid = c["instance_id"]
            j = counter.get(iid, 0)
            counter[iid] = j + 1
            with open(masks_dir / "index.json") as fh:
                index = json.load(fh)
            gt = read_mask(masks_dir / index[iid]["file"])
            write_mask(preds / f"{iid}_{j}.pgm", gt)
        code, doc = run_cli(
            capsys,
            "eval",
            "--preds",
            str(preds),
            "--gts",
            str(masks_dir),
            "--clicks",
            str(clicks_path),
            "--beta",
            "0.7",
        )
        assert code == 0
        assert doc["miou_t"] == 1.0
        assert doc["mta"] == 1.0
        assert doc["per_category"]["square"] == 1.0
        assert set(doc["per_band"]) == {"band1", "band2", "band3", "band4", "band5"}

    def test_eval_missing_prediction_errors(self, masks_dir, tmp_path, capsys):
        clicks_path = tmp_path / "c.json"
        assert main(["clicks", "--masks", str(masks_dir), "--seed", "2", "--out", str(clicks_path)]) == 0
        capsys.readouterr()
        empty = tmp_path / "nopreds"
        empty.mkdir()
        code, doc = run_cli(
            capsys, "eval", "--preds", str(empty), "--gts", str(masks_dir), "--clicks", str(clicks_path)
        )
        assert code == 1
        assert "missing prediction" in doc["error"]["message"]


class TestSegment:
    def test_end_to_end(self, tmp_path, capsys):
        model_dir = tmp_path / "model"
        assert main(["gen", "--model", "toy-r18-fpn", "--seed", "0", "--out", str(model_dir)]) == 0
        capsys.readouterr()
        rng = np.random.default_rng(0)
        img = Tensor(rng.random((3, 256, 256)).astype(np.float32))
        img_path = tmp_path / "img.ppm"
        write_ppm(img_path, img)
        out_path = tmp_path / "mask.pgm"
        code, doc = run_cli(
            capsys,
            "segment",
            "--model",
            str(model_dir),
            "--image",
            str(img_path),
            "--click",
            "120,100",
            "--out",
            str(out_path),
        )
        assert code == 0
        mask = read_mask(out_path)
        assert mask.shape == (256, 256)
        diag = doc["diagnostics"]
        assert diag["flops"]["total_traced"] <= diag["flops"]["total_full"]
        assert os.path.exists(tmp_path / "mask.diag.json")

    def test_forced_level(self, tmp_path, capsys):
        model_dir = tmp_path / "model"
        assert main(["gen", "--model", "toy-r18-fpn", "--seed", "1", "--out", str(model_dir)]) == 0
        capsys.readouterr()
        img_path = tmp_path / "img.ppm"
        rng = np.random.default_rng(1)
        write_ppm(img_path, Tensor(rng.random((3, 256, 256)).astype(np.float32)))
        code, doc = run_cli(
            capsys,
            "segment",
            "--model",
            str(model_dir),
            "--image",
            str(img_path),
            "--click",
            "50,60",
            "--level",
            "P5",
            "--out",
            str(tmp_path / "m.pgm"),
        )
        assert code == 0
        assert doc["diagnostics"]["chosen_level"] == "P5"
