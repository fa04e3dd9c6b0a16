"""End-to-end command pipeline on a tiny configuration."""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from geomdeeponet.cli import main
from geomdeeponet.dataset import load_dataset, load_split
from geomdeeponet.evaluation import evaluate_model
from geomdeeponet.mesh import box_mesh, write_json_mesh
from geomdeeponet.model import load_model
from geomdeeponet.vtk import read_vtk_point_data

TRAIN_FLAGS = ["--iterations", "20", "--eval-every", "10", "--resample-n", "32", "--batch-size", "4",
               "--seed", "1", "--quiet"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--family", "BeamWithHole", "--count", "10", "--seed", "7", "--n-min", "30",
                 "--n-max", "60", "--out", str(d / "data.jsonl")]) == 0
    assert main(["split", "--dataset", str(d / "data.jsonl"), "--mode", "random", "--seed", "0",
                 "--out", str(d / "split.json")]) == 0
    assert main(["train", "--dataset", str(d / "data.jsonl"), "--split", str(d / "split.json"),
                 "--out-dir", str(d / "run"), *TRAIN_FLAGS]) == 0
    return d


class TestGenSplit:
    def test_gen_byte_identical(self, run, tmp_path):
        assert main(["gen", "--family", "BeamWithHole", "--count", "10", "--seed", "7", "--n-min", "30",
                     "--n-max", "60", "--out", str(tmp_path / "b.jsonl")]) == 0
        assert (tmp_path / "b.jsonl").read_bytes() == (run / "data.jsonl").read_bytes()

    def test_gen_parallel_identical(self, run, tmp_path):
        assert main(["gen", "--family", "BeamWithHole", "--count", "10", "--seed", "7", "--n-min", "30",
                     "--n-max", "60", "--workers", "2", "--out", str(tmp_path / "p.jsonl")]) == 0
        assert (tmp_path / "p.jsonl").read_bytes() == (run / "data.jsonl").read_bytes()

    def test_gen_contract(self, run):
        ds = load_dataset(run / "data.jsonl")
        assert all(np.all(c.sdf <= 0) for c in ds.cases)
        assert all(30 <= c.node_count <= 60 for c in ds.cases)
        manifest = json.loads((run / "data.manifest.json").read_text())
        assert manifest["config"]["seed"] == 7

    def test_config_file_and_override(self, tmp_path):
        (tmp_path / "g.json").write_text(json.dumps({"family": "CuboidWithVoid", "count": 3, "seed": 1,
                                                     "n_min": 10, "n_max": 20}))
        assert main(["gen", "--config", str(tmp_path / "g.json"), "--count", "2",
                     "--out", str(tmp_path / "g.jsonl")]) == 0
        assert len(load_dataset(tmp_path / "g.jsonl")) == 2

    def test_random_split(self, run):
        doc = load_split(run / "split.json")
        assert (len(doc["train"]), len(doc["test"])) == (8, 2)
        assert doc["mode"] == "random"

    def test_similarity_split(self, run, tmp_path):
        for k in range(2):
            assert main(["split", "--dataset", str(run / "data.jsonl"), "--mode", "similarity",
                         "--out", str(tmp_path / f"s{k}.json")]) == 0
        a, b = (load_split(tmp_path / f"s{k}.json") for k in range(2))
        assert a["train"] == b["train"] and load_dataset(run / "data.jsonl").ids[0] in a["train"]

    def test_unknown_mode(self, run, tmp_path):
        assert main(["split", "--dataset", str(run / "data.jsonl"), "--mode", "kfold",
                     "--out", str(tmp_path / "x.json")]) == 2


class TestTrain:
    def test_outputs(self, run):
        for name in ("final.json", "best.json", "history.jsonl", "effective_config.json", "state.json"):
            assert (run / "run" / name).exists()
        eff = json.loads((run / "run" / "effective_config.json").read_text())
        assert eff["train"]["iterations"] == 20

    def test_identical_history(self, run, tmp_path):
        assert main(["train", "--dataset", str(run / "data.jsonl"), "--split", str(run / "split.json"),
                     "--out-dir", str(tmp_path / "r2"), *TRAIN_FLAGS]) == 0
        assert (tmp_path / "r2" / "history.jsonl").read_bytes() == (run / "run" / "history.jsonl").read_bytes()
        a, b = (json.loads(p.read_text()) for p in (tmp_path / "r2" / "final.json", run / "run" / "final.json"))
        # only the output directory in the embedded run config differs
        a["run_config"].pop("out_dir"), b["run_config"].pop("out_dir")
        assert a == b

    def test_missing_split_exit_2(self, run, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        code = main(["train", "--dataset", str(run / "data.jsonl"), "--split", str(missing),
                     "--out-dir", str(tmp_path / "r"), *TRAIN_FLAGS])
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_resume_via_cli(self, run, tmp_path):
        base = ["train", "--dataset", str(run / "data.jsonl"), "--split", str(run / "split.json")]
        flags = [f if f != "20" else "10" for f in TRAIN_FLAGS]
        assert main([*base, "--out-dir", str(tmp_path / "a"), *flags]) == 0
        assert main([*base, "--out-dir", str(tmp_path / "b"), "--resume", str(tmp_path / "a" / "state.json"),
                     *TRAIN_FLAGS]) == 0
        a, b = (load_model(p) for p in (tmp_path / "b" / "final.json", run / "run" / "final.json"))
        for p, q in zip(a.parameters(), b.parameters()):
            assert p.value.tobytes() == q.value.tobytes()

    def test_resume_mismatch_exit_2(self, run, tmp_path):
        flags = [f if f != "4" else "8" for f in TRAIN_FLAGS]
        code = main(["train", "--dataset", str(run / "data.jsonl"), "--split", str(run / "split.json"),
                     "--out-dir", str(tmp_path / "c"), "--resume", str(run / "run" / "state.json"), *flags])
        assert code == 2

    def test_vanilla(self, run, tmp_path):
        assert main(["train", "--dataset", str(run / "data.jsonl"), "--split", str(run / "split.json"),
                     "--out-dir", str(tmp_path / "v"), "--model", "vanilla", *TRAIN_FLAGS]) == 0
        assert load_model(tmp_path / "v" / "final.json").config.kind == "vanilla"


class TestPredictEval:
    def test_pipeline_matches_evaluation(self, run, tmp_path):
        ckpt = run / "run" / "final.json"
        assert main(["predict", "--checkpoint", str(ckpt), "--dataset", str(run / "data.jsonl"),
                     "--out", str(tmp_path / "p.jsonl"), "--vtk-dir", str(tmp_path / "vtk")]) == 0
        assert (tmp_path / "p.config.json").exists()
        assert main(["eval", "--predictions", str(tmp_path / "p.jsonl"), "--dataset", str(run / "data.jsonl"),
                     "--split", str(run / "split.json"), "--subset", "train",
                     "--out-dir", str(tmp_path / "ev")]) == 0
        rep = json.loads((tmp_path / "ev" / "report.json").read_text())
        ds = load_dataset(run / "data.jsonl")
        ref, _ = evaluate_model(load_model(ckpt), ds.by_id(load_split(run / "split.json")["train"]))
        assert_allclose(rep["mean_mae"], ref.mean_mae, rtol=1e-12)
        assert rep["mask_tau"] == 1e-8 and "aggregation" in rep
        assert rep["similarity_regression"] is None
        _, data = read_vtk_point_data(tmp_path / "vtk" / f"{ds.ids[0]}.vtk")
        assert "field_1" in data and "sdf" in data

    def test_perfect_predictions(self, run, tmp_path):
        ds = load_dataset(run / "data.jsonl")
        with open(tmp_path / "p.jsonl", "w") as fh:
            for c in ds.cases:
                fh.write(json.dumps({"id": c.id, "predictions": c.fields.tolist()}) + "\n")
        assert main(["eval", "--predictions", str(tmp_path / "p.jsonl"), "--dataset", str(run / "data.jsonl"),
                     "--out-dir", str(tmp_path / "ev")]) == 0
        rep = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert rep["mean_mae"] == [0.0] and rep["mean_rel_error"] == [0.0]

    def test_similarity_regression_present(self, run, tmp_path):
        ds = load_dataset(run / "data.jsonl")
        assert main(["split", "--dataset", str(run / "data.jsonl"), "--mode", "similarity", "--fraction", "0.6",
                     "--out", str(tmp_path / "s.json")]) == 0
        with open(tmp_path / "p.jsonl", "w") as fh:
            for c in ds.cases:
                fh.write(json.dumps({"id": c.id, "predictions": (c.fields * 1.01).tolist()}) + "\n")
        assert main(["eval", "--predictions", str(tmp_path / "p.jsonl"), "--dataset", str(run / "data.jsonl"),
                     "--split", str(tmp_path / "s.json"), "--out-dir", str(tmp_path / "ev")]) == 0
        rep = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert "slope" in rep["similarity_regression"]

    def test_missing_ids_exit_2(self, run, tmp_path, capsys):
        (tmp_path / "p.jsonl").write_text("")
        assert main(["eval", "--predictions", str(tmp_path / "p.jsonl"), "--dataset", str(run / "data.jsonl"),
                     "--out-dir", str(tmp_path / "ev")]) == 2
        assert "missing" in capsys.readouterr().err

    def test_mesh_input_order_invariant(self, run, tmp_path, rng):
        mesh = box_mesh([50.0, 20.0, 10.0])
        write_json_mesh(mesh, tmp_path / "m.json")
        (tmp_path / "d.json").write_text(json.dumps({"family": "BeamWithHole", "params": {
            "length": 100, "thickness": 20, "radius": 12, "pressure": 80}}))
        pts = rng.uniform(-9, 9, size=(40, 3))
        perm = rng.permutation(40)
        outs = []
        for k, p in enumerate((pts, pts[perm])):
            np.savetxt(tmp_path / f"x{k}.txt", p)
            assert main(["predict", "--checkpoint", str(run / "run" / "final.json"), "--mesh", str(tmp_path / "m.json"),
                         "--params", str(tmp_path / "d.json"), "--points", str(tmp_path / f"x{k}.txt"),
                         "--out", str(tmp_path / f"o{k}.jsonl")]) == 0
            outs.append(np.array(json.loads((tmp_path / f"o{k}.jsonl").read_text())["predictions"]))
        assert np.abs(outs[1] - outs[0][perm]).max() <= 1e-12

    def test_family_mismatch_exit_2(self, run, tmp_path):
        assert main(["gen", "--family", "CuboidWithVoid", "--count", "2", "--seed", "1", "--n-min", "10",
                     "--n-max", "20", "--out", str(tmp_path / "c.jsonl")]) == 0
        assert main(["predict", "--checkpoint", str(run / "run" / "final.json"), "--dataset", str(tmp_path / "c.jsonl"),
                     "--out", str(tmp_path / "o.jsonl")]) == 2


class TestBenchSdf:
    def test_bench(self, run, tmp_path):
        assert main(["bench", "--checkpoint", str(run / "run" / "final.json"), "--node-counts", "200", "400",
                     "800", "--repeats", "2", "--out", str(tmp_path / "b.json")]) == 0
        doc = json.loads((tmp_path / "b.json").read_text())
        assert [r["node_count"] for r in doc["records"]] == [200, 400, 800]
        assert doc["exponent"] is not None

    def test_sdf(self, tmp_path):
        write_json_mesh(box_mesh([1.0, 1.0, 1.0]), tmp_path / "m.json")
        (tmp_path / "p.json").write_text(json.dumps([[0, 0, 0], [2, 0, 0]]))
        assert main(["sdf", "--mesh", str(tmp_path / "m.json"), "--points", str(tmp_path / "p.json"),
                     "--out", str(tmp_path / "s.json")]) == 0
        assert_allclose(json.loads((tmp_path / "s.json").read_text())["sdf"], [-1.0, 1.0], atol=1e-12)

    def test_bad_points_exit_2(self, tmp_path):
        write_json_mesh(box_mesh([1.0, 1.0, 1.0]), tmp_path / "m.json")
        (tmp_path / "p.json").write_text(json.dumps([[0, 0]]))
        assert main(["sdf", "--mesh", str(tmp_path / "m.json"), "--points", str(tmp_path / "p.json"),
                     "--out", str(tmp_path / "s.json")]) == 2
