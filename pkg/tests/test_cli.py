import csv
import json

import jsonschema
import numpy as np
import pytest

from anatgraph import cli, formats
from anatgraph import numerics as nx
from anatgraph.config import RunConfig
from anatgraph.patch_graph import Volume


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def _params(ckpt):
    t = formats.read_checkpoint(ckpt)
    return {k: v for k, v in t.items() if k.split(".")[0] in ("enc", "gcn")}


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSynth:
    def test_default_subject_count(self):
        assert RunConfig().data.n_subjects == 40

    def test_subjects_flag(self, tmp_path, tiny_config):
        assert _run("synth", tmp_path, "--config", tiny_config, "--subjects", 2) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["subjects"]) == 2
        assert {"version", "seed", "config", "subjects"} <= manifest.keys()

    def test_invalid_lesion_box_names_field(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"data": {"lesion_box": [[0, 0, 0], [70, 8, 8]]}}))
        assert _run("synth", tmp_path / "out", "--config", bad) == 2
        assert "data.lesion_box" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        assert _run("synth", tmp_path / "out", "--config", bad) == 2

    def test_seed_env_and_flag(self, tmp_path, tiny_config, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "11")
        _run("synth", tmp_path / "env", "--config", tiny_config, "--subjects", 2)
        _run("synth", tmp_path / "flag", "--config", tiny_config, "--subjects", 2, "--seed", 12)
        assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seed"] == 11
        assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["seed"] == 12

    def test_bad_seed_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        assert _run("synth", tmp_path, "--subjects", 2) == 2


class TestGraph:
    def test_exports_one_json_per_subject(self, tmp_path, tiny_cohort):
        assert _run("graph", tiny_cohort, tmp_path, "--workers", 2) == 0
        files = sorted(tmp_path.glob("*.graph.json"))
        assert len(files) == 4
        g = json.loads(files[0].read_text())
        assert set(g) == {"subject_id", "n", "centers_mm", "edges", "rho_mm"}
        assert all(j < k for j, k in g["edges"])

    def test_missing_manifest(self, tmp_path):
        assert _run("graph", tmp_path, tmp_path / "o") == 3


class TestTrain:
    def test_artifacts(self, tiny_run):
        meta = json.loads((tiny_run / "model.json").read_text())
        assert meta["config_hash"] == RunConfig.model_validate(meta["config"]).hash()
        rows = [json.loads(line) for line in (tiny_run / "metrics.jsonl").read_text().splitlines()]
        assert {r["phase"] for r in rows} == {"patch", "graph"}

    def test_missing_manifest(self, tmp_path):
        assert _run("train", tmp_path, tmp_path / "o") == 3

    def test_lr_zero_matches_init_only(self, tmp_path, tiny_config, tiny_cohort):
        # with lr 0 only training state moves: BN running stats, queues, Adam moments
        _run("train", tiny_cohort, tmp_path / "a", "--config", tiny_config, "--init-only")
        _run("train", tiny_cohort, tmp_path / "b", "--config", tiny_config, "--steps", 1, "--lr", 0)
        a, b = _params(tmp_path / "a" / "model.ckpt"), _params(tmp_path / "b" / "model.ckpt")
        assert a.keys() == b.keys()
        for name in a:
            assert np.array_equal(a[name], b[name]), name

    def test_rerun_identical_metrics(self, tmp_path, tiny_config, tiny_cohort, tiny_run):
        _run("train", tiny_cohort, tmp_path, "--config", tiny_config, "--workers", 3)
        assert (tmp_path / "metrics.jsonl").read_bytes() == (tiny_run / "metrics.jsonl").read_bytes()

    def test_resume_is_bit_exact(self, tmp_path, tiny_config, tiny_cohort, tiny_run):
        _run("train", tiny_cohort, tmp_path, "--config", tiny_config, "--steps", 1)
        _run("train", tiny_cohort, tmp_path, "--config", tiny_config, "--steps", 1, "--resume")
        assert (tmp_path / "model.ckpt").read_bytes() == (tiny_run / "model.ckpt").read_bytes()
        assert (tmp_path / "metrics.jsonl").read_bytes() == (tiny_run / "metrics.jsonl").read_bytes()

    def test_resume_without_checkpoint(self, tmp_path, tiny_config, tiny_cohort):
        assert _run("train", tiny_cohort, tmp_path, "--config", tiny_config, "--resume") == 3

    def test_non_finite_loss_exit_code(self, tmp_path, tiny_config, tiny_cohort, monkeypatch):
        def broken(*args, **kwargs):
            raise nx.NonFiniteError("info_nce produced nan")

        monkeypatch.setattr("anatgraph.trainer.info_nce", broken)
        assert _run("train", tiny_cohort, tmp_path, "--config", tiny_config, "--steps", 1) == 4


class TestExtract:
    def test_twice_identical_and_width(self, tmp_path, tiny_cohort, tiny_run):
        ckpt = tiny_run / "model.ckpt"
        _run("extract", ckpt, tiny_cohort, tmp_path / "a.csv")
        _run("extract", ckpt, tiny_cohort, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = _csv(tmp_path / "a.csv")
        f = RunConfig.model_validate(json.loads((tiny_run / "model.json").read_text())["config"]).model.feature_dim
        assert len(rows[0]) == 1 + f and len(rows) == 5

    def test_pooled_is_mean_of_nodes(self, tmp_path, tiny_cohort, tiny_run):
        _run("extract", tiny_run / "model.ckpt", tiny_cohort, tmp_path / "p.csv", "--per-node", tmp_path / "n.csv")
        pooled = {r[0]: np.array(r[1:], dtype=float) for r in _csv(tmp_path / "p.csv")[1:]}
        nodes = _csv(tmp_path / "n.csv")[1:]
        for sid, vec in pooled.items():
            mine = np.array([r[2:] for r in nodes if r[0] == sid], dtype=float)
            np.testing.assert_allclose(mine.mean(axis=0), vec, atol=1e-6)

    def test_config_mismatch_exit_2(self, tmp_path, tiny_cohort, tiny_run):
        cfg = json.loads((tiny_run / "model.json").read_text())["config"]
        cfg["model"]["feature_dim"] = 8
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert _run("extract", tiny_run / "model.ckpt", tiny_cohort, tmp_path / "x.csv", "--config", path) == 2


def _write_table(path, ids, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for sid, row in zip(ids, rows):
            w.writerow([sid, *np.atleast_1d(row)])


class TestProbe:
    @pytest.fixture
    def linear(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((30, 4))
        y = x @ np.array([1.0, -2.0, 0.5, 3.0]) + 1.0
        ids = [f"s{i}" for i in range(30)]
        _write_table(tmp_path / "f.csv", ids, x, ["subject_id", "f0", "f1", "f2", "f3"])
        _write_table(tmp_path / "y.csv", ids, y, ["subject_id", "target"])
        return tmp_path

    def test_perfect_linear_target(self, linear):
        assert _run("probe", linear / "f.csv", linear / "y.csv", linear / "r.json", "--task", "regression", "--lam", 1e-8) == 0
        res = json.loads((linear / "r.json").read_text())
        assert res["mean"] == pytest.approx(1.0, abs=1e-6)
        jsonschema.validate(res, cli.PROBE_RESULT_SCHEMA)

    def test_k_larger_than_subjects(self, linear):
        assert _run("probe", linear / "f.csv", linear / "y.csv", linear / "r.json", "--task", "regression", "-k", 31) == 2

    def test_classification_schema(self, tmp_path, tiny_cohort, tiny_run):
        _run("extract", tiny_run / "model.ckpt", tiny_cohort, tmp_path / "f.csv")
        assert _run("probe", tmp_path / "f.csv", tiny_cohort / "labels.csv", tmp_path / "r.json", "-k", 4) == 0
        res = json.loads((tmp_path / "r.json").read_text())
        jsonschema.validate(res, cli.PROBE_RESULT_SCHEMA)
        assert res["metric"] == "accuracy" and len(res["fold_values"]) == 4


class TestExplain:
    @pytest.fixture
    def probe_json(self, tmp_path, tiny_cohort, tiny_run):
        _run("extract", tiny_run / "model.ckpt", tiny_cohort, tmp_path / "f.csv")
        _run("probe", tmp_path / "f.csv", tiny_cohort / "labels.csv", tmp_path / "p.json", "-k", 4)
        return tmp_path / "p.json"

    def test_logit_check_and_render(self, tmp_path, tiny_cohort, tiny_run, probe_json):
        code = _run(
            "explain", tiny_run / "model.ckpt", tiny_cohort, probe_json, tmp_path / "e.json",
            "--subject", "sub-001", "--render", tmp_path / "h.rvol",
        )
        assert code == 0
        out = json.loads((tmp_path / "e.json").read_text())
        assert out["logit_check"] < 1e-5
        assert {"subject_id", "beta", "scores_raw", "scores_norm", "logit_check"} <= out.keys()
        heat = Volume.load(tmp_path / "h.rvol").voxels
        assert heat.min() >= 0.0 and heat.max() <= 1.0

    def test_zero_probe_gives_flat_half(self, tmp_path, tiny_cohort, tiny_run, probe_json):
        blob = json.loads(probe_json.read_text())
        blob["model"]["coef"] = np.zeros_like(blob["model"]["coef"]).tolist()
        blob["model"]["intercept"] = [0.0, 0.0]
        probe_json.write_text(json.dumps(blob))
        _run("explain", tiny_run / "model.ckpt", tiny_cohort, probe_json, tmp_path / "e.json", "--subject", "sub-000")
        assert set(json.loads((tmp_path / "e.json").read_text())["scores_norm"]) == {0.5}

    def test_dimension_mismatch(self, tmp_path, tiny_cohort, tiny_run, probe_json):
        blob = json.loads(probe_json.read_text())
        blob["model"]["coef"] = [row[:-1] for row in blob["model"]["coef"]]
        probe_json.write_text(json.dumps(blob))
        code = _run("explain", tiny_run / "model.ckpt", tiny_cohort, probe_json, tmp_path / "e.json", "--subject", "sub-000")
        assert code == 2

    def test_unknown_subject(self, tmp_path, tiny_cohort, tiny_run, probe_json):
        assert _run("explain", tiny_run / "model.ckpt", tiny_cohort, probe_json, tmp_path / "e.json", "--subject", "nope") == 2


class TestIngest:
    def test_hu_window(self, tmp_path):
        hu = np.array([-1024.0, -392.0, 240.0, 500.0], dtype=np.float32).reshape(1, 1, 4)
        Volume(hu).save(tmp_path / "ct.rvol")
        vol = cli.ingest_real_volume(tmp_path / "ct.rvol", raw_hu=True)
        assert vol.voxels.ravel().tolist() == [-1.0, 0.0, 1.0, 1.0]

    def test_without_flag_passes_through(self, tmp_path):
        v = np.linspace(-1, 1, 8, dtype=np.float32).reshape(2, 2, 2)
        Volume(v).save(tmp_path / "a.rvol")
        assert np.array_equal(cli.ingest_real_volume(tmp_path / "a.rvol").voxels, v)

    def test_bad_magic_exit_3(self, tmp_path):
        (tmp_path / "x.rvol").write_bytes(b"NOPE" + bytes(20))
        assert _run("ingest", tmp_path / "x.rvol", tmp_path / "y.rvol", "--hu") == 3
