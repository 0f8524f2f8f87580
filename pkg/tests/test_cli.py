import csv
import json

import numpy as np
import pytest

from fedclust.cli import main
from fedclust.model import new_model, save_checkpoint
from fedclust.numerics import save_matrix_csv


def write_config(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def base_train_doc():
    return {
        "dataset": {"source": "gmm", "k_star": 2, "d": 4, "n_per_cluster": 40,
                     "separation": 6.0, "seed": 0},
        "partition": {"m": 2, "p": 0.5, "s": 40, "seed": 1},
        "federation": {"rounds": 2, "k": 2, "failure": {"rate": 0.0, "seed": 0}},
        "train": {"lambda": 0.5, "eta_reg": 0.0, "lr": 0.05, "epochs": 1,
                   "batch": 16, "seed": 3},
        "model": {"d_latent": 3, "hidden_encoder": 8, "hidden_predictor": 2},
    }


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestPartitionCommand:
    def doc(self, p):
        return {
            "dataset": {"source": "gmm", "k_star": 3, "d": 4, "n_per_cluster": 200,
                         "separation": 4.0, "seed": 0},
            "partition": {"m": 3, "p": p, "s": 150, "seed": 2},
        }

    def test_p_one_all_pure(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", self.doc(1.0))
        assert main(["partition", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        rows = read_csv(tmp_path / "out" / "purity.csv")
        assert rows[0] == ["client_id", "n_samples", "purity"]
        assert all(float(r[2]) == 1.0 for r in rows[1:])

    def test_p_zero_purity_near_uniform(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", self.doc(0.0))
        assert main(["partition", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        rows = read_csv(tmp_path / "out" / "purity.csv")
        mean_purity = np.mean([float(r[2]) for r in rows[1:]])
        assert abs(mean_purity - 1 / 3) < 0.12

    def test_missing_field_exit_2(self, tmp_path, capsys):
        doc = self.doc(0.5)
        del doc["partition"]["s"]
        cfg = write_config(tmp_path, "c.json", doc)
        assert main(["partition", "--config", cfg]) == 2
        assert "'s' is a required property" in capsys.readouterr().err


class TestTrainCommand:
    def test_single_round_lr_zero(self, tmp_path):
        doc = base_train_doc()
        doc["federation"]["rounds"] = 1
        doc["train"]["lr"] = 0.0
        cfg = write_config(tmp_path, "c.json", doc)
        out = tmp_path / "out"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out / "history.csv")
        assert len(rows) == 2  # header + 1 round
        assert rows[0] == ["round", "nmi", "kappa", "effective_rank",
                            "mean_abs_offdiag_corr", "loss_mean"]

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", base_train_doc())
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", cfg, "--out", str(a)]) == 0
        assert main(["train", "--config", cfg, "--out", str(b)]) == 0
        for name in ("history.csv", "labels.csv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_labels_cover_dataset(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", base_train_doc())
        out = tmp_path / "out"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out / "labels.csv")
        assert rows[0] == ["index", "label"]
        assert len(rows) == 1 + 2 * 40

    def test_unknown_key_rejected(self, tmp_path):
        doc = base_train_doc()
        doc["surprise"] = True
        cfg = write_config(tmp_path, "c.json", doc)
        assert main(["train", "--config", cfg]) == 2


class TestTheoryCommand:
    def doc(self, steps):
        return {"d": 6, "d_prime": 4, "L1": 1, "L2": 1, "k": 2, "n_c": 8,
                "lambda": 1.0, "dt": 1e-4, "steps": steps, "seed": 0}

    def test_zero_steps_header_only(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", self.doc(0))
        out = tmp_path / "out"
        assert main(["theory", "--config", cfg, "--out", str(out)]) == 0
        lines = (out / "probe.csv").read_text().strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith("step,tau")

    def test_reference_instance_summary(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", self.doc(60))
        out = tmp_path / "out"
        assert main(["theory", "--config", cfg, "--out", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "median residual" in captured
        doc = json.loads((out / "assumptions.json").read_text())
        assert doc["residuals"][0]["median_rel"] < 1e-3
        assert doc["c_drift"] < 1e-3

    def test_bad_dims_schema_error(self, tmp_path):
        doc = self.doc(10)
        doc["d"] = 0
        cfg = write_config(tmp_path, "c.json", doc)
        assert main(["theory", "--config", cfg]) == 2


class TestDiagnoseCommand:
    def test_rank_one_model(self, tmp_path):
        # encoder projects onto a single direction: all but one sigma near zero
        from fedclust.model import ClusterContrastiveModel, DenseLayer, DenseStack

        rng = np.random.default_rng(0)
        v = rng.standard_normal((3, 1))
        enc = DenseStack([DenseLayer(v @ rng.standard_normal((1, 4)), np.zeros(3), "identity")])
        pred = DenseStack([DenseLayer(np.eye(3), np.zeros(3), "identity")])
        model = ClusterContrastiveModel(enc, pred, 3)
        save_checkpoint(model, tmp_path / "model.json")
        save_matrix_csv(rng.standard_normal((4, 100)), tmp_path / "X.csv")
        cfg = write_config(tmp_path, "c.json", {
            "model_path": str(tmp_path / "model.json"),
            "data_path": str(tmp_path / "X.csv"),
        })
        out = tmp_path / "out"
        assert main(["diagnose", "--config", cfg, "--out", str(out)]) == 0
        doc = json.loads((out / "collapse.json").read_text())
        assert doc["near_zero_count"] == 2  # d_latent - 1

    def test_identity_encoder_on_whitened_data(self, tmp_path):
        from fedclust.model import ClusterContrastiveModel, DenseLayer, DenseStack

        rng = np.random.default_rng(1)
        enc = DenseStack([DenseLayer(np.eye(4), np.zeros(4), "identity")])
        pred = DenseStack([DenseLayer(np.eye(4), np.zeros(4), "identity")])
        save_checkpoint(ClusterContrastiveModel(enc, pred, 4), tmp_path / "model.json")
        save_matrix_csv(rng.standard_normal((4, 4000)), tmp_path / "X.csv")
        cfg = write_config(tmp_path, "c.json", {
            "model_path": str(tmp_path / "model.json"),
            "data_path": str(tmp_path / "X.csv"),
        })
        out = tmp_path / "out"
        assert main(["diagnose", "--config", cfg, "--out", str(out)]) == 0
        doc = json.loads((out / "collapse.json").read_text())
        assert abs(doc["effective_rank"] - 4) / 4 < 0.1

    def test_missing_file_exit_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", {
            "model_path": str(tmp_path / "nope.json"),
            "data_path": str(tmp_path / "also_nope.csv"),
        })
        assert main(["diagnose", "--config", cfg, "--out", str(tmp_path)]) == 3
        assert "nope.json" in capsys.readouterr().err


class TestFailuresCommand:
    def test_sweep_rows(self, tmp_path):
        doc = base_train_doc()
        doc["dataset"]["k_star"] = 4
        doc["partition"]["m"] = 4
        doc["federation"]["k"] = 4
        doc["rates"] = [0.0, 0.2, 0.4]
        cfg = write_config(tmp_path, "c.json", doc)
        out = tmp_path / "out"
        assert main(["failures", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out / "sweep.csv")
        assert rows[0][0] == "rate"
        assert len(rows) == 4

    def test_rate_zero_matches_train(self, tmp_path):
        doc = base_train_doc()
        doc["rates"] = [0.0]
        cfg_s = write_config(tmp_path, "sweep.json", doc)
        out_s = tmp_path / "sweep_out"
        assert main(["failures", "--config", cfg_s, "--out", str(out_s)]) == 0

        train_doc = base_train_doc()
        cfg_t = write_config(tmp_path, "train.json", train_doc)
        out_t = tmp_path / "train_out"
        assert main(["train", "--config", cfg_t, "--out", str(out_t)]) == 0

        sweep_row = read_csv(out_s / "sweep.csv")[1]
        hist_last = read_csv(out_t / "history.csv")[-1]
        assert sweep_row[1:] == hist_last[1:]

    def test_rate_one_rejected(self, tmp_path):
        doc = base_train_doc()
        doc["rates"] = [1.0]
        cfg = write_config(tmp_path, "c.json", doc)
        assert main(["failures", "--config", cfg]) == 2


def test_threads_env_equivalence(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "c.json", base_train_doc())
    a, b = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("FEDCLUST_THREADS", "1")
    assert main(["train", "--config", cfg, "--out", str(a)]) == 0
    monkeypatch.setenv("FEDCLUST_THREADS", "4")
    assert main(["train", "--config", cfg, "--out", str(b)]) == 0
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
