"""End-to-end command tests driven through the argument parser."""

import json
import hashlib
import re
from pathlib import Path

import numpy as np
import pytest

import fedseq.serialize as S
from fedseq.cli import EXIT_DATA, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, EXIT_USAGE, main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def dataset(tmp_path):
    out = tmp_path / "data"
    code = run("prepare-data", "--synthetic", "--num-diseases", 4, "--num-symptoms", 16,
               "--num-samples", 60, "--clients", 2, "--seed", 3, "--out", out)
    assert code == EXIT_OK
    return out


def train_args(data, out, extra=()):
    return ["train-federated", "--data", data, "--rounds", 2, "--local-epochs", 1,
            "--hidden", 8, "--embed", 4, "--batch-size", 8, "--seed", 1,
            "--out", out, *extra]


def tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestPrepareData:
    def test_rerun_with_same_seed_is_byte_identical(self, tmp_path):
        args = ("prepare-data", "--synthetic", "--num-diseases", 4, "--num-symptoms", 16,
                "--num-samples", 60, "--clients", 2, "--seed", 3)
        assert run(*args, "--out", tmp_path / "a") == EXIT_OK
        assert run(*args, "--out", tmp_path / "b") == EXIT_OK
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_synthetic_writes_dataset_dir(self, dataset):
        assert (dataset / "manifest.json").exists()
        assert (dataset / "vocab.json").exists()
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["shard_sizes"] == [30, 30]
        assert manifest["num_pairs"] == 60
        assert all((dataset / name).exists() for name in manifest["shard_files"])

    def test_explicit_sizes(self, tmp_path):
        out = tmp_path / "data"
        code = run("prepare-data", "--synthetic", "--num-diseases", 4, "--num-symptoms", 16,
                   "--num-samples", 50, "--clients", 2, "--sizes", "30,20", "--out", out)
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["shard_sizes"] == [30, 20]

    def test_sizes_sum_mismatch_is_data_error(self, tmp_path):
        code = run("prepare-data", "--synthetic", "--num-samples", 50, "--clients", 2,
                   "--sizes", "30,30", "--out", tmp_path / "d")
        assert code == EXIT_DATA

    def test_sizes_count_mismatch_is_data_error(self, tmp_path):
        code = run("prepare-data", "--synthetic", "--num-samples", 50, "--clients", 3,
                   "--sizes", "30,20", "--out", tmp_path / "d")
        assert code == EXIT_DATA

    def test_csv_source(self, tmp_path):
        csv_path = tmp_path / "raw.csv"
        csv_path.write_text(
            "cough,fever,rash,disease\n"
            + "".join(f"{i%2},{(i+1)%2},1,d{i%3}\n" for i in range(12))
        )
        out = tmp_path / "data"
        code = run("prepare-data", "--input", csv_path, "--clients", 2, "--out", out)
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["num_pairs"] == 12
        assert manifest["source"] == "csv:raw.csv"
        assert csv_path.read_text().startswith("cough")  # input untouched

    def test_bad_csv_cell_is_data_error(self, tmp_path):
        csv_path = tmp_path / "raw.csv"
        csv_path.write_text("cough,disease\n7,flu\n")
        assert run("prepare-data", "--input", csv_path, "--out", tmp_path / "d") == EXIT_DATA

    def test_duplicate_csv_column_is_data_error(self, tmp_path):
        csv_path = tmp_path / "raw.csv"
        csv_path.write_text("cough,cough,disease\n1,1,flu\n")
        assert run("prepare-data", "--input", csv_path, "--out", tmp_path / "d") == EXIT_DATA

    def test_missing_input_is_io_error(self, tmp_path):
        assert run("prepare-data", "--input", tmp_path / "ghost.csv",
                   "--out", tmp_path / "d") == EXIT_IO

    def test_source_required(self, tmp_path):
        assert run("prepare-data", "--out", tmp_path / "d") == EXIT_USAGE


class TestTrainCentralized:
    def test_trains_and_writes_artifacts(self, dataset, tmp_path, capsys):
        out = tmp_path / "model.fedw"
        metrics = tmp_path / "metrics.csv"
        code = run("train-centralized", "--data", dataset, "--epochs", 2, "--hidden", 8,
                   "--embed", 4, "--batch-size", 8, "--seed", 0, "--out", out,
                   "--metrics", metrics)
        assert code == EXIT_OK
        printed = capsys.readouterr().out
        assert "pooled_test_loss=" in printed
        params = S.load_params(out)
        assert params.dims.hidden_dim == 8
        lines = metrics.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,pooled_test_loss"
        assert len(lines) == 3
        manifest = json.loads(out.with_suffix(".run.json").read_text())
        assert manifest["command"] == "train-centralized"
        assert manifest["epochs"] == 2
        assert manifest["client"] == 0
        assert len(manifest["dataset"]["manifest_sha256"]) == 64

    def test_client_selects_the_shard(self, dataset, tmp_path):
        a, b = tmp_path / "c0.fedw", tmp_path / "c1.fedw"
        common = ("train-centralized", "--data", dataset, "--epochs", 1, "--hidden", 8,
                  "--embed", 4, "--batch-size", 8, "--seed", 0)
        assert run(*common, "--client", 0, "--out", a) == EXIT_OK
        assert run(*common, "--client", 1, "--out", b) == EXIT_OK
        assert a.read_bytes() != b.read_bytes()

    def test_client_out_of_range_is_usage_error(self, dataset, tmp_path):
        code = run("train-centralized", "--data", dataset, "--client", 7,
                   "--hidden", 8, "--embed", 4, "--out", tmp_path / "m.fedw")
        assert code == EXIT_USAGE

    def test_zero_epochs_evaluates_only(self, dataset, tmp_path):
        out = tmp_path / "model.fedw"
        metrics = tmp_path / "metrics.csv"
        code = run("train-centralized", "--data", dataset, "--epochs", 0, "--hidden", 8,
                   "--embed", 4, "--out", out, "--metrics", metrics)
        assert code == EXIT_OK
        assert out.exists()
        assert metrics.read_text().splitlines() == ["epoch,train_loss,pooled_test_loss"]

    def test_divergence_exit_code(self, dataset, tmp_path):
        code = run("train-centralized", "--data", dataset, "--epochs", 2, "--hidden", 8,
                   "--embed", 4, "--lr", "1e200", "--clip", 0,
                   "--out", tmp_path / "m.fedw")
        assert code == EXIT_DIVERGENCE

    def test_missing_data_dir_is_data_error(self, tmp_path):
        code = run("train-centralized", "--data", tmp_path / "nope",
                   "--out", tmp_path / "m.fedw")
        assert code == EXIT_DATA


class TestTrainFederated:
    def test_trains_with_checkpoints_and_metrics(self, dataset, tmp_path):
        out = tmp_path / "fed.fedw"
        metrics = tmp_path / "fed.csv"
        ckpt = tmp_path / "ckpt"
        code = run(*train_args(dataset, out,
                               ["--metrics", metrics, "--checkpoint-dir", ckpt]))
        assert code == EXIT_OK
        assert sorted(p.name for p in ckpt.iterdir()) == ["round_1.fedw", "round_2.fedw"]
        rows = metrics.read_text().splitlines()
        assert rows[0] == "round,client_id,train_loss,test_loss,sample_count"
        assert len(rows) == 1 + 2 * 3
        final = S.load_params(out)
        last_ckpt = S.load_params(ckpt / "round_2.fedw")
        for name, arr in final.named_arrays().items():
            assert arr.tobytes() == last_ckpt.named_arrays()[name].tobytes()

    def test_deterministic_across_runs(self, dataset, tmp_path):
        a, b = tmp_path / "a.fedw", tmp_path / "b.fedw"
        assert run(*train_args(dataset, a)) == EXIT_OK
        assert run(*train_args(dataset, b)) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_socket_transport_matches_direct_bitwise(self, dataset, tmp_path):
        direct, socketed = tmp_path / "d.fedw", tmp_path / "s.fedw"
        assert run(*train_args(dataset, direct)) == EXIT_OK
        assert run(*train_args(dataset, socketed, ["--transport", "socket"])) == EXIT_OK
        assert direct.read_bytes() == socketed.read_bytes()

    def test_does_not_mutate_dataset(self, dataset, tmp_path):
        before = tree_digest(dataset)
        assert run(*train_args(dataset, tmp_path / "m.fedw")) == EXIT_OK
        assert tree_digest(dataset) == before

    def test_divergence_exit_code(self, dataset, tmp_path):
        code = run(*train_args(dataset, tmp_path / "m.fedw",
                               ["--lr", "1e200", "--clip", 0]))
        assert code == EXIT_DIVERGENCE

    def test_clients_flag_limits_to_first_shards(self, dataset, tmp_path):
        metrics = tmp_path / "sub.csv"
        code = run(*train_args(dataset, tmp_path / "sub.fedw",
                               ["--clients", 1, "--metrics", metrics]))
        assert code == EXIT_OK
        rows = metrics.read_text().splitlines()
        # per round: one row for client 0 plus the global row
        assert len(rows) == 1 + 2 * 2
        client_ids = {row.split(",")[1] for row in rows[1:]}
        assert "1" not in client_ids

    def test_clients_flag_out_of_range_is_usage_error(self, dataset, tmp_path):
        code = run(*train_args(dataset, tmp_path / "m.fedw", ["--clients", 3]))
        assert code == EXIT_USAGE


@pytest.fixture()
def trained(dataset, tmp_path):
    out = tmp_path / "model.fedw"
    assert run(*train_args(dataset, out)) == EXIT_OK
    return out


class TestEvaluate:
    def test_prints_comparison_table(self, dataset, trained, capsys):
        assert run("evaluate", "--models", trained, "--data", dataset) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        header, rows = lines[0], lines[1:]
        assert header.split() == ["model", "train_loss", "pooled_test_loss"]
        assert len(rows) == 1
        name, train_loss, test_loss = rows[0].split()
        assert name == str(trained)
        assert float(train_loss) >= 0 and float(test_loss) >= 0

    def test_one_row_per_checkpoint(self, dataset, trained, tmp_path, capsys):
        other = tmp_path / "other.fedw"
        assert run(*train_args(dataset, other, ["--seed", 9])) == EXIT_OK
        capsys.readouterr()
        assert run("evaluate", "--models", trained, other,
                   "--data", dataset) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3
        assert str(trained) in lines[1] and str(other) in lines[2]

    def test_corrupt_model_is_io_error(self, dataset, tmp_path):
        bad = tmp_path / "bad.fedw"
        bad.write_bytes(b"FEDW" + b"\x00" * 40)
        assert run("evaluate", "--models", bad, "--data", dataset) == EXIT_IO

    def test_vocab_mismatch_is_data_error(self, trained, tmp_path):
        other = tmp_path / "other"
        assert run("prepare-data", "--synthetic", "--num-diseases", 5, "--num-symptoms", 20,
                   "--num-samples", 40, "--clients", 2, "--out", other) == EXIT_OK
        assert run("evaluate", "--models", trained, "--data", other) == EXIT_DATA


class TestInfer:
    def symptom_from(self, dataset):
        line = (dataset / "client_0.txt").read_text().splitlines()[0]
        return line.split("\t")[0]

    def test_prediction_heatmap_and_json(self, dataset, trained, tmp_path, capsys):
        attn = tmp_path / "attn.json"
        code = run("infer", "--model", trained, "--data", dataset,
                   "--symptoms", self.symptom_from(dataset),
                   "--top-k", 2, "--attention-out", attn)
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "prediction:" in out
        assert "columns:" in out
        ranked = [line for line in out.splitlines()
                  if re.match(r"^  \S+: \S+ \(\d\.\d{3}\)", line)]
        assert ranked, "expected per-output-token symptom rankings"
        assert all(line.count("(") <= 2 for line in ranked)
        for line in ranked:
            names = [chunk.split(" (")[0].strip() for chunk in
                     line.split(": ", 1)[1].split(", ")]
            assert all(name in self.symptom_from(dataset).split() for name in names)
        payload = json.loads(attn.read_text())
        assert set(payload) == {"input_tokens", "output_tokens", "weights"}
        weights = np.array(payload["weights"])
        assert weights.shape == (len(payload["output_tokens"]), len(payload["input_tokens"]))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)
        assert payload["input_tokens"][0] == "<start>"
        assert payload["input_tokens"][-1] == "<end>"

    def test_unknown_symptoms_still_run(self, dataset, trained):
        assert run("infer", "--model", trained, "--data", dataset,
                   "--symptoms", "made-up-symptom") == EXIT_OK

    def test_empty_symptoms_is_usage_error(self, dataset, trained):
        assert run("infer", "--model", trained, "--data", dataset,
                   "--symptoms", " , ") == EXIT_USAGE

    def test_comma_separated_symptoms(self, dataset, trained):
        names = self.symptom_from(dataset).split()
        assert run("infer", "--model", trained, "--data", dataset,
                   "--symptoms", ",".join(names)) == EXIT_OK


class TestUsage:
    def test_no_command(self):
        assert run() == EXIT_USAGE

    def test_unknown_command(self):
        assert run("frobnicate") == EXIT_USAGE

    def test_missing_required_flag(self):
        assert run("train-centralized") == EXIT_USAGE

    def test_help_exits_zero(self):
        assert run("--help") == EXIT_OK
