"""Command-line behavior: verbs, config resolution, exit codes, tables."""

import json
from pathlib import Path

import numpy as np
import pytest

from sphereflow import cli, flow
from sphereflow.checkpoint import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--task", "reach", "--n", 2, "--seed", 5,
               "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", data_dir / "reach_2.sfds",
               "--model", "mlp-baseline", "--epochs", 2,
               "--lr", 1e-3, "--out", out) == 0
    return out


class TestGenData:
    def test_outputs_and_manifest(self, data_dir):
        assert (data_dir / "reach_2.sfds").exists()
        assert (data_dir / "config.json").exists()
        manifest = json.loads(
            (data_dir / "reach_2.sfds.manifest.json").read_text())
        assert manifest["n_demos"] == 2

    def test_rerun_is_byte_identical(self, data_dir, tmp_path):
        assert run("gen-data", "--task", "reach", "--n", 2, "--seed", 5,
                   "--out", tmp_path) == 0
        assert (tmp_path / "reach_2.sfds").read_bytes() == \
            (data_dir / "reach_2.sfds").read_bytes()

    def test_zero_demos_is_usage_error(self, tmp_path):
        assert run("gen-data", "--n", 0, "--out", tmp_path) == cli.EXIT_USAGE

    def test_unknown_task_is_usage_error(self, tmp_path):
        assert run("gen-data", "--task", "juggle",
                   "--out", tmp_path) == cli.EXIT_USAGE

    def test_unknown_flag_is_usage_error(self, tmp_path):
        assert run("gen-data", "--bogus", 3,
                   "--out", tmp_path) == cli.EXIT_USAGE


class TestTrain:
    def test_writes_checkpoints_and_logs(self, train_dir):
        for name in ("params.npz", "ema.npz", "metrics.jsonl",
                     "config.json"):
            assert (train_dir / name).exists()
        _, meta = load_checkpoint(train_dir / "params.npz")
        assert meta["model"] == "mlp-baseline"
        assert meta["horizon"] == 16

    def test_resolved_config_reproduces_run(self, train_dir, tmp_path,
                                            data_dir):
        cfg = json.loads((train_dir / "config.json").read_text())
        assert cfg["verb"] == "train"
        assert run("train", "--config", train_dir / "config.json",
                   "--out", tmp_path) == 0
        assert (tmp_path / "metrics.jsonl").read_bytes() == \
            (train_dir / "metrics.jsonl").read_bytes()

    def test_zero_learning_rate_leaves_params_untouched(self, data_dir,
                                                        tmp_path):
        assert run("train", "--data", data_dir / "reach_2.sfds",
                   "--model", "mlp-baseline", "--epochs", 2, "--lr", 0,
                   "--model-seed", 11, "--out", tmp_path) == 0
        state, _ = load_checkpoint(tmp_path / "params.npz")
        fresh = flow.make_mlp_policy(np.random.default_rng(11))
        for name, tensor in fresh.named_parameters().items():
            np.testing.assert_array_equal(state[name], tensor.data)

    def test_missing_data_flag_is_usage_error(self, tmp_path):
        assert run("train", "--out", tmp_path) == cli.EXIT_USAGE

    def test_unreadable_data_is_runtime_error(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope.sfds",
                   "--out", tmp_path) == cli.EXIT_RUNTIME

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"data": "x", "warp_factor": 9}))
        assert run("train", "--config", bad,
                   "--out", tmp_path) == cli.EXIT_USAGE


class TestEval:
    def test_oracle_sentinel_is_perfect(self, tmp_path):
        assert run("eval", "--checkpoint", "oracle", "--task", "reach",
                   "--episodes", 6, "--seed", 3, "--out", tmp_path) == 0
        rows = read_jsonl(tmp_path / "eval.jsonl")
        assert rows[0]["success_rate"] == 1.0
        assert rows[0]["checkpoint"] == "oracle"

    def test_trained_checkpoint_loads_and_reruns_identically(
            self, train_dir, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert run("eval", "--checkpoint", train_dir, "--task", "reach",
                       "--episodes", 2, "--out", out) == 0
        reports = [(out / "report.json").read_bytes() for out in outs]
        assert reports[0] == reports[1]

    def test_perturbation_rows_are_comparable(self, tmp_path):
        for perturb in ("none", "haar"):
            assert run("eval", "--checkpoint", "oracle", "--task", "reach",
                       "--episodes", 4, "--perturb", perturb,
                       "--out", tmp_path / perturb) == 0
        rows = [read_jsonl(tmp_path / p / "eval.jsonl")[0]
                for p in ("none", "haar")]
        assert [r["perturbation"] for r in rows] == ["none", "haar"]
        assert rows[0]["episodes"] == rows[1]["episodes"] == 4

    def test_missing_checkpoint_is_runtime_error(self, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "missing",
                   "--out", tmp_path) == cli.EXIT_RUNTIME

    def test_checkpoint_flag_is_required(self, tmp_path):
        assert run("eval", "--out", tmp_path) == cli.EXIT_USAGE


class TestSweepSteps:
    def test_table_has_success_and_timing_columns(self, tmp_path):
        assert run("sweep-steps", "--checkpoint", "random", "--task", "reach",
                   "--episodes", 2, "--steps", "1,2", "--out", tmp_path) == 0
        rows = read_jsonl(tmp_path / "sweep.jsonl")
        assert [r["sampler_steps"] for r in rows] == [1, 2]
        assert all(r["mean_predict_seconds"] > 0 for r in rows)

    def test_empty_steps_is_usage_error(self, tmp_path):
        assert run("sweep-steps", "--checkpoint", "oracle", "--steps", "",
                   "--out", tmp_path) == cli.EXIT_USAGE

    def test_non_integer_steps_is_usage_error(self, tmp_path):
        assert run("sweep-steps", "--checkpoint", "oracle", "--steps",
                   "1,fast", "--out", tmp_path) == cli.EXIT_USAGE


class TestEquivCheck:
    def test_all_layers_pass(self, tmp_path):
        assert run("equiv-check", "--trials", 3, "--out", tmp_path) == 0
        rows = read_jsonl(tmp_path / "equiv.jsonl")
        assert {r["layer"] for r in rows} == set(cli.EQUIV_LAYERS)
        assert all(r["status"] == "PASS" for r in rows)
        assert all(r["max_violation"] <= 1e-6 for r in rows)

    def test_layer_filter(self, tmp_path):
        assert run("equiv-check", "--layers", "equi_linear,unet",
                   "--trials", 2, "--out", tmp_path) == 0
        rows = read_jsonl(tmp_path / "equiv.jsonl")
        assert [r["layer"] for r in rows] == ["equi_linear", "unet"]

    def test_unknown_layer_is_usage_error(self, tmp_path):
        assert run("equiv-check", "--layers", "warp",
                   "--out", tmp_path) == cli.EXIT_USAGE

    def test_mlp_baseline_is_expected_fail(self, tmp_path):
        assert run("equiv-check", "--model", "mlp-baseline", "--trials", 3,
                   "--out", tmp_path) == 0
        row = read_jsonl(tmp_path / "equiv.jsonl")[0]
        assert row["status"] == "EXPECTED-FAIL"
        assert row["max_violation"] >= 0.1


class TestGradCheck:
    def test_fast_subset_passes(self, tmp_path):
        assert run("grad-check", "--ops", "equi_linear,gated",
                   "--out", tmp_path) == 0
        rows = read_jsonl(tmp_path / "grad.jsonl")
        assert all(r["status"] == "PASS" for r in rows)
        tols = {r["op"]: r["tolerance"] for r in rows}
        assert tols == {"equi_linear": 1e-7, "gated": 1e-4}

    def test_unknown_op_is_usage_error(self, tmp_path):
        assert run("grad-check", "--ops", "levitate",
                   "--out", tmp_path) == cli.EXIT_USAGE


class TestParsing:
    def test_no_verb_is_usage_error(self):
        assert run() == cli.EXIT_USAGE

    def test_out_is_required(self):
        assert run("grad-check", "--ops", "gated") == cli.EXIT_USAGE

    def test_resolved_config_written_for_every_verb(self, tmp_path):
        assert run("grad-check", "--ops", "gated", "--seed", 9,
                   "--out", tmp_path) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert cfg == {"verb": "grad-check", "ops": "gated", "seed": 9,
                       "out": str(tmp_path)}
