import json
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from aim_merge.cli import app
from aim_merge.core.calibration import CalibrationSet, save_calibration
from aim_merge.core.manifest import file_sha256, load_manifest, manifest_path
from aim_merge.core.profiler import load_profile
from aim_merge.core.runtime import random_params, save_model_spec
from aim_merge.core.tensors import checkpoint_load, checkpoint_save

runner = CliRunner()


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setenv("AIM_LOG_LEVEL", "CRITICAL")
    monkeypatch.delenv("AIM_CONFIG", raising=False)
    monkeypatch.delenv("AIM_THREADS", raising=False)


@pytest.fixture
def files(tmp_path, toy_spec, toy_base, toy_experts, toy_calib):
    paths = {
        "spec": tmp_path / "spec.json",
        "base": tmp_path / "base.tmap",
        "code": tmp_path / "code.tmap",
        "math": tmp_path / "math.tmap",
        "calib": tmp_path / "calib.csv",
    }
    save_model_spec(toy_spec, paths["spec"])
    checkpoint_save(toy_base, paths["base"])
    checkpoint_save(toy_experts[0], paths["code"])
    checkpoint_save(toy_experts[1], paths["math"])
    save_calibration(toy_calib, paths["calib"])
    return {k: str(v) for k, v in paths.items()}


def _invoke(args):
    return runner.invoke(app, args)


def _merge(files, tmp_path, method="task_arithmetic", tag="m"):
    delta = tmp_path / f"{tag}.delta.tmap"
    model = tmp_path / f"{tag}.model.tmap"
    result = _invoke([
        "merge", "--method", method, "--base", files["base"],
        "--expert", files["code"], "--expert", files["math"],
        "--out-delta", str(delta), "--out-model", str(model),
    ])
    assert result.exit_code == 0, result.output
    return delta, model


def _profile(files, tmp_path, variant="activation"):
    out = tmp_path / f"{variant}.json"
    result = _invoke([
        "profile", "--spec", files["spec"], "--base", files["base"], "--calib", files["calib"],
        "--variant", variant, "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    return out


class TestProfile:
    def test_writes_profile_and_manifest(self, files, tmp_path):
        out = _profile(files, tmp_path)
        profile = load_profile(out)
        assert profile.kind == "activation"
        assert profile.sample_count == 16
        manifest = load_manifest(manifest_path(out))
        assert manifest.command == "profile"
        assert manifest.outputs[str(out)] == file_sha256(out)

    def test_missing_calibration(self, files, tmp_path):
        result = _invoke([
            "profile", "--spec", files["spec"], "--base", files["base"],
            "--calib", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "p.json"),
        ])
        assert result.exit_code == 2

    def test_unknown_variant(self, files, tmp_path):
        result = _invoke([
            "profile", "--spec", files["spec"], "--base", files["base"], "--calib", files["calib"],
            "--variant", "fisher", "--out", str(tmp_path / "p.json"),
        ])
        assert result.exit_code == 2

    def test_zero_inputs_give_an_empty_sensitivity_profile(self, tmp_path, identity_spec):
        save_model_spec(identity_spec, tmp_path / "spec.json")
        checkpoint_save(random_params(identity_spec, seed=3), tmp_path / "base.tmap")
        save_calibration(CalibrationSet(np.zeros((4, 3))), tmp_path / "zeros.csv")
        out = tmp_path / "sens.json"
        result = _invoke([
            "profile", "--spec", str(tmp_path / "spec.json"), "--base", str(tmp_path / "base.tmap"),
            "--calib", str(tmp_path / "zeros.csv"), "--variant", "sensitivity", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        profile = load_profile(out)
        assert all(not np.any(values) for values in profile.tensors.values())


class TestMerge:
    def test_expert_equal_to_base_changes_nothing(self, files, tmp_path):
        model = tmp_path / "avg.tmap"
        result = _invoke([
            "merge", "--method", "average", "--base", files["base"], "--expert", files["base"],
            "--out-delta", str(tmp_path / "d.tmap"), "--out-model", str(model),
        ])
        assert result.exit_code == 0, result.output
        merged = checkpoint_load(model)
        base = checkpoint_load(Path(files["base"]))
        assert all(np.array_equal(merged[n], base[n]) for n in base.names)
        assert json.loads(result.stdout)["experts"] == 1

    def test_dare_is_reproducible(self, files, tmp_path):
        first, _ = _merge(files, tmp_path, "dare_ties", "a")
        second, _ = _merge(files, tmp_path, "dare_ties", "b")
        assert file_sha256(first) == file_sha256(second)

    def test_incompatible_expert(self, files, tmp_path, identity_spec):
        other = tmp_path / "other.tmap"
        checkpoint_save(random_params(identity_spec, seed=1), other)
        result = _invoke([
            "merge", "--base", files["base"], "--expert", str(other),
            "--out-delta", str(tmp_path / "d.tmap"), "--out-model", str(tmp_path / "m.tmap"),
        ])
        assert result.exit_code == 3

    def test_lambda_count_must_match(self, files, tmp_path):
        result = _invoke([
            "merge", "--base", files["base"], "--expert", files["code"], "--expert", files["math"],
            "--lambda", "0.5", "--out-delta", str(tmp_path / "d.tmap"), "--out-model", str(tmp_path / "m.tmap"),
        ])
        assert result.exit_code == 2

    def test_json_settings_are_overridden_by_flags(self, files, tmp_path):
        settings = tmp_path / "merge.json"
        settings.write_text(json.dumps({"method": "ties", "density": 0.3}))
        delta = tmp_path / "d.tmap"
        result = _invoke([
            "merge", "--merge-config", str(settings), "--density", "0.7", "--base", files["base"],
            "--expert", files["code"], "--out-delta", str(delta), "--out-model", str(tmp_path / "m.tmap"),
        ])
        assert result.exit_code == 0, result.output
        manifest = load_manifest(manifest_path(delta))
        assert manifest.config["merge"]["method"] == "ties"
        assert manifest.config["merge"]["density"] == 0.7

    def test_manifest_replays(self, files, tmp_path):
        delta, model = _merge(files, tmp_path, "dare_ta")
        manifest = load_manifest(manifest_path(delta))
        recorded = dict(manifest.outputs)
        result = _invoke(manifest.argv)
        assert result.exit_code == 0, result.output
        assert {path: file_sha256(Path(path)) for path in recorded} == recorded
        assert str(model) in recorded


class TestRelax:
    def test_omega_one_is_the_plain_merge(self, files, tmp_path):
        delta, model = _merge(files, tmp_path)
        profile = _profile(files, tmp_path)
        out = tmp_path / "aim.tmap"
        result = _invoke([
            "relax", "--base", files["base"], "--delta", str(delta), "--profile", str(profile),
            "--omega", "1.0", "--spec", files["spec"], "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        relaxed = checkpoint_load(out)
        merged = checkpoint_load(model)
        assert all(relaxed[n].tobytes() == merged[n].tobytes() for n in merged.names)

    def test_default_omega_comes_from_config(self, files, tmp_path):
        delta, _ = _merge(files, tmp_path)
        profile = _profile(files, tmp_path)
        result = _invoke([
            "relax", "--base", files["base"], "--delta", str(delta), "--profile", str(profile),
            "--out", str(tmp_path / "aim.tmap"),
        ])
        assert result.exit_code == 0, result.output
        assert json.loads(result.stdout)["omega"] == 0.4

    def test_omega_out_of_range(self, files, tmp_path):
        delta, _ = _merge(files, tmp_path)
        profile = _profile(files, tmp_path)
        result = _invoke([
            "relax", "--base", files["base"], "--delta", str(delta), "--profile", str(profile),
            "--omega", "1.5", "--out", str(tmp_path / "aim.tmap"),
        ])
        assert result.exit_code == 2

    def test_profile_for_another_model(self, files, tmp_path, identity_spec):
        delta, _ = _merge(files, tmp_path)
        profile = _profile(files, tmp_path)
        other_spec = tmp_path / "other.json"
        save_model_spec(identity_spec, other_spec)
        result = _invoke([
            "relax", "--base", files["base"], "--delta", str(delta), "--profile", str(profile),
            "--spec", str(other_spec), "--out", str(tmp_path / "aim.tmap"),
        ])
        assert result.exit_code == 3


class TestEval:
    def test_three_expert_row(self, data_dir):
        result = _invoke([
            "eval", "--scores", str(data_dir / "merge_scores.csv"),
            "--population", "Code", "--population", "Instruction Tuned", "--population", "Math",
            "--merged", "DARE-Ties all", "--include-base",
        ])
        assert result.exit_code == 0, result.output
        report = json.loads(result.stdout)
        assert report["hv_gain"] == pytest.approx(0.17, abs=0.01)
        assert report["population"] == ["Base", "Code", "Instruction Tuned", "Math"]

    def test_population_member_gains_nothing(self, data_dir):
        result = _invoke([
            "eval", "--scores", str(data_dir / "merge_scores.csv"),
            "--population", "Code", "--population", "Math", "--merged", "Math",
        ])
        assert result.exit_code == 0, result.output
        assert json.loads(result.stdout)["hv_gain"] == 0.0

    def test_two_dimensional_case(self, tmp_path):
        scores = tmp_path / "scores.csv"
        scores.write_text("model,a,b\nold,0.5,0.5\nnew,0.8,0.2\n")
        out = tmp_path / "report.json"
        result = _invoke(["eval", "--scores", str(scores), "--population", "old", "--merged", "new",
                          "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert json.loads(result.stdout)["hv_gain"] == pytest.approx(0.2449, abs=1e-4)
        assert json.loads(out.read_text()) == json.loads(result.stdout)
        assert manifest_path(out).is_file()

    def test_bad_score_table(self, tmp_path):
        scores = tmp_path / "scores.csv"
        scores.write_text("model,a\nx,120\ny,3\n")
        result = _invoke(["eval", "--scores", str(scores), "--population", "x", "--merged", "y"])
        assert result.exit_code == 2


class TestAblate:
    def test_score_omega_sweep(self, data_dir):
        result = _invoke([
            "ablate", "--omegas", "0.0,0.4,1.0", "--scores", str(data_dir / "omega_sweep_scores.csv"),
            "--population", "Code", "--population", "Instruction Tuned", "--population", "Math",
            "--merged-template", "WIDEN w={omega:.1f}",
        ])
        assert result.exit_code == 0, result.output
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "omega,hv_gain,hv_gain_rel_change"
        gains = [float(line.split(",")[1]) for line in lines[1:]]
        np.testing.assert_allclose(gains, [0.3027, 0.3013, 0.2879], atol=5e-4)

    def test_calib_size_sweep(self, files, tmp_path):
        out = tmp_path / "sizes.csv"
        result = _invoke([
            "ablate", "--calib-sizes", "2,8", "--spec", files["spec"], "--base", files["base"],
            "--calib", files["calib"], "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        assert out.read_text() == result.stdout
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "calib_size,min_cosine,mean_cosine"
        assert [line.split(",")[0] for line in lines[1:]] == ["2", "8"]

    @pytest.mark.parametrize("omegas", ["0.4,1.5", "-0.1", "nan"])
    def test_omegas_out_of_range(self, data_dir, omegas):
        result = _invoke([
            "ablate", "--omegas", omegas, "--scores", str(data_dir / "omega_sweep_scores.csv"),
            "--population", "Code", "--merged-template", "WIDEN w={omega:.1f}",
        ])
        assert result.exit_code == 2

    def test_bad_merged_template(self, data_dir):
        result = _invoke([
            "ablate", "--omegas", "0.4", "--scores", str(data_dir / "omega_sweep_scores.csv"),
            "--population", "Code", "--merged-template", "WIDEN w={0}",
        ])
        assert result.exit_code == 2

    def test_rejects_both_sweeps(self, files):
        result = _invoke(["ablate", "--omegas", "0.4", "--calib-sizes", "4"])
        assert result.exit_code == 2

    def test_configured_sizes_are_the_default(self, files):
        result = _invoke(["ablate", "--spec", files["spec"], "--base", files["base"], "--calib", files["calib"]])
        assert result.exit_code == 0, result.output
        sizes = [line.split(",")[0] for line in result.stdout.strip().splitlines()[1:]]
        assert sizes == ["1", "2", "4", "8", "16"]


class TestUtilities:
    def test_inspect(self, files):
        result = _invoke(["inspect", files["base"]])
        assert result.exit_code == 0, result.output
        summary = json.loads(result.stdout)
        assert summary["tensors"]["l1.weight"] == [4, 5]
        assert summary["parameters"] == 4 * 5 + 5 + 5 * 3 + 3

    def test_inspect_against_incompatible(self, files, tmp_path, identity_spec):
        other = tmp_path / "other.tmap"
        checkpoint_save(random_params(identity_spec, seed=1), other)
        result = _invoke(["inspect", files["base"], "--against", str(other)])
        assert result.exit_code == 3
        assert json.loads(result.stdout)["compatible"] is False

    def test_init_config(self, tmp_path):
        path = tmp_path / "aim.yml"
        result = _invoke(["init-config", str(path)])
        assert result.exit_code == 0, result.output
        assert "omega: 0.4" in path.read_text()
