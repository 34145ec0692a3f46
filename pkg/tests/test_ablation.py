import numpy as np
import pytest

from aim_merge.core.ablation import (
    ScoreSetup,
    ToySetup,
    calib_size_sweep,
    omega_sweep,
    rows_to_csv,
    toy_metrics,
)
from aim_merge.core.errors import InputError
from aim_merge.core.evaluation import load_scores
from aim_merge.core.mergers import run_merge
from aim_merge.core.models import MergeConfig
from aim_merge.core.profiler import profile_activations


@pytest.fixture
def setup(toy_spec, toy_base, toy_experts, toy_calib):
    delta, merged = run_merge(toy_base, toy_experts, MergeConfig())
    return ToySetup(toy_spec, toy_base, delta, toy_calib), merged


def test_omega_one_row_is_the_plain_merge(setup):
    toy, merged = setup
    profile = profile_activations(toy.spec, toy.base, toy.calib)
    rows = omega_sweep([0.0, 0.5, 1.0], profile, toy)
    plain = toy_metrics(toy.spec, toy.base, merged, toy.calib)
    assert rows[-1]["entropy_mean"] == plain["entropy_mean"]
    assert rows[-1]["logit_shift"] == plain["logit_shift"]


def test_score_sweep_reproduces_published_gains(data_dir):
    scores = ScoreSetup(
        load_scores(data_dir / "omega_sweep_scores.csv"),
        ["Base", "Code", "Instruction Tuned", "Math"],
        "WIDEN w={omega:.1f}",
    )
    rows = omega_sweep([0.0, 0.2, 0.4, 0.6, 0.8, 1.0], scores=scores)
    gains = [row["hv_gain"] for row in rows]
    np.testing.assert_allclose(gains, [0.3027, 0.3066, 0.3013, 0.2947, 0.2941, 0.2879], atol=5e-4)
    assert rows[-1]["hv_gain_rel_change"] == 0.0
    assert rows[2]["hv_gain_rel_change"] == pytest.approx((0.3013 - 0.2879) / 0.2879, abs=5e-3)


def test_score_sweep_without_reference_row(data_dir):
    scores = ScoreSetup(load_scores(data_dir / "omega_sweep_scores.csv"), ["Code", "Math"], "Ties w={omega:.1f}")
    rows = omega_sweep([0.2, 0.4], scores=scores)
    assert all(row["hv_gain_rel_change"] is None for row in rows)


def test_sweep_needs_something_to_measure():
    with pytest.raises(InputError):
        omega_sweep([0.4])


def test_calib_size_sweep(setup):
    toy, _ = setup
    rows = calib_size_sweep(toy.spec, toy.base, toy.calib, [1, 4, 64], delta=toy.delta)
    assert [row["calib_size"] for row in rows] == [1.0, 4.0, 16.0]
    assert rows[-1]["min_cosine"] == pytest.approx(1.0)
    assert rows[0]["mean_cosine"] <= rows[-1]["mean_cosine"]
    assert "entropy_mean" in rows[0]


def test_csv_rendering():
    text = rows_to_csv([{"calib_size": 4.0, "min_cosine": 0.5}, {"calib_size": 8.0, "min_cosine": None}], 3)
    assert text == "calib_size,min_cosine\n4,0.500\n8,\n"


@pytest.mark.parametrize("template", ["WIDEN w={0}", "WIDEN w={x}", "WIDEN w={omega:q}", "WIDEN w={omega"])
def test_bad_merged_template(data_dir, template):
    scores = ScoreSetup(load_scores(data_dir / "omega_sweep_scores.csv"), ["Code", "Math"], template)
    with pytest.raises(InputError):
        omega_sweep([0.4], scores=scores)
