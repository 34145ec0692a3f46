import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aim_merge.core.aim import relax, relax_activation, relax_sensitivity, relaxation_factor
from aim_merge.core.errors import ProfileError, RelaxationError, ShapeMismatchError
from aim_merge.core.mergers import apply_delta, run_merge
from aim_merge.core.models import LayerSpec, MergeConfig, MergeMethod, ModelSpec
from aim_merge.core.profiler import ActivationProfile, SensitivityProfile, normalize_saliency
from aim_merge.core.runtime import random_params
from aim_merge.core.tensors import Checkpoint

unit = st.floats(0.0, 1.0, allow_nan=False)


def _same_tensors(a: Checkpoint, b: Checkpoint) -> bool:
    return a.names == b.names and all(a[n].tobytes() == b[n].tobytes() for n in a.names)


def _random_case(rng: np.random.Generator, spec: ModelSpec):
    base = random_params(spec, seed=int(rng.integers(0, 2**31)))
    delta = random_params(spec, seed=int(rng.integers(0, 2**31)), scale=0.2)
    layers = {}
    for layer in spec.layers:
        raw = rng.uniform(0.0, 1.0, size=layer.in_dim)
        raw[rng.integers(0, layer.in_dim)] = 1.0
        layers[layer.name] = normalize_saliency(raw)
    return base, delta, ActivationProfile(layers, spec.spec_id)


class TestRelaxationFactor:
    def test_non_salient_channel_untouched(self):
        assert relaxation_factor(0.0, 0.3) == 1.0

    def test_fully_salient(self):
        assert relaxation_factor(1.0, 0.4) == pytest.approx(0.4)

    def test_arithmetic(self):
        assert relaxation_factor(0.5, 0.8) == pytest.approx(0.9)

    @pytest.mark.parametrize("saliency, omega", [(0.5, 1.5), (0.5, -0.1), (1.2, 0.4), (-0.1, 0.4)])
    def test_domain(self, saliency, omega):
        with pytest.raises(RelaxationError):
            relaxation_factor(saliency, omega)

    @given(unit, unit)
    def test_range(self, saliency, omega):
        factor = relaxation_factor(saliency, omega)
        assert omega - 1e-15 <= factor <= 1.0

    @given(st.floats(0.01, 1.0), unit, unit)
    def test_monotone_in_omega(self, saliency, first, second):
        low, high = sorted((first, second))
        if high - low > 1e-9:
            assert relaxation_factor(saliency, low) < relaxation_factor(saliency, high)


class TestRelaxActivation:
    def test_row_example(self, identity_spec):
        base = Checkpoint({"proj.weight": np.zeros((3, 2))})
        delta = Checkpoint({"proj.weight": [[1.0, -2.0], [1.0, -2.0], [1.0, -2.0]]})
        profile = ActivationProfile({"proj": np.array([1.0, 0.5, 0.0])})
        relaxed = relax_activation(base, delta, profile, identity_spec, 0.4)
        np.testing.assert_allclose(relaxed["proj.weight"], [[0.4, -0.8], [0.7, -1.4], [1.0, -2.0]])

    def test_bias_gets_full_delta(self, toy_spec, toy_base, toy_experts):
        delta, merged = run_merge(toy_base, toy_experts, MergeConfig())
        profile = ActivationProfile({"l1": np.ones(4), "l2": np.ones(5)}, toy_spec.spec_id)
        relaxed = relax_activation(toy_base, delta, profile, toy_spec, 0.0)
        assert np.array_equal(relaxed["l1.bias"], merged["l1.bias"])
        assert np.array_equal(relaxed["l1.weight"], toy_base["l1.weight"])

    def test_identities_over_random_models(self):
        rng = np.random.default_rng(31)
        for _ in range(1000):
            dims = [int(d) for d in rng.integers(1, 6, size=3)]
            spec = ModelSpec(layers=[
                LayerSpec(name="a", in_dim=dims[0], out_dim=dims[1], has_bias=True),
                LayerSpec(name="b", in_dim=dims[1], out_dim=dims[2]),
            ])
            base, delta, profile = _random_case(rng, spec)
            merged = apply_delta(base, delta)

            assert _same_tensors(relax(base, delta, profile, 1.0, spec), merged)

            reverted = relax(base, delta, profile, 0.0, spec)
            for layer in spec.layers:
                rows = profile.layers[layer.name] == 1.0
                assert np.array_equal(reverted[layer.weight_name][rows], base[layer.weight_name][rows])

            omega = float(rng.uniform())
            relaxed = relax(base, delta, profile, omega, spec)
            for name in base.names:
                low = np.minimum(base[name], merged[name])
                high = np.maximum(base[name], merged[name])
                assert np.all((relaxed[name] >= low) & (relaxed[name] <= high))

    def test_depends_only_on_merged_delta(self, toy_spec):
        rng = np.random.default_rng(5)
        base, delta, profile = _random_case(rng, toy_spec)
        relabelled = Checkpoint(delta.tensors, {"kind": "delta", "method": "ties"})
        assert _same_tensors(relax(base, delta, profile, 0.4, toy_spec), relax(base, relabelled, profile, 0.4, toy_spec))

    def test_magnitude_decreases_with_saliency(self, identity_spec):
        base = Checkpoint({"proj.weight": np.zeros((3, 2))})
        delta = Checkpoint({"proj.weight": np.ones((3, 2))})
        profile = ActivationProfile({"proj": np.array([1.0, 0.6, 0.2])})
        relaxed = relax_activation(base, delta, profile, identity_spec, 0.5)
        column = relaxed["proj.weight"][:, 0]
        assert column[0] < column[1] < column[2]

    def test_works_without_spec(self, toy_spec):
        rng = np.random.default_rng(8)
        base, delta, profile = _random_case(rng, toy_spec)
        assert _same_tensors(relax(base, delta, profile, 0.4), relax(base, delta, profile, 0.4, toy_spec))

    def test_rejects_omega(self, toy_spec):
        base, delta, profile = _random_case(np.random.default_rng(1), toy_spec)
        with pytest.raises(RelaxationError):
            relax(base, delta, profile, 1.5, toy_spec)

    def test_rejects_other_model(self, toy_spec, identity_spec):
        base, delta, profile = _random_case(np.random.default_rng(1), toy_spec)
        with pytest.raises(ProfileError):
            relax(base, delta, profile, 0.4, identity_spec)

    def test_rejects_width_mismatch(self, toy_spec):
        base, delta, _ = _random_case(np.random.default_rng(1), toy_spec)
        wrong = ActivationProfile({"l1": np.ones(3), "l2": np.ones(5)})
        with pytest.raises(ShapeMismatchError):
            relax(base, delta, wrong, 0.4)


class TestRelaxSensitivity:
    def test_matches_scalar_loop(self, toy_spec):
        rng = np.random.default_rng(17)
        base = random_params(toy_spec, seed=1)
        delta = random_params(toy_spec, seed=2, scale=0.3)
        tensors = {name: normalize_saliency(rng.uniform(size=shape)) for name, shape in toy_spec.parameter_shapes().items()}
        omega = 0.35
        relaxed = relax_sensitivity(base, delta, SensitivityProfile(tensors), omega)

        for name, g in tensors.items():
            for index in np.ndindex(g.shape):
                expected = base[name][index] + (1.0 - g[index] * (1.0 - omega)) * delta[name][index]
                assert relaxed[name][index] == pytest.approx(expected, rel=1e-15, abs=1e-15)

    def test_omega_one_is_plain_merge(self, toy_spec):
        base = random_params(toy_spec, seed=1)
        delta = random_params(toy_spec, seed=2, scale=0.3)
        ones = {name: np.ones(shape) for name, shape in toy_spec.parameter_shapes().items()}
        assert _same_tensors(relax_sensitivity(base, delta, SensitivityProfile(ones), 1.0), apply_delta(base, delta))

    def test_full_saliency_reverts(self, toy_spec):
        base = random_params(toy_spec, seed=1)
        delta = random_params(toy_spec, seed=2, scale=0.3)
        profile = SensitivityProfile({"l2.bias": np.ones(3)})
        relaxed = relax_sensitivity(base, delta, profile, 0.0)
        assert np.array_equal(relaxed["l2.bias"], base["l2.bias"])
        assert np.array_equal(relaxed["l1.weight"], apply_delta(base, delta)["l1.weight"])

    def test_shape_mismatch(self, toy_spec):
        base = random_params(toy_spec, seed=1)
        delta = random_params(toy_spec, seed=2)
        with pytest.raises(ShapeMismatchError):
            relax_sensitivity(base, delta, SensitivityProfile({"l2.bias": np.ones(4)}), 0.5)

    def test_equal_profiles_give_equal_models(self, toy_spec):
        rng = np.random.default_rng(3)
        base, delta, activation = _random_case(rng, toy_spec)
        tensors = {
            layer.weight_name: np.repeat(activation.layers[layer.name][:, None], layer.out_dim, axis=1)
            for layer in toy_spec.layers
        }
        sensitivity = SensitivityProfile(tensors, toy_spec.spec_id)
        for omega in (0.0, 0.4, 1.0):
            assert _same_tensors(
                relax(base, delta, activation, omega, toy_spec),
                relax(base, delta, sensitivity, omega, toy_spec),
            )


def test_merge_methods_agree_when_deltas_agree(toy_spec, toy_base):
    expert = Checkpoint({n: toy_base[n] + 0.1 for n in toy_base.names})
    profile = ActivationProfile({"l1": np.linspace(0.0, 1.0, 4), "l2": np.linspace(0.0, 1.0, 5)}, toy_spec.spec_id)
    ta_delta, _ = run_merge(toy_base, [expert], MergeConfig(method=MergeMethod.TASK_ARITHMETIC))
    avg_delta, _ = run_merge(toy_base, [expert], MergeConfig(method=MergeMethod.AVERAGE))
    assert _same_tensors(ta_delta, avg_delta)
    assert _same_tensors(relax(toy_base, ta_delta, profile, 0.4, toy_spec), relax(toy_base, avg_delta, profile, 0.4, toy_spec))
