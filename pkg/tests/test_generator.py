"""
Tests for the sparse top-down generator: forward pass, frozen-mask replay and gradients.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sparsegen.errors import DimensionError, MissingTraceError
from sparsegen.generator import (
    GeneratorParams,
    forward,
    grad_theta,
    grad_z_log_joint,
    init_params,
    kernel_structure,
    log_joint,
    propagate_frozen,
    replay,
)
from sparsegen.models import DeconvSpec, GeneratorConfig
from sparsegen.tensor_ops import grad_check, sample_coords


def _masks_at(params, config):
    def masks(Z):
        _, trace = forward(params, Z, config, record=True)
        return [lt.mask for lt in trace.layers]

    return masks


class TestGeneratorConfig:
    def test_default_shapes(self, default_config):
        assert default_config.feature_shapes() == [(2, 2, 64), (4, 4, 128), (16, 16, 3)]
        assert default_config.image_shape() == (16, 16, 3)
        assert default_config.D == 768
        assert default_config.layer_channels(0) == (64, 128)

    def test_t_k_length_must_match(self):
        with pytest.raises(ValueError, match="t_k"):
            GeneratorConfig(t_k=[4])

    def test_non_positive_extent_rejected(self):
        with pytest.raises(ValueError, match="not positive"):
            GeneratorConfig(
                fc_shape=(1, 1, 4),
                layers=[DeconvSpec(kernel=1, stride=1, pad=1, out_channels=3)],
                t_k=[1],
            )

    def test_too_many_layers(self):
        layers = [DeconvSpec(kernel=3, stride=1, pad=1, out_channels=2)] * 5
        with pytest.raises(ValueError, match="between 1 and 4"):
            GeneratorConfig(layers=layers, t_k=[1] * 5)


class TestInitParams:
    def test_deterministic_in_seed(self, default_config):
        a = init_params(default_config, seed=3)
        b = init_params(default_config, seed=3)
        c = init_params(default_config, seed=4)
        assert_array_equal(a.W_fc, b.W_fc)
        assert_array_equal(a.kernels[1], b.kernels[1])
        assert not np.array_equal(a.W_fc, c.W_fc)

    def test_shapes_validate(self, default_config):
        params = init_params(default_config, seed=0)
        params.validate(default_config)
        assert params.kernels[0].shape == (64, 6, 6, 128)
        assert params.kernels[1].shape == (128, 6, 6, 3)
        assert not np.any(params.biases[0])

    def test_weight_statistics(self, default_config):
        params = init_params(default_config, seed=0)
        for ker in params.kernels:
            assert ker.size >= 10_000
            assert abs(ker.std() - 0.02) < 0.1 * 0.02
            assert abs(ker.mean()) < 4 * 0.02 / np.sqrt(ker.size)
        assert abs(params.W_fc.std() - 0.02) < 0.1 * 0.02
        assert not np.any(params.b_fc)
        assert not np.any(params.biases[1])

    def test_validate_rejects_wrong_kernel(self, default_config):
        params = init_params(default_config, seed=0)
        params.kernels[1] = np.zeros((128, 5, 5, 3))
        with pytest.raises(DimensionError, match="kernel"):
            params.validate(default_config)

    def test_named_tensor_round_trip(self, default_config):
        params = init_params(default_config, seed=0)
        named = params.named_tensors()
        assert sorted(named) == [
            "theta/deconv1/bias",
            "theta/deconv1/ker",
            "theta/deconv2/bias",
            "theta/deconv2/ker",
            "theta/fc/W",
            "theta/fc/b",
        ]
        restored = GeneratorParams.from_named(named)
        assert_array_equal(restored.kernels[0], params.kernels[0])


class TestForward:
    def test_output_shape_and_range(self, default_config, make_params):
        params = make_params(default_config, seed=1)
        Z = np.random.default_rng(0).standard_normal(default_config.d)
        Y, trace = forward(params, Z, default_config)
        assert Y.shape == (16, 16, 3)
        assert trace is None
        assert np.all(np.abs(Y) < 1.0)

    def test_feature_maps_at_most_k_nonzero(self, default_config, make_params):
        params = make_params(default_config, seed=1)
        rng = np.random.default_rng(5)
        for _ in range(5):
            Z = rng.standard_normal(default_config.d)
            _, trace = forward(params, Z, default_config, record=True)
            assert trace.layers[0].fm.shape == (2, 2, 64)
            assert trace.layers[1].fm.shape == (4, 4, 128)
            for lt, K in zip(trace.layers, default_config.t_k):
                assert np.count_nonzero(lt.fm_s) <= K
                assert np.all(lt.fm_s >= 0)

    def test_replay_is_bit_exact(self, default_config, make_params):
        params = make_params(default_config, seed=2)
        rng = np.random.default_rng(6)
        for _ in range(5):
            Z = rng.standard_normal(default_config.d)
            Y, trace = forward(params, Z, default_config, record=True)
            assert_array_equal(replay(params, trace), Y)

    def test_replay_requires_masks(self, default_config, make_params):
        params = make_params(default_config, seed=2)
        Z = np.zeros(default_config.d)
        _, trace = forward(params, Z, default_config, record=True)
        trace.layers[0].mask_t = None
        with pytest.raises(MissingTraceError):
            replay(params, trace)

    def test_batch_matches_rows(self, default_config, make_params):
        params = make_params(default_config, seed=3)
        Z = np.random.default_rng(7).standard_normal((4, default_config.d))
        Y, trace = forward(params, Z, default_config, record=True)
        assert trace.batched
        for n in range(4):
            Y_n, trace_n = forward(params, Z[n], default_config, record=True)
            assert_allclose(Y[n], Y_n, rtol=1e-12, atol=1e-12)
            mask = trace.example(n).layers[1].mask
            assert_array_equal(mask, trace_n.layers[1].mask)

    def test_wrong_latent_length(self, default_config, make_params):
        params = make_params(default_config, seed=3)
        with pytest.raises(DimensionError):
            forward(params, np.zeros(3), default_config)

    def test_non_finite_latent(self, default_config, make_params):
        params = make_params(default_config, seed=3)
        Z = np.zeros(default_config.d)
        Z[0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            forward(params, Z, default_config)

    def test_dense_baseline_skips_topk(self, default_config, make_params):
        dense = default_config.model_copy(update={"sparse": False})
        params = make_params(default_config, seed=4)
        Z = np.random.default_rng(1).standard_normal(dense.d)
        _, trace = forward(params, Z, dense, record=True)
        assert np.all(trace.layers[1].mask_t == 1)
        assert np.count_nonzero(trace.layers[1].fm_s) > default_config.t_k[1]


class TestFrozenPropagation:
    @pytest.mark.parametrize("start", [1, 2])
    def test_superposition_after_removing_bias(
        self, default_config, make_params, start
    ):
        params = make_params(default_config, seed=5)
        rng = np.random.default_rng(21)
        Z = rng.standard_normal(default_config.d)
        _, trace = forward(params, Z, default_config, record=True)
        shape = default_config.feature_shapes()[start - 1]
        baseline = propagate_frozen(params, trace, start, np.zeros(shape))

        def linear_part(fm):
            return propagate_frozen(params, trace, start, fm) - baseline

        for _ in range(5):
            a, b = rng.normal(size=(2,) + shape)
            alpha, beta = rng.normal(size=2)
            combined = linear_part(alpha * a + beta * b)
            expected = alpha * linear_part(a) + beta * linear_part(b)
            rel = np.linalg.norm(combined - expected) / np.linalg.norm(expected)
            assert rel < 1e-10

    def test_own_feature_map_reproduces_preactivation(
        self, default_config, make_params
    ):
        params = make_params(default_config, seed=5)
        Z = np.random.default_rng(22).standard_normal(default_config.d)
        _, trace = forward(params, Z, default_config, record=True)
        P = propagate_frozen(params, trace, 2, trace.layers[1].fm_s)
        assert_allclose(P, trace.P, rtol=1e-12, atol=1e-12)


class TestLogJoint:
    def test_value(self, tiny_config, make_params):
        params = make_params(tiny_config, seed=0)
        Z = np.array([0.3, -0.7])
        G, _ = forward(params, Z, tiny_config)
        Y = G + 0.1
        expected = -np.sum(0.01 * np.ones_like(G)) / (2 * 0.25) - np.sum(Z * Z) / 2
        assert log_joint(params, Z, Y, tiny_config) == pytest.approx(expected)

    def test_exact_fit_at_origin_is_zero(self, tiny_config, make_params):
        params = make_params(tiny_config, seed=0)
        Z = np.zeros(2)
        G, _ = forward(params, Z, tiny_config)
        assert log_joint(params, Z, G, tiny_config) == 0.0

    def test_exact_fit_leaves_prior_term(self, tiny_config, make_params):
        params = make_params(tiny_config, seed=0)
        Z = np.array([1.0, -1.0])
        G, _ = forward(params, Z, tiny_config)
        assert log_joint(params, Z, G, tiny_config) == pytest.approx(-1.0, abs=1e-15)

    def test_image_shape_checked(self, tiny_config, make_params):
        params = make_params(tiny_config, seed=0)
        with pytest.raises(DimensionError) as exc:
            log_joint(params, np.zeros(2), np.zeros((4, 4, 1)), tiny_config)
        assert exc.value.axis == "Y"

    def test_batched_rows(self, tiny_config, make_params):
        params = make_params(tiny_config, seed=0)
        Z = np.random.default_rng(2).standard_normal((3, 2))
        Y = np.zeros((3, 5, 5, 1))
        values = log_joint(params, Z, Y, tiny_config)
        assert values.shape == (3,)
        assert values[1] == pytest.approx(log_joint(params, Z[1], Y[1], tiny_config))


class TestGradients:
    @pytest.fixture
    def problem(self, tiny_config, make_params):
        params = make_params(tiny_config, seed=11, weight_std=0.8)
        rng = np.random.default_rng(12)
        Y = np.tanh(rng.normal(size=tiny_config.image_shape()))
        return params, Y

    def test_grad_z_matches_finite_differences(self, tiny_config, problem):
        params, Y = problem
        rng = np.random.default_rng(13)
        checked = skipped = 0
        for _ in range(20):
            Z = rng.standard_normal(tiny_config.d)
            report = grad_check(
                lambda z: log_joint(params, z, Y, tiny_config),
                lambda z: grad_z_log_joint(params, z, Y, tiny_config),
                Z,
                masks=_masks_at(params, tiny_config),
            )
            if not report.inconclusive:
                assert report.max_rel_error < 1e-5, str(report)
            checked += report.checked
            skipped += len(report.skipped)
        assert checked / (checked + skipped) >= 0.95

    def test_grad_z_at_exact_fit_is_prior_pull(self, tiny_config, problem):
        params, _ = problem
        Z = np.random.default_rng(18).standard_normal((4, tiny_config.d))
        G, _ = forward(params, Z, tiny_config)
        grad = grad_z_log_joint(params, Z, G, tiny_config)
        assert_allclose(grad, -Z, rtol=0, atol=1e-15)

    def test_grad_z_batched_rows(self, tiny_config, problem):
        params, Y = problem
        Z = np.random.default_rng(14).standard_normal((3, 2))
        Yb = np.broadcast_to(Y, (3,) + Y.shape)
        batched = grad_z_log_joint(params, Z, Yb, tiny_config)
        for n in range(3):
            single = grad_z_log_joint(params, Z[n], Y, tiny_config)
            assert_allclose(batched[n], single, rtol=1e-10)

    @pytest.mark.parametrize(
        "name",
        ["theta/fc/W", "theta/fc/b", "theta/deconv1/ker", "theta/deconv1/bias"],
    )
    def test_grad_theta_matches_finite_differences(self, tiny_config, problem, name):
        params, Y = problem
        Z = np.random.default_rng(15).standard_normal(tiny_config.d)
        analytic = grad_theta(params, Z, Y, tiny_config).named_tensors()[name]

        def with_tensor(t):
            tensors = dict(params.named_tensors())
            tensors[name] = t
            return GeneratorParams.from_named(tensors)

        def masks(t):
            _, trace = forward(with_tensor(t), Z, tiny_config, record=True)
            return [lt.mask for lt in trace.layers]

        base = params.named_tensors()[name]
        coords = sample_coords(base.shape, 30, np.random.default_rng(16))
        report = grad_check(
            lambda t: log_joint(with_tensor(t), Z, Y, tiny_config),
            lambda t: analytic,
            base,
            masks=masks,
            coords=coords,
        )
        assert report.stable_fraction >= 0.95
        assert report.passed(1e-5), str(report)

    def test_grad_theta_vanishes_at_exact_fit(self, tiny_config, problem):
        params, _ = problem
        Z = np.random.default_rng(19).standard_normal(tiny_config.d)
        G, _ = forward(params, Z, tiny_config)
        for name, g in grad_theta(params, Z, G, tiny_config).named_tensors().items():
            assert_array_equal(g, 0.0, err_msg=name)

    def test_grad_theta_scales_with_inverse_variance(self, tiny_config, problem):
        params, Y = problem
        Z = np.random.default_rng(20).standard_normal(tiny_config.d)
        wide = tiny_config.model_copy(update={"sigma": 2 * tiny_config.sigma})
        narrow_grads = grad_theta(params, Z, Y, tiny_config).named_tensors()
        for name, g in grad_theta(params, Z, Y, wide).named_tensors().items():
            assert_allclose(g, narrow_grads[name] / 4, rtol=1e-12, atol=1e-15)

    def test_grad_theta_sums_over_batch(self, tiny_config, problem):
        params, Y = problem
        Z = np.random.default_rng(17).standard_normal((2, 2))
        Yb = np.stack([Y, -Y])
        total = grad_theta(params, Z, Yb, tiny_config)
        parts = [grad_theta(params, Z[n], Yb[n], tiny_config) for n in range(2)]
        W_sum = parts[0].W_fc + parts[1].W_fc
        ker_sum = parts[0].kernels[0] + parts[1].kernels[0]
        assert_allclose(total.W_fc, W_sum, rtol=1e-10, atol=1e-12)
        assert_allclose(total.kernels[0], ker_sum, rtol=1e-10, atol=1e-12)


class TestKernelStructure:
    def test_smooth_kernels_score_higher(self):
        x, y = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        smooth = (np.sin(x / 3.0) * np.cos(y / 4.0) + 0.1 * x)[None, :, :, None]
        noise = np.random.default_rng(0).normal(size=(1, 6, 6, 1))

        def score(ker):
            params = GeneratorParams(
                np.zeros((1, 1)), np.zeros(1), [ker], [np.zeros(1)]
            )
            return kernel_structure(params, 1)

        assert score(smooth) > score(noise)
        assert score(np.zeros((1, 6, 6, 1))) == 0.0
