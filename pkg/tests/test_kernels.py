"""Kernel families, bandwidth resolution, and weight normalization behavior."""

import numpy as np
import pytest

from pathopt import KERNEL_KINDS, KernelSpec, kernel_eval, kernel_eval_array, resolve_bandwidth


class TestKernelSpec:
    def test_kinds(self):
        assert KERNEL_KINDS == ("gaussian", "matern", "linear", "polynomial")
        for kind in KERNEL_KINDS:
            assert KernelSpec(kind=kind).kind == kind

    def test_validation(self):
        with pytest.raises(ValueError):
            KernelSpec(kind="laplace")
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=0.0)
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=-1.0)
        with pytest.raises(ValueError):
            KernelSpec(degree=0)
        with pytest.raises(ValueError):
            KernelSpec(offset=-0.1)


class TestResolveBandwidth:
    def test_fixed_wins(self):
        spec = KernelSpec(bandwidth=2.5)
        assert resolve_bandwidth(spec, np.array([1.0, 9.0])) == 2.5

    def test_median_heuristic(self):
        spec = KernelSpec()
        assert resolve_bandwidth(spec, np.array([3.0, 1.0, 2.0])) == 2.0
        assert resolve_bandwidth(spec, np.array([1.0, 2.0, 3.0, 4.0])) == 2.5

    def test_degenerate_cases(self):
        spec = KernelSpec()
        assert resolve_bandwidth(spec, np.zeros(0)) == 1.0
        assert resolve_bandwidth(spec, np.zeros(3)) == 1.0


class TestKernelValues:
    def test_gaussian_known_value(self):
        spec = KernelSpec(kind="gaussian", bandwidth=1.0)
        assert kernel_eval(spec, 1.0, 0.0) == 0.6065306597126334
        assert kernel_eval(spec, 0.0, 0.0) == 1.0

    def test_matern_known_value(self):
        spec = KernelSpec(kind="matern", bandwidth=2.0)
        assert kernel_eval(spec, 1.0, 0.0) == 0.7848876539574506
        assert kernel_eval(spec, 0.0, 0.0) == 1.0

    def test_linear_clamps_negative_similarity(self):
        spec = KernelSpec(kind="linear")
        assert kernel_eval(spec, 0.3, 0.4) == 0.4
        assert kernel_eval(spec, 0.3, -0.4) == 0.0

    def test_polynomial_known_value(self):
        spec = KernelSpec(kind="polynomial", degree=3, offset=1.0)
        assert kernel_eval(spec, 0.0, 0.5) == 3.375
        # negative similarity clamps to zero before the offset
        assert kernel_eval(spec, 0.0, -0.9) == 1.0

    def test_distance_kernels_decrease(self):
        for kind in ("gaussian", "matern"):
            spec = KernelSpec(kind=kind, bandwidth=1.0)
            d = np.linspace(0.0, 5.0, 40)
            vals = kernel_eval_array(spec, d, np.zeros_like(d))
            assert np.all(np.diff(vals) < 0)
            assert np.all(vals > 0)

    def test_array_matches_scalar(self, rng):
        d = rng.random(50) * 3.0
        s = rng.uniform(-1.0, 1.0, 50)
        for kind in KERNEL_KINDS:
            spec = KernelSpec(kind=kind, bandwidth=1.7)
            vals = kernel_eval_array(spec, d, s, bandwidth=1.7)
            for i in range(50):
                assert vals[i] == kernel_eval(spec, float(d[i]), float(s[i]))

    def test_bandwidth_override(self):
        spec = KernelSpec(kind="gaussian", bandwidth=1.0)
        d = np.array([1.0])
        wide = kernel_eval_array(spec, d, d, bandwidth=10.0)[0]
        assert wide > kernel_eval_array(spec, d, d)[0]

    def test_median_heuristic_applies_per_call(self):
        # without a fixed bandwidth the array call uses the median of its input
        spec = KernelSpec(kind="gaussian")
        d = np.array([1.0, 2.0, 3.0])
        vals = kernel_eval_array(spec, d, np.zeros(3))
        expected = np.exp(-(d * d) / (2.0 * 2.0 * 2.0))
        assert np.array_equal(vals, expected)

    def test_all_kernels_nonnegative(self, rng):
        d = rng.random(100) * 10
        s = rng.uniform(-1, 1, 100)
        for kind in KERNEL_KINDS:
            vals = kernel_eval_array(KernelSpec(kind=kind, bandwidth=0.5), d, s)
            assert np.all(vals >= 0.0)
