"""
Unit tests for error metrics and format-error orderings on synthetic data.
"""

import numpy as np
import pytest

from src.core.formats import parse_format
from src.core.metrics import ErrorReduction, mse, nsr, reduce_error
from src.core.quant import QuantScheme, ScaleSet, fake_quant
from src.storage.synthetic import DistributionSpec, gen_synthetic
from src.utils.errors import MetricError, ShapeMismatchError


def tensor_mse(t: np.ndarray, fmt_name: str) -> float:
    t = t.astype(np.float64)
    return mse(t, fake_quant(t, QuantScheme.per_tensor(parse_format(fmt_name))))


class TestMse:
    """Test mean squared error."""

    def test_identical(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_rtn_example(self):
        """Test int4 at scale 3/7 on [1, 2, 3] gives 2/147."""
        t = np.array([1.0, 2.0, 3.0])
        q = fake_quant(t, QuantScheme.per_tensor(parse_format("int4")), ScaleSet(scales=[3.0 / 7.0]))
        assert mse(t, q) == pytest.approx(2.0 / 147.0, rel=1e-12)

    def test_symmetric(self):
        a, b = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, 0.5])
        assert mse(a, b) == mse(b, a) == pytest.approx(10.0 / 3.0)

    def test_empty(self):
        assert mse(np.array([]), np.array([])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mse(np.ones(3), np.ones(4))


class TestNsr:
    """Test noise-signal ratio."""

    def test_example(self):
        assert nsr([3.0, 4.0], [3.0, 3.0]) == pytest.approx(1.0 / 25.0)

    def test_reference_first(self):
        """Test swapping the arguments changes the value."""
        ref, noisy = np.array([3.0, 4.0]), np.array([3.0, 3.0])
        assert nsr(ref, noisy) != nsr(noisy, ref)

    def test_zero_reference(self):
        with pytest.raises(MetricError, match="undefined NSR"):
            nsr(np.zeros(4), np.ones(4))

    def test_per_row(self):
        ref = np.array([[1.0, 0.0], [0.0, 2.0]])
        noisy = np.array([[0.0, 0.0], [0.0, 2.0]])
        assert nsr(ref, noisy, per_row=True) == pytest.approx(0.5)
        assert nsr(ref, noisy) == pytest.approx(0.2)

    def test_per_row_zero_row(self):
        with pytest.raises(MetricError):
            nsr(np.array([[1.0], [0.0]]), np.zeros((2, 1)), per_row=True)

    def test_scale_invariant(self):
        ref = np.array([1.0, -2.0, 3.0])
        noisy = np.array([1.1, -2.0, 2.5])
        assert nsr(4 * ref, 4 * noisy) == pytest.approx(nsr(ref, noisy), rel=1e-12)


class TestReduceError:
    """Test reduction dispatch."""

    @pytest.mark.parametrize("reduction,expected", [
        (ErrorReduction.MSE, 0.5),
        (ErrorReduction.NSR, 1.0 / 5.0),
    ])
    def test_dispatch(self, reduction, expected):
        assert reduce_error([1.0, 2.0], [1.0, 1.0], reduction) == pytest.approx(expected)


class TestFormatOrderings:
    """Test which format wins on seeded synthetic tensors."""

    SEEDS = range(30)

    def test_uniform_prefers_int8(self):
        spec = DistributionSpec.parse("uniform:-1,1")
        for seed in self.SEEDS:
            t = gen_synthetic(spec, (64, 64), seed)
            assert tensor_mse(t, "int8") < tensor_mse(t, "fp8_e4m3")

    def test_heavy_tail_prefers_fp8(self):
        spec = DistributionSpec.parse("lognormal:0,1.5")
        wins = sum(
            tensor_mse(t, "fp8_e4m3") < tensor_mse(t, "int8")
            for t in (gen_synthetic(spec, (128, 128), seed) for seed in self.SEEDS)
        )
        assert wins >= 28

    def test_reallocated_fp4_not_worse_than_ieee(self):
        """Test reclaiming the special codes never loses accuracy at max-abs scale."""
        spec = DistributionSpec.parse("gaussian:0,1")
        for seed in self.SEEDS:
            t = gen_synthetic(spec, (64, 64), seed)
            assert tensor_mse(t, "fp4_e2m1") <= tensor_mse(t, "fp4_e2m1_ieee") * (1 + 1e-12)
