"""
Unit tests for bundles and synthetic tensor generation.
"""

import json

import numpy as np
import pytest

from src.core.formats import parse_format
from src.core.quant import QuantScheme, compute_scales, quantize
from src.storage.bundles import (
    MANIFEST,
    CalibBundle,
    InputsBundle,
    LayerSpec,
    ModelBundle,
    Nonlinearity,
    QuantizedBundle,
    QuantizedLayer,
    load_bundle,
    load_typed,
    save_bundle,
)
from src.storage.synthetic import (
    Distribution,
    DistributionSpec,
    derive_seed,
    gen_synthetic,
    splitmix64,
    uniform01,
)
from src.utils.errors import (
    BadMagicError,
    BundleError,
    InvalidParameterError,
    ManifestShapeError,
    MissingBlobError,
    ModelValidationError,
    VersionMismatchError,
)


@pytest.fixture
def model_bundle():
    """Fixture for a small two-layer model."""
    rng = np.random.default_rng(0)
    return ModelBundle(
        layers=[
            LayerSpec(name="fc0", weight="fc0.weight", nonlinearity=Nonlinearity.RELU),
            LayerSpec(name="fc1", weight="fc1.weight"),
        ],
        tensors={
            "fc0.weight": rng.standard_normal((6, 4)).astype(np.float32),
            "fc1.weight": rng.standard_normal((3, 6)).astype(np.float32),
        },
    )


def edit_manifest(path, **changes):
    manifest = json.loads((path / MANIFEST).read_text())
    manifest.update(changes)
    (path / MANIFEST).write_text(json.dumps(manifest))
    return manifest


class TestBundles:
    """Test bundle save/load and validation."""

    def test_model_round_trip(self, model_bundle, tmp_path):
        save_bundle(model_bundle, tmp_path / "model")
        loaded = load_bundle(tmp_path / "model")
        assert isinstance(loaded, ModelBundle)
        assert loaded.same_as(model_bundle)
        assert loaded.layers[0].nonlinearity is Nonlinearity.RELU

    def test_blob_layout(self, model_bundle, tmp_path):
        """Test blobs are headerless little-endian float32."""
        path = save_bundle(model_bundle, tmp_path / "model")
        manifest = json.loads((path / MANIFEST).read_text())
        entry = manifest["tensors"]["fc0.weight"]
        assert entry["shape"] == [6, 4]
        assert entry["dtype"] == "f32le"
        raw = (path / entry["file"]).read_bytes()
        assert raw == model_bundle.tensors["fc0.weight"].astype("<f4").tobytes()

    def test_edge_values_round_trip_bit_exact(self, tmp_path):
        """Test signed zeros, subnormals and the largest float32 survive byte for byte."""
        edge = np.array([-0.0, 0.0, 1e-45, -1e-40, np.finfo(np.float32).max, -np.finfo(np.float32).max],
                        dtype=np.float32).reshape(2, 3)
        bundle = ModelBundle(layers=[LayerSpec(name="fc0", weight="fc0.weight")],
                             tensors={"fc0.weight": edge})
        loaded = load_bundle(save_bundle(bundle, tmp_path / "model"))
        assert loaded.tensors["fc0.weight"].tobytes() == edge.tobytes()
        assert np.signbit(loaded.tensors["fc0.weight"][0, 0])

        inputs = InputsBundle(batches=[edge])
        loaded = load_bundle(save_bundle(inputs, tmp_path / "inputs"))
        assert loaded.batches[0].tobytes() == edge.tobytes()

    def test_calib_and_inputs_round_trip(self, tmp_path):
        calib = CalibBundle(batches={
            "fc0": [np.ones((2, 4), dtype=np.float32), np.zeros((3, 4), dtype=np.float32)],
            "fc1": [np.full((2, 6), -1.5, dtype=np.float32)],
        })
        inputs = InputsBundle(batches=[np.arange(8, dtype=np.float32).reshape(2, 4)])
        assert load_bundle(save_bundle(calib, tmp_path / "calib")).same_as(calib)
        assert load_bundle(save_bundle(inputs, tmp_path / "inputs")).same_as(inputs)
        assert list(load_bundle(tmp_path / "calib").batches) == ["fc0", "fc1"]

    def test_quantized_round_trip(self, model_bundle, tmp_path):
        w = model_bundle.tensors["fc0.weight"]
        scheme = QuantScheme.per_channel(parse_format("int4"), axis=0)
        act_scheme = QuantScheme.per_tensor(parse_format("int4"))
        bundle = QuantizedBundle(layers=[
            QuantizedLayer(name="fc0", nonlinearity=Nonlinearity.RELU,
                           weight_q=quantize(w, scheme, compute_scales(w, scheme)),
                           act_scheme=act_scheme, act_scales=compute_scales(np.ones(3), act_scheme)),
            QuantizedLayer(name="fc1", weight=model_bundle.tensors["fc1.weight"]),
        ])
        loaded = load_bundle(save_bundle(bundle, tmp_path / "q"))
        assert isinstance(loaded, QuantizedBundle)
        assert loaded.same_as(bundle)
        assert loaded.layers[0].format_name == "int4"
        assert loaded.layers[1].format_name is None

    def test_save_replaces_existing_bundle(self, model_bundle, tmp_path):
        save_bundle(model_bundle, tmp_path / "model")
        save_bundle(model_bundle, tmp_path / "model")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["model"]

    def test_refuses_non_bundle_target(self, model_bundle, tmp_path):
        (tmp_path / "model").mkdir()
        (tmp_path / "model" / "notes.txt").write_text("keep")
        with pytest.raises(BundleError):
            save_bundle(model_bundle, tmp_path / "model")

    def test_missing_blob(self, model_bundle, tmp_path):
        path = save_bundle(model_bundle, tmp_path / "model")
        (path / "fc1.weight.bin").unlink()
        with pytest.raises(MissingBlobError, match="missing blob fc1.weight"):
            load_bundle(path)

    def test_truncated_blob(self, model_bundle, tmp_path):
        path = save_bundle(model_bundle, tmp_path / "model")
        blob = path / "fc0.weight.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ManifestShapeError):
            load_bundle(path)

    def test_bad_magic(self, model_bundle, tmp_path):
        path = save_bundle(model_bundle, tmp_path / "model")
        edit_manifest(path, magic="npz")
        with pytest.raises(BadMagicError):
            load_bundle(path)

    def test_version_mismatch(self, model_bundle, tmp_path):
        path = save_bundle(model_bundle, tmp_path / "model")
        edit_manifest(path, version=99)
        with pytest.raises(VersionMismatchError):
            load_bundle(path)

    def test_not_found(self, tmp_path):
        with pytest.raises(BundleError, match="bundle not found"):
            load_bundle(tmp_path / "absent")

    def test_incompatible_layers_named(self, tmp_path):
        """Test the chain check names both offending layers."""
        bundle = ModelBundle(
            layers=[LayerSpec(name="fc0", weight="a"), LayerSpec(name="fc1", weight="b")],
            tensors={"a": np.ones((5, 4), dtype=np.float32), "b": np.ones((3, 6), dtype=np.float32)},
        )
        with pytest.raises(ModelValidationError) as exc_info:
            save_bundle(bundle, tmp_path / "model")
        assert exc_info.value.layers == ("fc0", "fc1")
        assert not (tmp_path / "model").exists()

    def test_load_typed_kind(self, model_bundle, tmp_path):
        path = save_bundle(model_bundle, tmp_path / "model")
        assert isinstance(load_typed(path, ModelBundle), ModelBundle)
        with pytest.raises(BundleError, match="expected InputsBundle"):
            load_typed(path, InputsBundle)

    def test_calib_validation(self, model_bundle):
        good = CalibBundle(batches={"fc0": [np.ones((1, 4))], "fc1": [np.ones((1, 6))]})
        assert good.validate_against(model_bundle) is good
        with pytest.raises(BundleError):
            CalibBundle(batches={"fc0": [np.ones((1, 4))]}).validate_against(model_bundle)
        with pytest.raises(BundleError):
            CalibBundle(batches={"fc0": [np.ones((1, 5))], "fc1": [np.ones((1, 6))]}).validate_against(
                model_bundle
            )


class TestSynthetic:
    """Test the counter-based generator and distributions."""

    def test_splitmix64_reference_word(self):
        """Test the first word for seed 0 matches the published SplitMix64 output."""
        assert int(splitmix64(0, 0, 1)[0]) == 0xE220A8397B1DCDAF

    def test_counter_addressing(self):
        np.testing.assert_array_equal(splitmix64(7, 0, 10)[4:], splitmix64(7, 4, 6))

    def test_uniform_range(self):
        u = uniform01(123, 0, 10_000)
        assert u.min() >= 0.0 and u.max() < 1.0

    @pytest.mark.parametrize("text", ["uniform:-2,3", "gaussian:0,0.05", "lognormal", "student_t:4"])
    def test_deterministic(self, text):
        spec = DistributionSpec.parse(text)
        first = gen_synthetic(spec, (16, 8), seed=42)
        assert first.dtype == np.float32
        assert first.shape == (16, 8)
        assert first.tobytes() == gen_synthetic(spec, (16, 8), seed=42).tobytes()
        assert first.tobytes() != gen_synthetic(spec, (16, 8), seed=43).tobytes()

    def test_uniform_bounds(self):
        t = gen_synthetic(DistributionSpec.parse("uniform:-1,1"), (100, 100), seed=1)
        assert t.min() >= -1.0 and t.max() <= 1.0

    def test_gaussian_moments(self):
        t = gen_synthetic(DistributionSpec.parse("gaussian:2,0.5"), (200_000,), seed=9).astype(np.float64)
        assert t.mean() == pytest.approx(2.0, abs=0.01)
        assert t.std() == pytest.approx(0.5, abs=0.01)

    def test_lognormal_symmetric_sign(self):
        t = gen_synthetic(DistributionSpec.parse("lognormal:0,1"), (100_000,), seed=3)
        assert 0.48 < np.mean(t > 0) < 0.52
        assert np.median(np.abs(t)) == pytest.approx(1.0, abs=0.03)

    def test_lognormal_heavy_tail(self):
        """Test lognormal(0,2) has max|v| / median|v| > 50 on 1e5 samples."""
        magnitudes = np.abs(gen_synthetic(DistributionSpec.parse("lognormal:0,2"), (100_000,), seed=0))
        assert magnitudes.max() / np.median(magnitudes) > 50

    def test_student_t_heavier_than_gaussian(self):
        shape = (100_000,)
        t = gen_synthetic(DistributionSpec.parse("student_t:3"), shape, seed=5)
        g = gen_synthetic(DistributionSpec.parse("gaussian:0,1"), shape, seed=5)
        assert np.max(np.abs(t)) > np.max(np.abs(g))

    def test_spec_text(self):
        spec = DistributionSpec.parse("Gaussian : 0, 0.05")
        assert spec.kind is Distribution.GAUSSIAN
        assert str(spec) == "gaussian:0.0,0.05"
        assert str(DistributionSpec.parse("student_t")) == "student_t:3.0"

    @pytest.mark.parametrize("text", ["cauchy", "gaussian:0", "gaussian:0,-1", "uniform:1,1",
                                      "student_t:0", "gaussian:a,b"])
    def test_invalid_specs(self, text):
        with pytest.raises(InvalidParameterError):
            DistributionSpec.parse(text)

    def test_invalid_shape_and_seed(self):
        spec = DistributionSpec.parse("gaussian")
        with pytest.raises(InvalidParameterError):
            gen_synthetic(spec, (0, 3), seed=0)
        with pytest.raises(InvalidParameterError):
            gen_synthetic(spec, (2,), seed=-1)

    def test_derive_seed(self):
        assert derive_seed(0, "fc0.weight") == derive_seed(0, "fc0.weight")
        assert derive_seed(0, "fc0.weight") != derive_seed(0, "fc1.weight")
        assert derive_seed(0, "fc0.weight") != derive_seed(1, "fc0.weight")
        assert 0 <= derive_seed(2 ** 64 - 1, "x") < 2 ** 64
