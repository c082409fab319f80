"""
Directory container for models, calibration data, inputs and quantized models.

A bundle is a directory holding ``manifest.json`` plus one raw blob per
tensor. Float blobs are row-major little-endian 32-bit reals; code blobs are
one unsigned byte per code (4-bit codes in the low nibble). Blobs carry no
header; shapes live in the manifest.
"""

import json
import logging
import os
import shutil
import tempfile
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.formats import parse_format
from src.core.quant import Granularity, QuantizedTensor, QuantScheme, ScaleSet
from src.utils.errors import (
    BadMagicError,
    BundleError,
    ManifestShapeError,
    MissingBlobError,
    ModelValidationError,
    QuantToolkitError,
    VersionMismatchError,
)
from src.utils.validators import validate_name

logger = logging.getLogger(__name__)

MAGIC = "qtk-bundle"
VERSION = 1
MANIFEST = "manifest.json"

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class Nonlinearity(str, Enum):
    """Elementwise function applied after a layer's matmul."""
    NONE = "none"
    RELU = "relu"
    GELU = "gelu"


class BundleKind(str, Enum):
    MODEL = "model"
    CALIB = "calib"
    INPUTS = "inputs"
    QUANTIZED = "quantized"


class _Bundle(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def manifest(self) -> dict:
        raise NotImplementedError

    def blobs(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def same_as(self, other: "_Bundle") -> bool:
        """Manifest equality plus bit-for-bit blob equality."""
        if type(other) is not type(self) or self.manifest() != other.manifest():
            return False
        mine, theirs = self.blobs(), other.blobs()
        return mine.keys() == theirs.keys() and all(
            mine[k].dtype == theirs[k].dtype and mine[k].tobytes() == theirs[k].tobytes()
            for k in mine
        )


class LayerSpec(BaseModel):
    """Manifest entry of a model layer."""
    model_config = ConfigDict(frozen=True)

    name: str
    weight: str = Field(..., description="Name of the weight tensor [out, in]")
    nonlinearity: Nonlinearity = Nonlinearity.NONE


class ModelBundle(_Bundle):
    """Ordered linear layers and their weight tensors."""
    layers: List[LayerSpec]
    tensors: Dict[str, np.ndarray]

    def validate_chain(self) -> "ModelBundle":
        """
        Check weights exist, are 2-D, finite, and chain shape-compatibly.

        Raises:
            MissingBlobError: If a layer references an absent tensor
            ModelValidationError: If ``in_{k+1} != out_k``
        """
        if not self.layers:
            raise ModelValidationError(None, None, "model has no layers")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ModelValidationError(None, None, f"duplicate layer names in {names}")
        for layer in self.layers:
            if layer.weight not in self.tensors:
                raise MissingBlobError(layer.weight)
            w = self.tensors[layer.weight]
            if w.ndim != 2 or min(w.shape) < 1:
                raise ModelValidationError(layer.name, layer.name,
                                           f"layer {layer.name!r} weight must be [out, in], got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ModelValidationError(layer.name, layer.name,
                                           f"layer {layer.name!r} weight has non-finite values")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            out_k = self.tensors[prev.weight].shape[0]
            in_next = self.tensors[nxt.weight].shape[1]
            if out_k != in_next:
                raise ModelValidationError(
                    prev.name, nxt.name,
                    f"layers {prev.name!r} (out={out_k}) and {nxt.name!r} (in={in_next}) "
                    "are not shape-compatible",
                )
        return self

    def manifest(self) -> dict:
        return {
            "kind": BundleKind.MODEL.value,
            "layers": [
                {"name": l.name, "weight": l.weight, "nonlinearity": l.nonlinearity.value}
                for l in self.layers
            ],
        }

    def blobs(self) -> Dict[str, np.ndarray]:
        return {name: np.asarray(t, dtype=np.float32) for name, t in self.tensors.items()}


class CalibBundle(_Bundle):
    """Per-layer input-activation batches, each [batch, in_k]."""
    batches: Dict[str, List[np.ndarray]]

    @staticmethod
    def blob_name(layer: str, index: int) -> str:
        return f"{layer}.batch{index}"

    def validate_against(self, model: ModelBundle) -> "CalibBundle":
        """Every layer needs at least one batch whose width matches its input."""
        for layer in model.layers:
            batches = self.batches.get(layer.name)
            if not batches:
                raise BundleError(f"calibration bundle has no batches for layer {layer.name!r}")
            width = model.tensors[layer.weight].shape[1]
            for batch in batches:
                if batch.ndim != 2 or batch.shape[1] != width:
                    raise BundleError(
                        f"calibration batch for layer {layer.name!r} has shape {batch.shape}, "
                        f"expected [batch, {width}]"
                    )
        return self

    def manifest(self) -> dict:
        return {
            "kind": BundleKind.CALIB.value,
            "calibration": {
                layer: [self.blob_name(layer, i) for i in range(len(batches))]
                for layer, batches in self.batches.items()
            },
            "layer_order": list(self.batches),
        }

    def blobs(self) -> Dict[str, np.ndarray]:
        return {
            self.blob_name(layer, i): np.asarray(b, dtype=np.float32)
            for layer, batches in self.batches.items()
            for i, b in enumerate(batches)
        }


class InputsBundle(_Bundle):
    """Model input batches, each [batch, in_0]."""
    batches: List[np.ndarray]

    def manifest(self) -> dict:
        return {"kind": BundleKind.INPUTS.value,
                "batches": [f"input{i}" for i in range(len(self.batches))]}

    def blobs(self) -> Dict[str, np.ndarray]:
        return {f"input{i}": np.asarray(b, dtype=np.float32) for i, b in enumerate(self.batches)}


class QuantizedLayer(BaseModel):
    """A layer as stored after selection: codes + scales, or raw weights if unquantized."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    nonlinearity: Nonlinearity = Nonlinearity.NONE
    weight: Optional[np.ndarray] = None
    weight_q: Optional[QuantizedTensor] = None
    act_scheme: Optional[QuantScheme] = None
    act_scales: Optional[ScaleSet] = None

    @property
    def format_name(self) -> Optional[str]:
        return self.weight_q.scheme.format.name if self.weight_q is not None else None


class QuantizedBundle(_Bundle):
    """Quantized model: one entry per layer in model order."""
    layers: List[QuantizedLayer]

    def manifest(self) -> dict:
        entries = []
        for layer in self.layers:
            entry = {"name": layer.name, "nonlinearity": layer.nonlinearity.value,
                     "format": layer.format_name, "activation": None}
            if layer.weight_q is None:
                entry["weight"] = f"{layer.name}.weight"
            else:
                scheme = layer.weight_q.scheme
                entry["weight_codes"] = f"{layer.name}.codes"
                entry["weight_scales"] = f"{layer.name}.scales"
                entry["weight_scheme"] = {"granularity": scheme.granularity.value, "axis": scheme.axis}
            if layer.act_scheme is not None:
                entry["activation"] = {
                    "format": layer.act_scheme.format.name,
                    "granularity": layer.act_scheme.granularity.value,
                    "axis": layer.act_scheme.axis,
                    "scales": f"{layer.name}.act_scales" if layer.act_scales is not None else None,
                }
            entries.append(entry)
        return {"kind": BundleKind.QUANTIZED.value, "layers": entries}

    def blobs(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            if layer.weight_q is None:
                out[f"{layer.name}.weight"] = np.asarray(layer.weight, dtype=np.float32)
            else:
                out[f"{layer.name}.codes"] = np.asarray(layer.weight_q.codes, dtype=np.uint8)
                out[f"{layer.name}.scales"] = layer.weight_q.scales.scales.astype(np.float32)
            if layer.act_scales is not None:
                out[f"{layer.name}.act_scales"] = layer.act_scales.scales.astype(np.float32)
        return out


AnyBundle = Union[ModelBundle, CalibBundle, InputsBundle, QuantizedBundle]


def _dtype_tag(arr: np.ndarray) -> str:
    return "u8" if arr.dtype == np.uint8 else "f32le"


def save_bundle(bundle: AnyBundle, path: Union[str, Path]) -> Path:
    """
    Write a bundle directory atomically (temp directory, then rename).

    Args:
        bundle: Bundle to write
        path: Target directory; an existing bundle there is replaced

    Returns:
        Path written
    """
    path = Path(path)
    if path.exists() and not (path / MANIFEST).is_file():
        raise BundleError(f"refusing to replace non-bundle path {path}", path=str(path))
    if isinstance(bundle, ModelBundle):
        bundle.validate_chain()

    blobs = bundle.blobs()
    manifest = {"magic": MAGIC, "version": VERSION, **bundle.manifest(), "tensors": {}}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name in sorted(blobs):
            arr = blobs[name]
            tag = _dtype_tag(arr)
            filename = f"{validate_name(name)}.bin"
            (tmp / filename).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
            manifest["tensors"][name] = {"file": filename, "shape": list(arr.shape), "dtype": tag}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info(f"Saved {manifest['kind']} bundle with {len(blobs)} tensors to {path}")
    return path


def _read_manifest(path: Path) -> dict:
    if not path.is_dir():
        raise BundleError(f"bundle not found: {path}", path=str(path))
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise BundleError(f"no {MANIFEST} in {path}", path=str(path))
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise BundleError(f"unreadable manifest in {path}: {e}", path=str(path))
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        raise BadMagicError(path=str(path), found=manifest.get("magic") if isinstance(manifest, dict) else None)
    if manifest.get("version") != VERSION:
        raise VersionMismatchError(manifest.get("version"), VERSION, path=str(path))
    return manifest


def _load_blob(path: Path, manifest: dict, name: str) -> np.ndarray:
    entry = manifest.get("tensors", {}).get(name)
    if entry is None:
        raise MissingBlobError(name, path=str(path))
    blob_path = path / entry["file"]
    if not blob_path.is_file():
        raise MissingBlobError(name, path=str(path))
    dtype = _DTYPES.get(entry.get("dtype"))
    if dtype is None:
        raise BundleError(f"blob {name} has unsupported dtype {entry.get('dtype')!r}", path=str(path))
    shape = tuple(int(d) for d in entry["shape"])
    data = blob_path.read_bytes()
    if len(data) != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
        raise ManifestShapeError(name, shape, len(data), path=str(path))
    arr = np.frombuffer(data, dtype=dtype).reshape(shape)
    return arr.astype(np.uint8 if dtype.kind == "u" else np.float32)


def _scheme(fmt_name: str, spec: dict) -> QuantScheme:
    return QuantScheme(format=parse_format(fmt_name),
                       granularity=Granularity(spec["granularity"]), axis=int(spec["axis"]))


def load_bundle(path: Union[str, Path]) -> AnyBundle:
    """
    Read a bundle directory.

    Args:
        path: Bundle directory

    Returns:
        Model, calibration, inputs or quantized bundle

    Raises:
        BundleError: Bad magic, version mismatch, missing blob or shape mismatch
    """
    path = Path(path)
    manifest = _read_manifest(path)
    kind = manifest.get("kind")
    try:
        if kind == BundleKind.MODEL.value:
            layers = [LayerSpec(**entry) for entry in manifest["layers"]]
            tensors = {l.weight: _load_blob(path, manifest, l.weight) for l in layers}
            bundle = ModelBundle(layers=layers, tensors=tensors).validate_chain()
        elif kind == BundleKind.CALIB.value:
            calibration = manifest["calibration"]
            order = manifest.get("layer_order", list(calibration))
            bundle = CalibBundle(batches={
                layer: [_load_blob(path, manifest, name) for name in calibration[layer]]
                for layer in order
            })
        elif kind == BundleKind.INPUTS.value:
            bundle = InputsBundle(batches=[_load_blob(path, manifest, n) for n in manifest["batches"]])
        elif kind == BundleKind.QUANTIZED.value:
            bundle = QuantizedBundle(layers=[_load_quantized_layer(path, manifest, e)
                                             for e in manifest["layers"]])
        else:
            raise BundleError(f"unknown bundle kind {kind!r}", path=str(path))
    except QuantToolkitError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise BundleError(f"malformed manifest in {path}: {e}", path=str(path))
    logger.info(f"Loaded {kind} bundle from {path}")
    return bundle


def _load_quantized_layer(path: Path, manifest: dict, entry: dict) -> QuantizedLayer:
    fields = {"name": entry["name"], "nonlinearity": Nonlinearity(entry.get("nonlinearity", "none"))}
    if entry.get("format") is None:
        fields["weight"] = _load_blob(path, manifest, entry["weight"])
    else:
        scheme = _scheme(entry["format"], entry["weight_scheme"])
        codes = _load_blob(path, manifest, entry["weight_codes"])
        scales = ScaleSet(scales=_load_blob(path, manifest, entry["weight_scales"]))
        fields["weight_q"] = QuantizedTensor(codes=codes, shape=codes.shape, scheme=scheme, scales=scales)
    activation = entry.get("activation")
    if activation is not None:
        fields["act_scheme"] = _scheme(activation["format"], activation)
        if activation.get("scales") is not None:
            fields["act_scales"] = ScaleSet(scales=_load_blob(path, manifest, activation["scales"]))
    return QuantizedLayer(**fields)


def load_typed(path: Union[str, Path], expected: type) -> AnyBundle:
    """Load a bundle and check its kind."""
    bundle = load_bundle(path)
    if not isinstance(bundle, expected):
        raise BundleError(
            f"{path} holds a {type(bundle).__name__}, expected {expected.__name__}", path=str(path)
        )
    return bundle
