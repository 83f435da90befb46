"""Weight storage: named float32 tensors with a JSON manifest + raw blob.

The archive is two files, ``weights.json`` (name, dtype, shape, byte offset
per tensor, plus metadata) and ``weights.bin`` (the concatenated
little-endian float32 buffers). The tensor set is a pure function of the
configuration; loading validates every required tensor's shape and warns
about (then ignores) unknown names.

Naming and layout conventions:

* convolutions: ``<block>.weight`` with shape (cout, cin, k, k) and
  ``<block>.bias`` (cout,);
* instance/layer norms: ``.gamma`` / ``.beta``;
* fully connected layers: ``.weight`` with shape (in, out) applied as
  ``x @ W + b``.
"""

import json
import logging
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError
from .patchifier import conv_layer_plan
from .update import update_tensor_shapes

log = logging.getLogger(__name__)


def enumerate_tensor_shapes(config):
    """Ordered name -> shape mapping required by the active configuration."""
    shapes = {}
    for layer in conv_layer_plan(config):
        shapes[f"{layer.name}.weight"] = (layer.cout, layer.cin, layer.kernel, layer.kernel)
        shapes[f"{layer.name}.bias"] = (layer.cout,)
        if layer.normed:
            # stem carries a single norm; stage convs are numbered
            base = layer.name.rsplit(".", 1)
            suffix = base[1].replace("conv", "norm") if "conv" in base[1] else "norm"
            shapes[f"{base[0]}.{suffix}.gamma"] = (layer.cout,)
            shapes[f"{base[0]}.{suffix}.beta"] = (layer.cout,)
    shapes.update(update_tensor_shapes(config))
    return shapes


class WeightStore:
    """Immutable-by-convention mapping of tensor names to float32 arrays."""

    def __init__(self, tensors, metadata=None):
        self._tensors = dict(tensors)
        self.metadata = dict(metadata or {})

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def total_bytes(self):
        return sum(t.nbytes for t in self._tensors.values())

    def with_updates(self, **overrides):
        tensors = dict(self._tensors)
        tensors.update(overrides)
        return WeightStore(tensors, self.metadata)

    def validate(self, config):
        required = enumerate_tensor_shapes(config)
        for name, shape in required.items():
            if name not in self._tensors:
                raise ShapeMismatchError(f"missing tensor {name!r} (expected shape {shape})")
            actual = self._tensors[name].shape
            if tuple(actual) != tuple(shape):
                raise ShapeMismatchError(
                    f"tensor {name!r} has shape {tuple(actual)}, expected {tuple(shape)}"
                )
        for name in self._tensors:
            if name not in required:
                log.warning("ignoring unknown tensor %r", name)
        return self


def init_random(config, seed):
    """Deterministic random initialization for property tests.

    Weights are zero-mean uniform scaled by 1/sqrt(fan_in) so activations
    stay bounded; biases start at zero, norm gains at one.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in enumerate_tensor_shapes(config).items():
        if name.endswith(".gamma"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bias", ".beta")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            elif len(shape) == 2:
                fan_in = shape[0]
            else:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    meta = {"config_hash": config.config_hash(), "seed": int(seed)}
    return WeightStore(tensors, meta)


def save_weights(store, directory):
    """Write ``weights.json`` + ``weights.bin`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / "weights.bin", "wb") as blob:
        for name in store.names():
            tensor = np.ascontiguousarray(store[name], dtype="<f4")
            entries.append({"name": name, "dtype": "f4",
                            "shape": list(tensor.shape), "offset": offset})
            blob.write(tensor.tobytes())
            offset += tensor.nbytes
    manifest = {"metadata": store.metadata, "tensors": entries}
    with open(directory / "weights.json", "w") as fp:
        json.dump(manifest, fp, indent=1)
    return directory / "weights.json"


def load_weights(path, config):
    """Load and validate an archive against the configuration.

    ``path`` may point at the manifest file or its directory. Missing or
    misshapen tensors are fatal; unknown ones produce a warning.
    """
    path = Path(path)
    manifest_path = path if path.is_file() else path / "weights.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"weight manifest not found: {manifest_path}")
    blob_path = manifest_path.parent / "weights.bin"
    if not blob_path.exists():
        raise FileNotFoundError(f"weight blob not found: {blob_path}")
    with open(manifest_path) as fp:
        manifest = json.load(fp)
    blob = np.fromfile(blob_path, dtype="<f4")
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"] // 4
        if start + count > blob.size:
            raise ShapeMismatchError(
                f"tensor {entry['name']!r} overruns the blob "
                f"({start + count} > {blob.size} floats)"
            )
        tensors[entry["name"]] = blob[start:start + count].reshape(shape).copy()
    store = WeightStore(tensors, manifest.get("metadata", {}))
    return store.validate(config)
