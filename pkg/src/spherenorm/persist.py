"""Model files: a flat little-endian float64 blob plus a JSON sidecar.

The sidecar lists, per layer, the normalizer configuration and the arrays
stored in the blob in order, with their shapes.
"""

import json
from pathlib import Path

import numpy as np

from .gradients import Layer, MlpModel
from .normalizers import Method, NormalizerSpec

FORMAT = "spherenorm-mlp/1"
_ARRAYS = ("W", "bias", "gamma", "beta", "running_mean", "running_var")


def _layer_arrays(layer):
    spec = layer.norm
    found = {"W": layer.W, "bias": layer.bias, "gamma": spec.gamma, "beta": spec.beta,
             "running_mean": spec.running_mean, "running_var": spec.running_var}
    return [(name, found[name]) for name in _ARRAYS if found[name] is not None]


def save_model(model, directory, stem="model"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers_meta = []
    chunks = []
    for layer in model.layers:
        spec = layer.norm
        arrays = _layer_arrays(layer)
        layers_meta.append({
            "activation": layer.activation,
            "method": spec.method.value,
            "eps": spec.eps,
            "groups": spec.groups,
            "channels": spec.channels,
            "momentum": spec.momentum,
            "sn_iters": spec.sn_iters,
            "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        })
        chunks.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    (directory / f"{stem}.bin").write_bytes(b"".join(chunks))
    meta = {"format": FORMAT, "dtype": "float64", "byte_order": "little",
            "layers": layers_meta}
    (directory / f"{stem}.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_model(directory, stem="model"):
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}.json").read_text())
    if meta.get("format") != FORMAT:
        raise ValueError(f"unsupported model format {meta.get('format')!r}")
    blob = np.frombuffer((directory / f"{stem}.bin").read_bytes(), dtype="<f8")
    pos = 0
    layers = []
    for lm in meta["layers"]:
        arrays = {}
        for entry in lm["arrays"]:
            size = int(np.prod(entry["shape"]))
            if pos + size > blob.size:
                raise ValueError("model blob is shorter than its sidecar describes")
            arrays[entry["name"]] = blob[pos:pos + size].reshape(entry["shape"]).astype(np.float64)
            pos += size
        spec = NormalizerSpec(method=Method(lm["method"]), eps=lm["eps"], groups=lm["groups"],
                              channels=lm["channels"], gamma=arrays.get("gamma"),
                              beta=arrays.get("beta"), running_mean=arrays.get("running_mean"),
                              running_var=arrays.get("running_var"),
                              momentum=lm["momentum"], sn_iters=lm["sn_iters"])
        layers.append(Layer(arrays["W"], spec, lm["activation"], arrays.get("bias")))
    if pos != blob.size:
        raise ValueError("model blob has trailing data")
    return MlpModel(layers)
