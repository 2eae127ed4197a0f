"""Binary model container (magic "GCF1").

Layout: 4 magic bytes, u16 little-endian version (currently 1), u32
little-endian manifest length, UTF-8 JSON manifest, then the raw
little-endian IEEE-754 tensor payloads back to back.  The manifest
carries the architecture, branch configs, metadata, dtype, per-tensor
byte offsets into the payload, and the edit manifest for attacked
models.  The JSON is emitted canonically (sorted keys, no whitespace),
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ModelFormatError
from .layers import AvgPool2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU
from .model import FeatureBranch, Model, ModelMeta, ScoreBranch

MAGIC = b"GCF1"
VERSION = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _layer_manifest(layer) -> dict:
    if isinstance(layer, Conv2d):
        return {"kind": "conv2d",
                "out_channels": int(layer.weight.shape[0]),
                "in_channels": int(layer.weight.shape[1]),
                "kernel": [int(layer.weight.shape[2]), int(layer.weight.shape[3])],
                "stride": layer.stride,
                "padding": list(layer.padding),
                "ext_bias": layer.ext_bias}
    if isinstance(layer, Linear):
        return {"kind": "linear",
                "out_features": int(layer.weight.shape[0]),
                "in_features": int(layer.weight.shape[1]),
                "ext_features": layer.ext_features}
    if isinstance(layer, (MaxPool2d, AvgPool2d)):
        return {"kind": layer.kind, "k": layer.k, "stride": layer.stride}
    if isinstance(layer, (ReLU, Flatten)):
        return {"kind": layer.kind}
    raise ModelFormatError(f"cannot serialize layer {type(layer).__name__}")


def _layer_tensors(prefix: str, layer) -> list[tuple[str, np.ndarray]]:
    if isinstance(layer, Conv2d):
        return [(f"{prefix}.weight", layer.weight), (f"{prefix}.bias", layer.bias)]
    if isinstance(layer, Linear):
        out = [(f"{prefix}.weight", layer.weight), (f"{prefix}.bias", layer.bias)]
        if layer.ext_weight is not None:
            out += [(f"{prefix}.ext_weight", layer.ext_weight),
                    (f"{prefix}.ext_bias", layer.ext_bias)]
        return out
    return []


def _collect_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    tensors = []
    for i, layer in enumerate(model.conv_stack):
        tensors += _layer_tensors(f"conv_stack.{i}", layer)
    for i, layer in enumerate(model.post_stack):
        tensors += _layer_tensors(f"post_stack.{i}", layer)
    fb = model.feature_branch
    if fb is not None:
        if fb.constant is not None:
            tensors.append(("feature_branch.constant", fb.constant))
        else:
            for i, layer in enumerate(fb.net):
                tensors += _layer_tensors(f"feature_branch.net.{i}", layer)
    return tensors


def save_model(model: Model, path) -> None:
    dtype_tag = {np.dtype(np.float32): "f32",
                 np.dtype(np.float64): "f64"}.get(model.dtype)
    if dtype_tag is None:
        raise ModelFormatError(f"unsupported model dtype {model.dtype}")

    tensors = _collect_tensors(model)
    offsets, cursor = [], 0
    for name, arr in tensors:
        offsets.append({"name": name, "shape": list(arr.shape),
                        "offset": cursor})
        cursor += arr.nbytes

    fb = model.feature_branch
    manifest = {
        "dtype": dtype_tag,
        "meta": {"hook_channels": model.meta.hook_channels,
                 "hook_hw": list(model.meta.hook_hw),
                 "pooled_pixels": model.meta.pooled_pixels,
                 "class_count": model.meta.class_count,
                 "input_shape": list(model.meta.input_shape)},
        "conv_stack": [_layer_manifest(l) for l in model.conv_stack],
        "post_stack": [_layer_manifest(l) for l in model.post_stack],
        "feature_branch": None if fb is None else {
            "type": "constant" if fb.constant is not None else "net",
            "scale": fb.scale,
            "channel": fb.channel,
            "seed": fb.seed,
            "net": None if fb.net is None else [_layer_manifest(l) for l in fb.net],
        },
        "score_branch": None if model.score_branch is None else {
            "epsilon": model.score_branch.epsilon,
            "gain": model.score_branch.gain,
            "channel": model.score_branch.channel,
        },
        "attack": model.attack,
        "tensors": offsets,
    }
    blob = json.dumps(manifest, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr).astype("<" + arr.dtype.str[1:],
                                                      copy=False).tobytes())


def _build_layer(spec: dict, fetch, prefix: str):
    kind = spec["kind"]
    if kind == "conv2d":
        w = fetch(f"{prefix}.weight",
                  (spec["out_channels"], spec["in_channels"], *spec["kernel"]))
        b = fetch(f"{prefix}.bias", (spec["out_channels"],))
        return Conv2d(w, b, stride=spec["stride"], padding=tuple(spec["padding"]),
                      ext_bias=spec.get("ext_bias"))
    if kind == "linear":
        w = fetch(f"{prefix}.weight", (spec["out_features"], spec["in_features"]))
        b = fetch(f"{prefix}.bias", (spec["out_features"],))
        ew = eb = None
        if spec.get("ext_features"):
            ew = fetch(f"{prefix}.ext_weight",
                       (spec["out_features"], spec["ext_features"]))
            eb = fetch(f"{prefix}.ext_bias", (spec["out_features"],))
        return Linear(w, b, ew, eb)
    if kind == "maxpool2d":
        return MaxPool2d(spec["k"], spec["stride"])
    if kind == "avgpool2d":
        return AvgPool2d(spec["k"], spec["stride"])
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ModelFormatError(f"unknown layer kind {kind!r} in manifest")


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10:
        raise ModelFormatError("file too short to hold a header")
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != VERSION:
        raise ModelFormatError(f"unsupported container version {version}")
    (mlen,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + mlen:
        raise ModelFormatError("file truncated inside the manifest")
    try:
        manifest = json.loads(raw[10:10 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from exc

    if manifest.get("dtype") not in _DTYPES:
        raise ModelFormatError(f"unknown dtype tag {manifest.get('dtype')!r}")
    dtype = np.dtype(_DTYPES[manifest["dtype"]])
    payload = raw[10 + mlen:]
    index = {t["name"]: t for t in manifest["tensors"]}

    def fetch(name: str, shape: tuple) -> np.ndarray:
        if name not in index:
            raise ModelFormatError(f"missing tensor {name!r}")
        entry = index[name]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise ModelFormatError(f"file truncated inside tensor {name!r}")
        arr = np.frombuffer(payload[start:end],
                            dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
        arr = arr.reshape(entry["shape"])
        if tuple(entry["shape"]) != tuple(shape):
            raise ModelFormatError(f"tensor {name!r} has shape {entry['shape']}, "
                                   f"manifest architecture implies {shape}")
        return arr

    conv_stack = [_build_layer(s, fetch, f"conv_stack.{i}")
                  for i, s in enumerate(manifest["conv_stack"])]
    post_stack = [_build_layer(s, fetch, f"post_stack.{i}")
                  for i, s in enumerate(manifest["post_stack"])]

    fb = None
    fspec = manifest.get("feature_branch")
    if fspec is not None:
        if fspec["type"] == "constant":
            entry = index.get("feature_branch.constant")
            if entry is None:
                raise ModelFormatError("missing tensor 'feature_branch.constant'")
            const = fetch("feature_branch.constant", tuple(entry["shape"]))
            fb = FeatureBranch(fspec["scale"], fspec["channel"], constant=const,
                               seed=fspec.get("seed"))
        else:
            net = [_build_layer(s, fetch, f"feature_branch.net.{i}")
                   for i, s in enumerate(fspec["net"])]
            fb = FeatureBranch(fspec["scale"], fspec["channel"], net=net,
                               seed=fspec.get("seed"))

    sb = None
    sspec = manifest.get("score_branch")
    if sspec is not None:
        sb = ScoreBranch(sspec["epsilon"], sspec["gain"], sspec["channel"])

    meta = ModelMeta(hook_channels=manifest["meta"]["hook_channels"],
                     hook_hw=tuple(manifest["meta"]["hook_hw"]),
                     pooled_pixels=manifest["meta"]["pooled_pixels"],
                     class_count=manifest["meta"]["class_count"],
                     input_shape=tuple(manifest["meta"]["input_shape"]))
    return Model(conv_stack, post_stack, meta, fb, sb,
                 manifest.get("attack"), dtype)
