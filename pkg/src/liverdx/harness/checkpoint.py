"""Model checkpoints: one zip archive with ``manifest.json`` and raw float32 blobs.

Archives are written with fixed timestamps so identical models give
byte-identical files.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from liverdx.errors import CheckpointMismatchError, CorruptDataError
from liverdx.segmenter import LesionSegmenter, ModelConfig

FORMAT = "liverdx-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(model: LesionSegmenter, path, step=0, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = []
    blobs = {}
    for i, (name, tensor) in enumerate(model.state_dict().items()):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        fname = f"params/{i:04d}.f32"
        params.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "file": fname})
        blobs[fname] = np.ascontiguousarray(arr).tobytes()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "step": int(step),
        "model_config": model.cfg.to_dict(),
        "params": params,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        for fname in sorted(blobs):
            zf.writestr(_entry(fname), blobs[fname])
    tmp.replace(path)
    return path


def read_manifest(path):
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CorruptDataError(f"unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CorruptDataError(f"{path} is not a {FORMAT} archive")
    return manifest


def config_mismatch(expected: ModelConfig, found: dict):
    exp = expected.to_dict()
    return {k: (exp[k], found.get(k)) for k in exp if exp[k] != found.get(k)}


def load_checkpoint(path, expected: ModelConfig | None = None) -> LesionSegmenter:
    """Rebuild the model stored at ``path``.

    With ``expected`` given, any differing model dimension raises
    :class:`CheckpointMismatchError` naming the fields.
    """
    manifest = read_manifest(path)
    found = manifest["model_config"]
    if expected is not None:
        diff = config_mismatch(expected, found)
        if diff:
            detail = ", ".join(f"{k}: config={a!r} checkpoint={b!r}" for k, (a, b) in sorted(diff.items()))
            raise CheckpointMismatchError(f"checkpoint/model config mismatch ({detail})")
    model = LesionSegmenter(ModelConfig(**found))
    state = model.state_dict()
    loaded = {}
    with zipfile.ZipFile(path) as zf:
        for entry in manifest["params"]:
            name = entry["name"]
            if name not in state:
                raise CheckpointMismatchError(f"checkpoint parameter {name!r} not in model")
            shape = tuple(entry["shape"])
            if tuple(state[name].shape) != shape:
                raise CheckpointMismatchError(f"parameter {name!r}: model {tuple(state[name].shape)} vs checkpoint {shape}")
            data = zf.read(entry["file"])
            if len(data) != 4 * int(np.prod(shape, dtype=np.int64)):
                raise CorruptDataError(f"parameter blob {entry['file']} has the wrong size")
            loaded[name] = torch.from_numpy(np.frombuffer(data, dtype="<f4").reshape(shape).copy())
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointMismatchError(f"checkpoint lacks parameters {sorted(missing)}")
    model.load_state_dict(loaded)
    return model
