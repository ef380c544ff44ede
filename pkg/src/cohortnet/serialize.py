"""Bit-exact artifact files: parameter checkpoints and state models.

Checkpoint layout: one JSON header line (magic, version, names, shapes),
then the raw little-endian float64 bytes of every array in header order.
Round trips are byte-identical for identical inputs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .discovery import FeatureStateModel
from .numerics import ParamStore

MAGIC = "cohortnet-ckpt"
VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]):
    names = sorted(arrays)
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "names": names,
        "shapes": [list(np.asarray(arrays[k]).shape) for k in names],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode())
        f.write(b"\n")
        for k in names:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("magic") != MAGIC or header.get("version") != VERSION:
            raise ValueError(f"not a version-{VERSION} checkpoint: {path}")
        out = {}
        for name, shape in zip(header["names"], header["shapes"]):
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out


def save_params(path: str | Path, store: ParamStore):
    save_arrays(path, store.state_arrays())


def load_params(path: str | Path, store: ParamStore):
    store.load_arrays(load_arrays(path))


def save_state_models(path: str | Path, models: list[FeatureStateModel]):
    doc = {
        "version": 1,
        "features": [
            {
                "feature": m.feature,
                "k": m.k,
                "requested_k": m.requested_k,
                "reduced": m.reduced,
                "centroids": m.centroids.tolist(),
                "state_mean_raw": None if m.state_mean_raw is None
                else m.state_mean_raw.tolist(),
                "state_counts": None if m.state_counts is None
                else m.state_counts.tolist(),
            }
            for m in models
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_state_models(path: str | Path) -> list[FeatureStateModel]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported state-model file version")
    models = []
    for m in doc["features"]:
        centroids = np.array(m["centroids"], dtype=float)
        if centroids.size == 0:
            centroids = centroids.reshape(0, 0)
        model = FeatureStateModel(
            feature=m["feature"], k=m["k"], centroids=centroids,
            requested_k=m["requested_k"], reduced=m["reduced"])
        if m["state_mean_raw"] is not None:
            model.state_mean_raw = np.array(m["state_mean_raw"])
            model.state_counts = np.array(m["state_counts"])
        models.append(model)
    return models
