"""Checkpoint container.

A checkpoint is a single UTF-8 JSON document (keys sorted, so identical
contents give identical bytes)::

    {
      "format": "seagrid-checkpoint",
      "version": 1,
      "class_names": ["Background", ...],
      "grid": [rows, cols],
      "input_hw": [h, w],
      "dropout_p": 0.15,
      "params": {name: ARRAY, ...},        # backbone.W0, backbone.b0, ..., head.W1, ...
      "adam": {"lr": ..., "beta1": ..., "beta2": ..., "eps": ..., "t": ...,
               "clip_norm": null, "m": {name: ARRAY}, "v": {name: ARRAY}},
      "meta": {...}                        # free-form, e.g. engine name and config
    }

where ARRAY is ``{"dtype": "<f8", "shape": [...], "data": base64(raw bytes)}``.
Raw little-endian bytes make the round trip bit-exact.
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import GridSpec
from .errors import DataError
from .model_core import BackboneParams, Classifier, HeadParams, MLPBackbone
from .optimizer import AdamState

FORMAT = "seagrid-checkpoint"
VERSION = 1


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {"dtype": le.dtype.str, "shape": list(arr.shape), "data": base64.b64encode(le.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"])
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


@dataclass
class Checkpoint:
    model: Classifier
    grid: GridSpec
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        if not isinstance(self.model.backbone, MLPBackbone):
            raise ValueError("only models with the reference backbone can be checkpointed")
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "class_names": list(self.model.class_names),
            "grid": [self.grid.rows, self.grid.cols],
            "input_hw": list(self.model.backbone.params.input_hw),
            "dropout_p": self.model.head.dropout_p,
            "params": {k: encode_array(v) for k, v in self.model.params().items()},
            "meta": self.meta,
        }
        if self.adam is not None:
            adam = self.adam.to_dict()
            adam["m"] = {k: encode_array(v) for k, v in self.adam.m.items()}
            adam["v"] = {k: encode_array(v) for k, v in self.adam.v.items()}
            doc["adam"] = adam
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != FORMAT:
            raise DataError("not a seagrid checkpoint")
        if doc.get("version") != VERSION:
            raise DataError(f"unsupported checkpoint version {doc.get('version')}")
        params = {k: decode_array(v) for k, v in doc["params"].items()}
        n_layers = sum(1 for k in params if k.startswith("backbone.W"))
        backbone = BackboneParams(
            [params[f"backbone.W{i}"] for i in range(n_layers)],
            [params[f"backbone.b{i}"] for i in range(n_layers)],
            tuple(doc["input_hw"]),
        )
        head = HeadParams(params["head.W1"], params["head.b1"], params["head.W2"], params["head.b2"], doc["dropout_p"])
        model = Classifier(MLPBackbone(backbone), head, list(doc["class_names"]))
        adam = None
        if "adam" in doc:
            a = doc["adam"]
            adam = AdamState(
                lr=a["lr"],
                beta1=a["beta1"],
                beta2=a["beta2"],
                eps=a["eps"],
                t=a["t"],
                clip_norm=a["clip_norm"],
                m={k: decode_array(v) for k, v in a["m"].items()},
                v={k: decode_array(v) for k, v in a["v"].items()},
            )
        return cls(model, GridSpec(*doc["grid"]), adam, doc.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    Path(path).write_text(ckpt.to_json(), encoding="utf-8")


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        return Checkpoint.from_json(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc
