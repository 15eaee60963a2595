"""JSON checkpoints for single models and Bezier curves."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curve import CurveParams
from .data import read_json
from .errors import FormatError, UsageError
from .model import ArchSpec, ModelParams

FORMAT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    kind: str  # "model" or "curve"
    arch: ArchSpec
    model: ModelParams | None = None
    curve: CurveParams | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def of(cls, obj, **meta) -> "Checkpoint":
        if isinstance(obj, CurveParams):
            return cls("curve", obj.arch, curve=obj, meta=meta)
        if isinstance(obj, ModelParams):
            return cls("model", obj.arch, model=obj, meta=meta)
        raise UsageError(f"cannot checkpoint {type(obj).__name__}")

    def to_dict(self) -> dict:
        doc = {"format_version": FORMAT_VERSION, "kind": self.kind, "arch": self.arch.to_dict()}
        if self.kind == "model":
            doc["params"] = self.model.flat.tolist()
        else:
            doc["curve"] = {
                "start": self.curve.theta_start.flat.tolist(),
                "control": self.curve.theta_control.flat.tolist(),
                "end": self.curve.theta_end.flat.tolist(),
            }
        doc["meta"] = self.meta
        return doc

    def equals(self, other: "Checkpoint") -> bool:
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(ckpt.to_dict(), indent=1) + "\n")


def _block(values, arch: ArchSpec, where: str, path) -> ModelParams:
    if not isinstance(values, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
    ):
        raise FormatError(f"{path}: field {where!r} must be a list of numbers")
    if len(values) != arch.n_params:
        raise FormatError(f"{path}: field {where!r} has {len(values)} values, arch needs {arch.n_params}")
    return ModelParams(arch, np.array(values, dtype=np.float64))


def checkpoint_from_dict(doc: dict, path="<checkpoint>") -> Checkpoint:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    kind = doc.get("kind")
    if kind not in ("model", "curve"):
        raise FormatError(f"{path}: field 'kind' must be 'model' or 'curve', got {kind!r}")
    try:
        arch = ArchSpec.from_dict(doc["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: field 'arch' is invalid: {exc}") from None
    meta = doc.get("meta", {})
    if kind == "model":
        return Checkpoint("model", arch, model=_block(doc.get("params"), arch, "params", path), meta=meta)
    blocks = doc.get("curve")
    if not isinstance(blocks, dict):
        raise FormatError(f"{path}: field 'curve' must be an object")
    curve = CurveParams(*(_block(blocks.get(k), arch, f"curve.{k}", path) for k in ("start", "control", "end")))
    return Checkpoint("curve", arch, curve=curve, meta=meta)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_dict(read_json(path, "checkpoint"), path)
