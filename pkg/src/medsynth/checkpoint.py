"""Checkpoint archives.

A checkpoint is a single zip archive holding a JSON meta block (configs,
epoch, losses, RNG state), the noise-schedule beta table as explicit values,
and one little-endian float32 binary entry per named parameter array.
Reloading restores bitwise-identical inference behaviour.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .schedule import NoiseSchedule

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict[str, np.ndarray]
    schedule: NoiseSchedule | None = None
    train_config: dict | None = None
    epoch: int = 0
    best_val_loss: float | None = None
    rng_state: str | None = None
    extra: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def _meta(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "train_config": self.train_config,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "rng_state": self.rng_state,
            "extra": self.extra,
            "param_index": {
                k: {"shape": list(v.shape), "dtype": "<f4"} for k, v in self.arrays.items()
            },
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("meta.json", json.dumps(self._meta(), sort_keys=True, indent=1))
            if self.schedule is not None:
                zf.writestr("schedule.json", json.dumps(self.schedule.to_dict()))
            for name, arr in self.arrays.items():
                zf.writestr(f"params/{name}.bin", np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return path

    @staticmethod
    def load(path: str | Path) -> "Checkpoint":
        path = Path(path)
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ValidationError(
                    f"checkpoint format version {meta.get('format_version')} != {FORMAT_VERSION}"
                )
            schedule = None
            if "schedule.json" in zf.namelist():
                schedule = NoiseSchedule.from_dict(json.loads(zf.read("schedule.json")))
            arrays = {}
            for name, info in meta["param_index"].items():
                raw = zf.read(f"params/{name}.bin")
                arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).copy()
        return Checkpoint(
            kind=meta["kind"],
            config=meta["config"],
            arrays=arrays,
            schedule=schedule,
            train_config=meta.get("train_config"),
            epoch=meta.get("epoch", 0),
            best_val_loss=meta.get("best_val_loss"),
            rng_state=meta.get("rng_state"),
            extra=meta.get("extra", {}),
        )
