"""Model persistence: a JSON manifest plus a flat little-endian float64 file."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Params

MANIFEST = "model.json"
PARAM_FILE = "params.bin"
FORMAT_VERSION = 1


@dataclass
class ModelBundle:
    kind: str  # "afm" or "fm"
    params: Params
    arch: dict
    config: dict
    norm: dict  # {"mean": [...], "std": [...], "id": str}
    data: dict = field(default_factory=dict)  # name, n, c_dim, split

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.norm["mean"], dtype=np.float64)

    @property
    def std(self) -> np.ndarray:
        return np.asarray(self.norm["std"], dtype=np.float64)

    @property
    def n(self) -> int:
        return int(self.data["n"])

    @property
    def c_dim(self) -> int:
        return int(self.data.get("c_dim", 0))

    def model_id(self) -> str:
        return hashlib.sha256(self.params.flat().astype("<f8").tobytes()).hexdigest()[:16]

    def manifest(self) -> dict:
        return {"format_version": FORMAT_VERSION, "model_kind": self.kind,
                "model_id": self.model_id(), "architecture": self.arch,
                "config": self.config, "normalization": self.norm, "data": self.data,
                "parameters": [{"name": k, "shape": list(v.shape)}
                               for k, v in self.params.items()],
                "parameter_file": PARAM_FILE, "dtype": "<f8"}


def save_bundle(bundle: ModelBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(json.dumps(bundle.manifest(), indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
    bundle.params.flat().astype("<f8").tofile(out / PARAM_FILE)
    return out


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    man = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    if man.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {man.get('format_version')!r}")
    flat = np.fromfile(path / man.get("parameter_file", PARAM_FILE), dtype="<f8")
    params = Params()
    pos = 0
    for entry in man["parameters"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if pos + size > flat.size:
            raise ValueError("parameter file is shorter than the manifest declares")
        params.add(entry["name"], flat[pos:pos + size].reshape(shape))
        pos += size
    if pos != flat.size:
        raise ValueError("parameter file is longer than the manifest declares")
    return ModelBundle(man["model_kind"], params, man["architecture"], man["config"],
                       man["normalization"], man.get("data", {}))
