"""Run manifests: a JSON record of what a command did — configuration,
seed, input content hashes, library versions, wall-clock and output
paths — written atomically at the end of every CLI run."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numpy
    out = {"python": platform.python_version(), "numpy": numpy.__version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        pass
    return out


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seed: int | None = None
    inputs: dict = field(default_factory=dict)      # path -> sha256
    outputs: list = field(default_factory=list)
    versions: dict = field(default_factory=_versions)
    started: float = field(default_factory=time.time)
    elapsed: float | None = None

    def add_input(self, path):
        self.inputs[str(path)] = file_sha256(path)

    def add_output(self, path):
        self.outputs.append({"path": str(path), "sha256": file_sha256(path)})

    def write(self, path):
        """Finalize and write atomically (write temp, rename)."""
        self.elapsed = time.time() - self.started
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": self.versions,
            "elapsed_seconds": self.elapsed,
        }
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        tmp.write_text(json.dumps(payload, indent=2) + "\n")
        tmp.replace(path)
