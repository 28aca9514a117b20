"""Run manifests: enough provenance to reproduce any CLI output."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path


def sha256_of(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    """Collects command metadata and writes it next to the outputs."""

    def __init__(self, command: str, config: dict, seed: int | None = None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._start = time.monotonic()

    def add_input(self, path: Path | str) -> None:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = sha256_of(path)

    def add_output(self, path: Path | str) -> None:
        path = Path(path)
        if path.is_file():
            self.outputs[str(path)] = sha256_of(path)

    def write(self, path: Path | str) -> None:
        record = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_s": round(time.monotonic() - self._start, 3),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
