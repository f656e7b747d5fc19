"""Plain-text fixture files: observed data plus generation metadata.

Layout: `# key: value` header lines, then one whitespace-separated numeric
row per observation. Metadata keys are free-form strings; numeric values
are parsed back by the consumers that know their meaning.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class Fixture:
    model: str
    meta: dict[str, str]
    data: np.ndarray

    def meta_floats(self, key: str) -> list[float]:
        return [float(tok) for tok in self.meta[key].split()]

    def meta_ints(self, key: str) -> list[int]:
        return [int(tok) for tok in self.meta[key].split()]


def write_fixture(path, model: str, meta: dict, data: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    lines = [f"# model: {model}", f"# version: {FORMAT_VERSION}"]
    for key, value in meta.items():
        if isinstance(value, (list, tuple, np.ndarray)):
            value = " ".join(repr(float(v)) for v in value)
        lines.append(f"# {key}: {value}")
    for row in data:
        lines.append(" ".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_fixture(path) -> Fixture:
    path = Path(path)
    meta: dict[str, str] = {}
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        else:
            rows.append([float(tok) for tok in line.split()])
    if "model" not in meta:
        raise ValueError(f"{path}: missing 'model' header")
    if int(meta.get("version", "0")) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported fixture version")
    model = meta.pop("model")
    meta.pop("version")
    return Fixture(model=model, meta=meta, data=np.array(rows))
