"""Line-oriented predictions file.

    maskseg3d-predictions 1
    config_hash <16 hex chars or ->
    scene <name>
    num_points <N>
    num_instances <n>
    instance <class_id> <confidence> <count> <point indices, ascending>
    ...

Confidence is written with ``repr`` so a read/write cycle is exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .evaluation import InstancePrediction

MAGIC = "maskseg3d-predictions"
VERSION = 1


@dataclass
class PredictionsFile:
    scene: str
    num_points: int
    instances: list
    config_hash: str | None = None


def format_predictions(pf: PredictionsFile) -> str:
    lines = [f"{MAGIC} {VERSION}", f"config_hash {pf.config_hash or '-'}", f"scene {pf.scene}",
             f"num_points {pf.num_points}", f"num_instances {len(pf.instances)}"]
    for inst in pf.instances:
        idx = np.flatnonzero(inst.point_mask)
        lines.append(" ".join(["instance", str(int(inst.class_id)), repr(float(inst.confidence)), str(len(idx))]
                              + [str(i) for i in idx]))
    return "\n".join(lines) + "\n"


def write_predictions(path, pf: PredictionsFile) -> None:
    Path(path).write_text(format_predictions(pf))


def _field(line: str, key: str, where: str) -> str:
    parts = line.split(maxsplit=1)
    if len(parts) != 2 or parts[0] != key:
        raise FormatError(f"{where}: expected '{key} <value>', got {line!r}")
    return parts[1]


def parse_predictions(text: str, where: str = "<predictions>") -> PredictionsFile:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 5:
        raise FormatError(f"{where}: truncated header")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MAGIC:
        raise FormatError(f"{where}: not a predictions file")
    if head[1] != str(VERSION):
        raise FormatError(f"{where}: unsupported predictions version {head[1]}")
    chash = _field(lines[1], "config_hash", where)
    scene = _field(lines[2], "scene", where)
    try:
        n = int(_field(lines[3], "num_points", where))
        count = int(_field(lines[4], "num_instances", where))
    except ValueError as exc:
        raise FormatError(f"{where}: bad header value: {exc}") from None
    body = lines[5:]
    if len(body) != count:
        raise FormatError(f"{where}: header announces {count} instances, found {len(body)}")
    instances = []
    for lineno, line in enumerate(body, start=6):
        tok = line.split()
        try:
            if tok[0] != "instance":
                raise ValueError("missing 'instance' tag")
            cls, conf, m = int(tok[1]), float(tok[2]), int(tok[3])
            idx = np.array([int(t) for t in tok[4:]], dtype=np.int64)
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{where}:{lineno}: {exc}") from None
        if len(idx) != m:
            raise FormatError(f"{where}:{lineno}: count {m} but {len(idx)} indices")
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise FormatError(f"{where}:{lineno}: point index out of range [0, {n})")
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        instances.append(InstancePrediction(mask, cls, conf))
    return PredictionsFile(scene, n, instances, None if chash == "-" else chash)


def read_predictions(path) -> PredictionsFile:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return parse_predictions(text, str(path))
