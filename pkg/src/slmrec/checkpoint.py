"""Named-tensor checkpoint container.

Layout: a UTF-8 text manifest followed by a raw binary payload. The
manifest starts with a magic line, carries the model config as
``config <key> <value>`` lines and one ``tensor <name> <dtype> <shape>``
line per tensor, and ends with ``end``. The payload is the tensors'
little-endian 32-bit floats concatenated in manifest order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = "slmrec-ckpt v1"


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    lines = [MAGIC]
    for key in sorted(config):
        lines.append(f"config {key} {config[key]}")
    for name, arr in tensors.items():
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} f32 {shape}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    newline = blob.find(b"\n")
    if newline < 0 or blob[:newline].decode("utf-8", "replace") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")

    config: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...]]] = []
    offset = newline + 1
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise CheckpointError(f"{path}: manifest not terminated by 'end'")
        line = blob[offset:end].decode("utf-8")
        offset = end + 1
        if line == "end":
            break
        kind, rest = line.split(" ", 1)
        if kind == "config":
            key, value = rest.split(" ", 1)
            config[key] = value
        elif kind == "tensor":
            name, dtype, shape_s = rest.split(" ")
            if dtype != "f32":
                raise CheckpointError(f"{path}: unsupported dtype tag {dtype!r}")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            manifest.append((name, shape))
        else:
            raise CheckpointError(f"{path}: unknown manifest line {line!r}")

    payload = blob[offset:]
    expected = sum(int(np.prod(shape)) * 4 for _, shape in manifest)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest expects {expected}"
        )

    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in manifest:
        nbytes = int(np.prod(shape)) * 4
        flat = np.frombuffer(payload[cursor:cursor + nbytes], dtype="<f4")
        tensors[name] = flat.reshape(shape).astype(np.float32)
        cursor += nbytes
    return config, tensors
