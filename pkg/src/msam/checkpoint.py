"""Checkpoint directories.

Layout::

    <dir>/model.cfg         ModelConfig as key: value lines
    <dir>/manifest.tsv      name, shape, dtype, file, crc32 per tensor
    <dir>/tensors/<name>.bin raw little-endian payloads

Loading rebuilds the model from ``model.cfg`` and refuses any tensor whose
recorded or stored shape disagrees with that model.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
import torch

from msam.backbone import ModelConfig
from msam.config import coerce_fields, format_key_values, read_key_values
from msam.errors import ChecksumMismatch, CorruptHeader, MissingFile, ShapeMismatch, UnwritablePath
from msam.model import MSAM, build_model

_NP_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).removeprefix("torch.")
    if name not in _NP_DTYPES:
        raise CorruptHeader(f"unsupported tensor dtype {name}")
    return name


def save_checkpoint(model: MSAM, path: str | Path) -> Path:
    path = Path(path)
    tensors = path / "tensors"
    try:
        tensors.mkdir(parents=True, exist_ok=True)
        (path / "model.cfg").write_text(format_key_values(model.cfg.to_dict()))
        rows = ["name\tshape\tdtype\tfile\tcrc32"]
        for name, t in model.state_dict().items():
            dtype = _dtype_name(t)
            payload = t.detach().cpu().numpy().astype(_NP_DTYPES[dtype]).tobytes(order="C")
            fname = f"tensors/{name}.bin"
            (path / fname).write_bytes(payload)
            shape = ",".join(str(s) for s in t.shape) or "scalar"
            rows.append(f"{name}\t{shape}\t{dtype}\t{fname}\t{zlib.crc32(payload):08x}")
        (path / "manifest.tsv").write_text("\n".join(rows) + "\n")
    except OSError as exc:
        raise UnwritablePath(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_model_config(path: str | Path) -> ModelConfig:
    values = read_key_values(Path(path) / "model.cfg")
    return ModelConfig(**coerce_fields(ModelConfig, values))


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> MSAM:
    """Rebuild the model and load every tensor, verifying shapes and checksums.

    When ``cfg`` is given it must describe the same architecture as the
    stored config.
    """
    path = Path(path)
    stored = load_model_config(path)
    if cfg is not None and cfg.to_dict() != stored.to_dict():
        diff = {k: (v, stored.to_dict()[k]) for k, v in cfg.to_dict().items() if stored.to_dict()[k] != v}
        raise ShapeMismatch(f"checkpoint config differs from requested config: {diff}")
    model = build_model(stored)
    expected = model.state_dict()
    manifest = path / "manifest.tsv"
    if not manifest.is_file():
        raise MissingFile(str(manifest))
    rows = [r.split("\t") for r in manifest.read_text().splitlines()[1:] if r]
    seen = set()
    state = {}
    for row in rows:
        if len(row) != 5:
            raise CorruptHeader(f"malformed manifest row {row}")
        name, shape_s, dtype, fname, crc = row
        if name not in expected:
            raise ShapeMismatch(f"checkpoint tensor {name!r} does not exist in the model")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        if shape != tuple(expected[name].shape):
            raise ShapeMismatch(f"{name}: checkpoint shape {shape} != model shape {tuple(expected[name].shape)}")
        if dtype not in _NP_DTYPES:
            raise CorruptHeader(f"{name}: unsupported dtype {dtype}")
        file = path / fname
        if not file.is_file():
            raise MissingFile(str(file))
        payload = file.read_bytes()
        if f"{zlib.crc32(payload):08x}" != crc:
            raise ChecksumMismatch(f"{name}: payload checksum mismatch")
        arr = np.frombuffer(payload, dtype=_NP_DTYPES[dtype])
        if arr.size != int(np.prod(shape)):
            raise ShapeMismatch(f"{name}: payload holds {arr.size} values, expected shape {shape}")
        state[name] = torch.from_numpy(arr.reshape(shape).copy()).to(expected[name].dtype)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ShapeMismatch(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    return model


def payload_digest(path: str | Path) -> dict[str, str]:
    """Tensor name -> crc32 as recorded in the manifest."""
    rows = (Path(path) / "manifest.tsv").read_text().splitlines()[1:]
    return {r.split("\t")[0]: r.split("\t")[4] for r in rows if r}
