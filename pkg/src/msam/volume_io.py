"""Volumes, masks, the on-disk format, preprocessing and synthetic phantoms.

Arrays are always laid out ``(C, X, Y, Z)``. Image payloads are float32 and
mask payloads uint8 so that a write/read cycle is bit-exact.

File format: the payload file holds raw little-endian values in C-order.
A text sidecar ``<payload>.hdr`` holds ``key: value`` lines::

    format: msam-volume
    dtype: float32
    axis_order: C,X,Y,Z
    byte_order: little
    extents: 1,8,8,8
    spacing: 1.0,1.0,1.0
    crc32: 0x1a2b3c4d
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from msam.errors import (
    ChecksumMismatch,
    ConfigOutOfRange,
    CorruptHeader,
    MissingFile,
    NonFiniteData,
    ShapeMismatch,
    UnwritablePath,
)

AXIS_ORDER = "C,X,Y,Z"
ZSCORE_EPS = 1e-8

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


@dataclass
class Volume3D:
    """Dense image grid of shape ``(C, X, Y, Z)`` stored as float32."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ShapeMismatch(f"volume must be 4-D (C,X,Y,Z) with extents >= 1, got {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteData(f"{int((~np.isfinite(data)).sum())} non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ConfigOutOfRange(f"spacing must be three positive reals, got {self.spacing}")
        self.data = data
        self.spacing = spacing

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class MaskVolume:
    """Binary label grid of shape ``(C, X, Y, Z)`` stored as uint8."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 4 or min(labels.shape) < 1:
            raise ShapeMismatch(f"mask must be 4-D (C,X,Y,Z) with extents >= 1, got {labels.shape}")
        if labels.dtype == bool:
            labels = labels.astype(np.uint8)
        elif not np.isin(labels, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.labels = np.ascontiguousarray(labels, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @classmethod
    def zeros_like(cls, v: Volume3D) -> "MaskVolume":
        return cls(np.zeros(v.shape, dtype=np.uint8), v.spacing)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.labels.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.labels.shape[1:]

    def foreground_fraction(self) -> float:
        return float(self.labels.mean())


@dataclass(frozen=True)
class VolumeHeader:
    dtype: str
    extents: tuple[int, ...]
    spacing: tuple[float, float, float]
    crc32: int
    axis_order: str = AXIS_ORDER

    def to_text(self) -> str:
        lines = [
            "format: msam-volume",
            f"dtype: {self.dtype}",
            f"axis_order: {self.axis_order}",
            "byte_order: little",
            "extents: " + ",".join(str(e) for e in self.extents),
            "spacing: " + ",".join(repr(s) for s in self.spacing),
            f"crc32: 0x{self.crc32:08x}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "VolumeHeader":
        fields: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise CorruptHeader(f"malformed header line {raw!r}")
            fields[key.strip()] = value.strip()
        try:
            if fields.get("format") != "msam-volume":
                raise CorruptHeader(f"unknown format {fields.get('format')!r}")
            if fields["axis_order"] != AXIS_ORDER:
                raise CorruptHeader(f"axis order must be {AXIS_ORDER}, got {fields['axis_order']!r}")
            if fields.get("byte_order", "little") != "little":
                raise CorruptHeader("only little-endian payloads are supported")
            dtype = fields["dtype"]
            if dtype not in _DTYPES:
                raise CorruptHeader(f"unsupported dtype {dtype!r}")
            extents = tuple(int(e) for e in fields["extents"].split(","))
            spacing = tuple(float(s) for s in fields["spacing"].split(","))
            crc = int(fields["crc32"], 16)
        except KeyError as exc:
            raise CorruptHeader(f"missing header key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise CorruptHeader(str(exc)) from None
        if len(extents) != 4 or min(extents) < 1 or len(spacing) != 3:
            raise CorruptHeader(f"bad extents {extents} or spacing {spacing}")
        return cls(dtype=dtype, extents=extents, spacing=spacing, crc32=crc)


def header_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".hdr")


def _write(array: np.ndarray, dtype: str, spacing, path: str | Path) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes(order="C")
    header = VolumeHeader(
        dtype=dtype,
        extents=tuple(int(e) for e in array.shape),
        spacing=tuple(float(s) for s in spacing),
        crc32=zlib.crc32(payload),
    )
    try:
        path.write_bytes(payload)
        header_path(path).write_text(header.to_text())
    except OSError as exc:
        raise UnwritablePath(f"cannot write {path}: {exc}") from exc


def _read(path: str | Path) -> tuple[np.ndarray, VolumeHeader]:
    path = Path(path)
    hdr = header_path(path)
    for p in (path, hdr):
        if not p.is_file():
            raise MissingFile(str(p))
    header = VolumeHeader.parse(hdr.read_text())
    payload = path.read_bytes()
    dt = _DTYPES[header.dtype]
    expected = math.prod(header.extents) * dt.itemsize
    if len(payload) != expected:
        raise CorruptHeader(f"payload is {len(payload)} bytes, header implies {expected}")
    if zlib.crc32(payload) != header.crc32:
        raise ChecksumMismatch(f"{path}: crc32 0x{zlib.crc32(payload):08x} != 0x{header.crc32:08x}")
    array = np.frombuffer(payload, dtype=dt).reshape(header.extents)
    return array.astype(dt.newbyteorder("="), copy=True), header


def write_volume(v: Volume3D | MaskVolume, path: str | Path) -> None:
    """Write an image (float32) or mask (uint8) plus its ``.hdr`` sidecar."""
    if isinstance(v, MaskVolume):
        _write(v.labels, "uint8", v.spacing, path)
    else:
        _write(v.data, "float32", v.spacing, path)


def read_volume(path: str | Path) -> Volume3D:
    array, header = _read(path)
    if header.dtype != "float32":
        raise CorruptHeader(f"{path} holds a {header.dtype} mask, not an image")
    if not np.isfinite(array).all():
        raise NonFiniteData(f"{path}: {int((~np.isfinite(array)).sum())} non-finite voxels")
    return Volume3D(array, header.spacing)


def read_mask(path: str | Path) -> MaskVolume:
    array, header = _read(path)
    if header.dtype != "uint8":
        raise CorruptHeader(f"{path} holds a {header.dtype} image, not a mask")
    if not np.isin(array, (0, 1)).all():
        raise CorruptHeader(f"{path}: mask values outside {{0, 1}}")
    return MaskVolume(array, header.spacing)


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


def _crop_or_pad_array(array: np.ndarray, target: Sequence[int]) -> np.ndarray:
    out = array
    for axis, want in zip((1, 2, 3), target):
        have = out.shape[axis]
        if have > want:
            start = (have - want) // 2
            out = np.take(out, np.arange(start, start + want), axis=axis)
        elif have < want:
            deficit = want - have
            widths = [(0, 0)] * 4
            widths[axis] = (deficit // 2, deficit - deficit // 2)
            out = np.pad(out, widths, mode="constant", constant_values=0)
    return np.ascontiguousarray(out)


def crop_or_pad(v, target: Sequence[int]):
    """Center-crop or symmetrically zero-pad each spatial axis to ``target``.

    A deficit ``d`` pads ``d // 2`` leading and ``d - d // 2`` trailing planes;
    an excess is cropped starting at ``(in - target) // 2``. Works for both
    :class:`Volume3D` and :class:`MaskVolume`.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ConfigOutOfRange(f"target extents must be three integers >= 1, got {target}")
    if isinstance(v, MaskVolume):
        return MaskVolume(_crop_or_pad_array(v.labels, target), v.spacing)
    return Volume3D(_crop_or_pad_array(v.data, target), v.spacing)


def zscore_normalize(v: Volume3D, eps: float = ZSCORE_EPS) -> Volume3D:
    """Per-channel standardization over all voxels (population std).

    Channels whose std falls below ``eps`` are set to zero.
    """
    data = v.data.astype(np.float64)
    out = np.empty_like(data)
    for c in range(data.shape[0]):
        channel = data[c]
        mean = channel.mean()
        std = channel.std()
        if std < eps:
            out[c] = 0.0
        else:
            out[c] = (channel - mean) / std
    return Volume3D(out.astype(np.float32), v.spacing)


def flip_axes(v: Volume3D, m: MaskVolume, flips: Sequence[bool]) -> tuple[Volume3D, MaskVolume]:
    """Reverse the spatial axes selected by ``flips`` (X, Y, Z) in both arrays."""
    if v.shape != m.shape:
        raise ShapeMismatch(f"image {v.shape} and mask {m.shape} differ")
    axes = tuple(ax for ax, f in zip((1, 2, 3), flips) if f)
    if not axes:
        return Volume3D(v.data.copy(), v.spacing), MaskVolume(m.labels.copy(), m.spacing)
    return (
        Volume3D(np.flip(v.data, axis=axes).copy(), v.spacing),
        MaskVolume(np.flip(m.labels, axis=axes).copy(), m.spacing),
    )


def random_flip(v: Volume3D, m: MaskVolume, rng: np.random.Generator) -> tuple[Volume3D, MaskVolume]:
    """Flip each spatial axis independently with probability 1/2."""
    if v.shape != m.shape:
        raise ShapeMismatch(f"image {v.shape} and mask {m.shape} differ")
    flips = rng.random(3) < 0.5
    return flip_axes(v, m, flips)


def preprocess(v: Volume3D, m: MaskVolume | None, size: int):
    """Crop-or-pad to ``size``³ and z-score the image (the evaluation transform)."""
    target = (size, size, size)
    v = zscore_normalize(crop_or_pad(v, target))
    if m is not None:
        m = crop_or_pad(m, target)
    return v, m


# --------------------------------------------------------------------------
# Synthetic phantoms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]


@dataclass
class PhantomConfig:
    """Configuration for :func:`generate_phantom`.

    Either give explicit ``lesions`` or let ``n_lesions`` ellipsoids be drawn
    with radii in ``radius_range`` (as fractions of the smallest extent).
    """

    size: tuple[int, int, int] = (32, 32, 32)
    n_lesions: int = 1
    lesions: tuple[Lesion, ...] | None = None
    radius_range: tuple[float, float] = (0.12, 0.22)
    lesion_offset: float = 1.0
    noise_sigma: float = 0.05
    channels: int = 1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    min_fraction: float = 0.001
    max_fraction: float = 0.2

    def validate(self) -> None:
        if len(self.size) != 3 or min(self.size) < 8:
            raise ConfigOutOfRange(f"phantom extents must be >= 8 per axis, got {self.size}")
        count = len(self.lesions) if self.lesions is not None else self.n_lesions
        if not 1 <= count <= 4:
            raise ConfigOutOfRange(f"lesion count must be in [1, 4], got {count}")
        if self.channels < 1:
            raise ConfigOutOfRange("channels must be >= 1")


def ellipsoid_mask(shape: Sequence[int], lesion: Lesion) -> np.ndarray:
    """Voxels ``x`` with ``sum(((x - c) / r)**2) <= 1``; a zero radius pins that axis to ``c``."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    inside = np.ones(tuple(shape), dtype=bool)
    total = np.zeros(tuple(shape), dtype=np.float64)
    for g, c, r in zip(grids, lesion.center, lesion.radii):
        if r == 0:
            inside = inside & (g == c)
        else:
            total = total + ((g - c) / r) ** 2
    return inside & (total <= 1.0)


def _smooth_background(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    coords = np.meshgrid(*(np.linspace(0.0, 1.0, n) for n in shape), indexing="ij")
    ramp = sum(d * c for d, c in zip(direction, coords))
    lo, hi = ramp.min(), ramp.max()
    return (ramp - lo) / (hi - lo) if hi > lo else np.zeros(tuple(shape))


def _random_lesions(cfg: PhantomConfig, rng: np.random.Generator) -> tuple[Lesion, ...]:
    edge = min(cfg.size)
    lo, hi = cfg.radius_range
    lesions = []
    for _ in range(cfg.n_lesions):
        radii = tuple(float(rng.uniform(lo * edge, hi * edge)) for _ in range(3))
        center = tuple(
            float(rng.integers(math.ceil(r), n - math.ceil(r))) for r, n in zip(radii, cfg.size)
        )
        lesions.append(Lesion(center, radii))
    return tuple(lesions)


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator) -> tuple[Volume3D, MaskVolume]:
    """Smooth ramp background in [0, 1], ellipsoidal lesions raised by
    ``lesion_offset`` and additive Gaussian noise.

    Randomly drawn lesion sets are redrawn until the foreground fraction lies
    in ``[min_fraction, max_fraction]``; explicit lesions are used as given.
    """
    cfg.validate()
    shape = tuple(int(n) for n in cfg.size)
    if cfg.lesions is not None:
        lesions = cfg.lesions
        fg = np.zeros(shape, dtype=bool)
        for lesion in lesions:
            fg |= ellipsoid_mask(shape, lesion)
    else:
        for _ in range(100):
            lesions = _random_lesions(cfg, rng)
            fg = np.zeros(shape, dtype=bool)
            for lesion in lesions:
                fg |= ellipsoid_mask(shape, lesion)
            if cfg.min_fraction <= fg.mean() <= cfg.max_fraction:
                break
        else:
            raise ConfigOutOfRange("could not draw lesions within the foreground-fraction bounds")

    channels = []
    for _ in range(cfg.channels):
        image = _smooth_background(shape, rng) + cfg.lesion_offset * fg
        image = image + rng.normal(0.0, cfg.noise_sigma, size=shape)
        channels.append(image)
    data = np.stack(channels).astype(np.float32)
    labels = np.broadcast_to(fg, (cfg.channels, *shape)).astype(np.uint8)
    return Volume3D(data, cfg.spacing), MaskVolume(labels, cfg.spacing)


@dataclass
class ManifestEntry:
    volume: Path
    mask: Path
    foreground_fraction: float = float("nan")


MANIFEST_NAME = "manifest.tsv"


def write_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> None:
    path = Path(path)
    lines = ["volume\tmask\tforeground_fraction"]
    for e in entries:
        lines.append(f"{e.volume}\t{e.mask}\t{e.foreground_fraction:.6f}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise UnwritablePath(f"cannot write {path}: {exc}") from exc


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a manifest file, or ``manifest.tsv`` inside a directory.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise MissingFile(str(path))
    rows = [line for line in path.read_text().splitlines() if line.strip()]
    entries = []
    for line in rows[1:]:
        cols = line.split("\t")
        if len(cols) < 2:
            raise CorruptHeader(f"{path}: malformed manifest row {line!r}")
        vol, msk = (Path(c) if Path(c).is_absolute() else path.parent / c for c in cols[:2])
        frac = float(cols[2]) if len(cols) > 2 else float("nan")
        entries.append(ManifestEntry(vol, msk, frac))
    return entries


def generate_phantom_set(
    count: int, size: int, seed: int, out_dir: str | Path, n_lesions: int | None = None
) -> list[ManifestEntry]:
    """Write ``count`` phantom volume/mask pairs and a manifest into ``out_dir``.

    Without ``n_lesions`` each phantom gets 1 or 2 lesions.
    """
    if count < 1:
        raise ConfigOutOfRange(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritablePath(f"cannot create {out_dir}: {exc}") from exc
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        k = n_lesions if n_lesions is not None else int(rng.integers(1, 3))
        v, m = generate_phantom(PhantomConfig(size=(size, size, size), n_lesions=k), rng)
        vol_name, mask_name = f"phantom_{i:04d}.vol", f"phantom_{i:04d}.mask"
        write_volume(v, out_dir / vol_name)
        write_volume(m, out_dir / mask_name)
        entries.append(ManifestEntry(Path(vol_name), Path(mask_name), m.foreground_fraction()))
    write_manifest(entries, out_dir / MANIFEST_NAME)
    return entries
