"""Core volumetric data types and bit-exact file I/O.

A Volume is a dense 3D scalar grid with spacing metadata. Data is kept in
row-major (h, w, d) order: h slowest, d fastest. Every other module builds
on these types, so validation happens here, once, at construction time.

On-disk container (``.vvol``): bytes 0-3 magic ``VVOL``; bytes 4-7
little-endian u32 header length N; bytes 8..8+N a UTF-8 JSON object
``{dims:[H,W,D], spacing:[sx,sy,sz], dtype:"f32"|"u8", role:...}``;
remainder raw little-endian payload in row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VVOL"
ROLES = ("image", "mask", "logit", "pseudo_label")
_DTYPE_TAGS = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_TAG_FOR_DTYPE = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8"}


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class FormatError(ValueError):
    """Malformed or truncated .vvol container."""


class ConfigError(ValueError):
    """A configuration value is out of range or names an unknown option."""


@dataclass(frozen=True)
class Volume:
    """Immutable dense 3D scalar grid.

    Attributes:
        dims: (H, W, D) voxel counts.
        spacing: (sx, sy, sz) mm per voxel, strictly positive.
        data: array of shape (H, W, D); float32 or uint8.
        role: one of ROLES; drives value-range validation
            (mask -> values in {0, 1}; logit / pseudo_label -> [0, 1]).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    role: str = "image"

    def __post_init__(self):
        dims = tuple(int(x) for x in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(x <= 0 for x in dims):
            raise ValidationError(f"dims must be three positive ints, got {self.dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be strictly positive, got {self.spacing}")
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.uint8):
            raise ValidationError(f"dtype must be float32 or uint8, got {data.dtype}")
        if data.size != dims[0] * dims[1] * dims[2]:
            raise ValidationError(
                f"data length {data.size} does not match dims {dims} "
                f"({dims[0] * dims[1] * dims[2]} voxels)"
            )
        data = np.array(data, order="C", copy=True).reshape(dims)
        _check_values(data, self.role)
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0), role="image") -> "Volume":
        arr = np.asarray(arr)
        return cls(dims=arr.shape, spacing=spacing, data=arr, role=role)

    @property
    def dtype_tag(self) -> str:
        return _TAG_FOR_DTYPE[self.data.dtype]

    def with_data(self, arr, role=None) -> "Volume":
        """New Volume sharing dims/spacing, holding `arr`."""
        return Volume(dims=self.dims, spacing=self.spacing, data=np.asarray(arr),
                      role=self.role if role is None else role)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.role == other.role and self.data.dtype == other.data.dtype
                and bool(np.array_equal(self.data, other.data)))


def _check_values(data: np.ndarray, role: str) -> None:
    if role == "mask":
        bad = ~np.isin(data, (0, 1))
        if bad.any():
            raise ValidationError(
                f"mask volume contains non-binary value {data[bad].flat[0]!r}"
            )
    elif role in ("logit", "pseudo_label"):
        if data.dtype != np.float32:
            raise ValidationError(f"{role} volumes must be float32")
        if not ((data >= 0.0) & (data <= 1.0)).all():
            raise ValidationError(f"{role} volume has values outside [0, 1]")
    else:
        if data.dtype == np.float32 and not np.isfinite(data).all():
            raise ValidationError("image volume contains non-finite values")


@dataclass(frozen=True)
class PvaLabel:
    """Partial vessel annotation: a binary mask marking the labeled subset of
    the vasculature, plus diagnostic metadata.

    labeled_fraction is the fraction of ground-truth vessel voxels carrying a
    label; target_met records whether synthesis landed within tolerance of the
    requested fraction.
    """

    mask: Volume
    labeled_fraction: float
    target_met: bool = True

    def __post_init__(self):
        if self.mask.role != "mask":
            raise ValidationError("PvaLabel.mask must have role 'mask'")
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ValidationError(
                f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}"
            )
        if int(self.mask.data.sum()) == 0:
            raise ValidationError("PvaLabel must contain at least one labeled voxel")

    @property
    def indices(self) -> np.ndarray:
        """Flat indices of labeled voxels."""
        return np.flatnonzero(self.mask.data)


def flat_index(coord, dims) -> int:
    """Row-major flat index of (h, w, d): h*W*D + w*D + d."""
    h, w, d = coord
    _, W, D = dims
    return h * W * D + w * D + d


def unflatten_index(idx: int, dims) -> tuple[int, int, int]:
    _, W, D = dims
    h, rem = divmod(idx, W * D)
    w, d = divmod(rem, D)
    return h, w, d


def write_volume(v: Volume, path) -> None:
    """Write `v` to `path` in the .vvol container. Deterministic bytes."""
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": v.dtype_tag,
        "role": v.role,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(v.data, dtype=_DTYPE_TAGS[v.dtype_tag]).tobytes()
    blob = MAGIC + len(hjson).to_bytes(4, "little") + hjson + payload
    with open(path, "wb") as f:
        f.write(blob)


def read_volume(path) -> Volume:
    """Read a .vvol file; round-trips bit-exactly with write_volume."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a .vvol file (bad magic)")
    hlen = int.from_bytes(raw[4:8], "little")
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        dims = tuple(int(x) for x in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype_tag = header["dtype"]
        role = header["role"]
    except (KeyError, ValueError, TypeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e
    if dtype_tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {dtype_tag!r}")
    dt = _DTYPE_TAGS[dtype_tag]
    n = dims[0] * dims[1] * dims[2] if len(dims) == 3 else -1
    payload = raw[8 + hlen:]
    if n < 0 or len(payload) != n * dt.itemsize:
        raise FormatError(
            f"{path}: payload length {len(payload)} bytes does not match "
            f"dims {dims} and dtype {dtype_tag}"
        )
    data = np.frombuffer(payload, dtype=dt).astype(dt.base.newbyteorder("="))
    return Volume(dims=dims, spacing=spacing, data=data, role=role)


def binarize(v: Volume, threshold: float = 0.5) -> Volume:
    """Threshold a float volume in [0, 1] into a binary mask.

    Convention is strict: voxel = 1 iff value > threshold, so a value exactly
    at the threshold maps to 0.
    """
    if v.data.dtype != np.float32:
        raise ValidationError("binarize expects a float32 volume")
    if not ((v.data >= 0.0) & (v.data <= 1.0)).all():
        raise ValidationError("binarize expects values in [0, 1]")
    out = (v.data > np.float32(threshold)).astype(np.uint8)
    return Volume(dims=v.dims, spacing=v.spacing, data=out, role="mask")
