"""Volume/segmentation data model, MetaImage-style file I/O, and preprocessing.

Arrays are indexed ``[x, y, z]`` so ``data.shape`` matches the ``DimSize``
header entry. Raw payloads on disk are little-endian with x varying fastest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

_ELEMENT_TYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_UCHAR": np.dtype("u1"),
}

DEFAULT_TORSO_THRESHOLD = -0.75


def _as_triple(value, name):
    t = tuple(float(v) for v in np.atleast_1d(value))
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 entries, got {value!r}")
    return t


@dataclass
class Volume:
    """Scalar 3D image grid with spacing/origin metadata (millimeters)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        self.spacing = _as_triple(self.spacing, "spacing")
        self.origin = _as_triple(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing, self.origin)


@dataclass
class Segmentation:
    """Multi-label 3D grid aligned with a companion :class:`Volume`.

    Label 0 is background; ``label_names`` must name the contiguous id range
    ``0..K`` even when some label is absent from ``labels``.
    """

    labels: np.ndarray
    label_names: dict = field(default_factory=dict)
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integer, got dtype {self.labels.dtype}")
        self.spacing = _as_triple(self.spacing, "spacing")
        self.origin = _as_triple(self.origin, "origin")
        if not self.label_names:
            self.label_names = {i: f"label_{i}" for i in range(int(self.labels.max()) + 1)}
            self.label_names[0] = "background"
        keys = sorted(self.label_names)
        if keys != list(range(len(keys))):
            raise ValueError(f"label ids must be contiguous from 0, got {keys}")
        if int(self.labels.min()) < 0 or int(self.labels.max()) >= len(keys):
            raise ValueError("labels outside the range covered by label_names")

    @property
    def dims(self):
        return self.labels.shape

    @property
    def num_labels(self):
        """Number of label ids including background."""
        return len(self.label_names)

    def foreground(self) -> np.ndarray:
        return self.labels > 0

    def copy(self) -> "Segmentation":
        return Segmentation(self.labels.copy(), dict(self.label_names), self.spacing, self.origin)


@dataclass
class Mask:
    """Boolean 3D mask matching a companion Volume's grid."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool)
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {self.data.shape}")

    @property
    def dims(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# MetaImage-style I/O


def _parse_header(path):
    header = {}
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: malformed header line {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            header[key] = value
    for key in ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile"):
        if key not in header:
            raise ValueError(f"{path}: missing header key {key}")
    if header["NDims"] != "3":
        raise ValueError(f"{path}: only NDims = 3 supported, got {header['NDims']}")
    return header


def _read_payload(path, header):
    etype = header["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise ValueError(f"{path}: unsupported element type {etype}")
    dtype = _ELEMENT_TYPES[etype]
    dims = tuple(int(v) for v in header["DimSize"].split())
    channels = int(header.get("ElementNumberOfChannels", "1"))
    raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), header["ElementDataFile"])
    if not os.path.exists(raw_path):
        raise FileNotFoundError(f"payload file not found: {raw_path}")
    raw = np.fromfile(raw_path, dtype=dtype)
    expected = int(np.prod(dims)) * channels
    if raw.size != expected:
        raise ValueError(
            f"{path}: payload size mismatch (expected {expected} elements, got {raw.size})"
        )
    # x-fastest on disk: reshape as (z, y, x[, channels]) then transpose to [x, y, z].
    if channels == 1:
        arr = raw.reshape(dims[::-1]).transpose(2, 1, 0)
    else:
        arr = raw.reshape(dims[::-1] + (channels,)).transpose(3, 2, 1, 0)
    spacing = tuple(float(v) for v in header["ElementSpacing"].split())
    origin = tuple(float(v) for v in header.get("Offset", "0 0 0").split())
    return np.ascontiguousarray(arr), spacing, origin


def _write_mhd(path, arr, spacing, origin, element_type, channels=1):
    if arr.ndim not in (3, 4) or min(arr.shape) < 1:
        raise ValueError(f"cannot write array of shape {arr.shape}: zero-sized or wrong rank")
    dims = arr.shape[-3:]
    stem = os.path.splitext(os.path.basename(path))[0]
    raw_name = stem + ".raw"
    lines = [
        "NDims = 3",
        "DimSize = {} {} {}".format(*dims),
        "ElementSpacing = {:g} {:g} {:g}".format(*spacing),
        "Offset = {:g} {:g} {:g}".format(*origin),
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines.append(f"ElementType = {element_type}")
    lines.append(f"ElementDataFile = {raw_name}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if channels == 1:
        payload = np.ascontiguousarray(arr.transpose(2, 1, 0))
    else:
        payload = np.ascontiguousarray(arr.transpose(3, 2, 1, 0))
    payload.astype(_ELEMENT_TYPES[element_type]).tofile(
        os.path.join(os.path.dirname(os.path.abspath(path)), raw_name)
    )


def load_volume(path) -> Volume:
    """Load a Volume from a MetaImage-style header + raw payload pair."""
    header = _parse_header(path)
    if int(header.get("ElementNumberOfChannels", "1")) != 1:
        raise ValueError(f"{path}: multi-channel file is not a scalar volume")
    arr, spacing, origin = _read_payload(path, header)
    return Volume(arr, spacing, origin)


def save_volume(vol: Volume, path):
    """Write a Volume as MET_FLOAT; round-trips bit-exactly for float32 data."""
    _write_mhd(path, vol.data.astype("<f4", copy=False), vol.spacing, vol.origin, "MET_FLOAT")


def _sidecar_path(path):
    return os.path.splitext(str(path))[0] + ".labels"


def load_segmentation(path) -> Segmentation:
    """Load a Segmentation (MET_UCHAR payload plus an id=name sidecar)."""
    header = _parse_header(path)
    arr, spacing, origin = _read_payload(path, header)
    names = {}
    sidecar = _sidecar_path(path)
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                key, name = line.split("=", 1)
                names[int(key)] = name.strip()
    return Segmentation(arr.astype(np.uint8), names, spacing, origin)


def save_segmentation(seg: Segmentation, path):
    _write_mhd(path, seg.labels.astype("u1"), seg.spacing, seg.origin, "MET_UCHAR")
    with open(_sidecar_path(path), "w") as fh:
        for key in sorted(seg.label_names):
            fh.write(f"{key}={seg.label_names[key]}\n")


# ---------------------------------------------------------------------------
# Preprocessing


def resample_isotropic(vol: Volume, target_spacing: float) -> Volume:
    """Resample to an isotropic grid of `target_spacing` mm via trilinear interpolation.

    Output dims are the input physical extent divided by the target spacing,
    rounded to the nearest voxel (never below 1); the origin is preserved.
    """
    if target_spacing <= 0:
        raise ValueError(f"target_spacing must be positive, got {target_spacing}")
    t = float(target_spacing)
    if all(abs(s - t) < 1e-12 for s in vol.spacing):
        return vol.copy()
    new_dims = tuple(
        max(1, int(round(d * s / t))) for d, s in zip(vol.dims, vol.spacing)
    )
    # Output voxel i sits at physical origin + i*t; map to input voxel coordinates.
    coords = np.meshgrid(
        *[np.arange(n) * t / s for n, s in zip(new_dims, vol.spacing)], indexing="ij"
    )
    data = ndimage.map_coordinates(
        vol.data.astype(np.float64), np.stack(coords), order=1, mode="nearest"
    )
    return Volume(data.astype(vol.data.dtype, copy=False), (t, t, t), vol.origin)


def rescale_intensity(vol: Volume, lo: float = -1.0, hi: float = 1.0) -> Volume:
    """Map intensities linearly so min -> lo and max -> hi.

    Constant volumes map to the range midpoint.
    """
    if hi <= lo:
        raise ValueError(f"need hi > lo, got [{lo}, {hi}]")
    data = vol.data.astype(np.float64)
    if not np.isfinite(data).all():
        raise ValueError("volume contains non-finite values")
    vmin, vmax = data.min(), data.max()
    if vmax == vmin:
        out = np.full_like(data, 0.5 * (lo + hi))
    else:
        out = lo + (data - vmin) * ((hi - lo) / (vmax - vmin))
    return Volume(out.astype(np.float32), vol.spacing, vol.origin)


def torso_mask(vol: Volume, threshold: float = DEFAULT_TORSO_THRESHOLD) -> Mask:
    """Body mask: largest 6-connected component above `threshold`, holes filled per axial slice.

    Expects an intensity-scaled volume (the default threshold assumes [-1, 1]).
    """
    fg = vol.data > threshold
    if not fg.any():
        raise ValueError("no torso found: no voxels above threshold")
    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    labeled, n = ndimage.label(fg, structure=structure)
    sizes = ndimage.sum_labels(fg, labeled, index=np.arange(1, n + 1))
    mask = labeled == (1 + int(np.argmax(sizes)))
    for k in range(mask.shape[2]):  # axial = fixed z
        mask[:, :, k] = ndimage.binary_fill_holes(mask[:, :, k])
    return Mask(mask)
