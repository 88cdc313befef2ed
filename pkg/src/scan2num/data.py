"""Volumes, manifests, cropping, intensity normalization, slice sampling, augmentation."""
import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from scan2num.errors import DataError
from scan2num.kernels import resample_stack, rotate_stack

HU_MIN = -1100.0
HU_MAX = 300.0
INFERENCE_OFFSET = 0.5
SPLITS = ("train", "valid", "test")
TARGETS = ("ve", "fev1_fvc", "fev1pct")


@dataclass
class Volume:
    """HU voxels (z, y, x) int16 with a same-shape binary lung mask.

    ``origin`` is the voxel offset of this grid inside the volume it was
    cropped from (zeros for an uncropped volume).
    """

    voxels: np.ndarray
    mask: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0, 0, 0)

    def __post_init__(self):
        if self.voxels.shape != self.mask.shape or self.voxels.ndim != 3:
            raise ValueError(f"voxels {self.voxels.shape} and mask {self.mask.shape} must be equal 3-D shapes")

    @property
    def dims(self):
        return tuple(self.voxels.shape)


@dataclass
class SliceStack:
    slices: np.ndarray            # (n, S, S) float32 in [-1, 1]
    source_indices: np.ndarray    # z index of each slice in the (cropped) volume

    @property
    def n(self):
        return len(self.source_indices)


@dataclass(frozen=True)
class ScanLabels:
    ve: float = math.nan
    fev1_fvc: float = math.nan
    fev1pct: float = math.nan

    def get(self, target):
        if target not in TARGETS:
            raise DataError(f"unknown target {target!r}")
        return getattr(self, target)


@dataclass
class ManifestEntry:
    path: str
    mask: str
    labels: ScanLabels
    split: str = "train"

    @property
    def case_id(self):
        name = os.path.basename(self.path)
        return name[:-5] if name.endswith(".json") else os.path.splitext(name)[0]


# ------------------------------------------------------------------- I/O

def save_volume(header_path, volume):
    """Write ``<stem>.json`` + ``<stem>.i16`` voxels + ``<stem>.mask`` bytes."""
    header_path = os.fspath(header_path)
    base = header_path[:-5] if header_path.endswith(".json") else header_path
    vox_name = os.path.basename(base) + ".i16"
    mask_name = os.path.basename(base) + ".mask"
    folder = os.path.dirname(header_path)
    header = {
        "dims": list(volume.dims),
        "spacing_mm": [float(s) for s in volume.spacing_mm],
        "dtype": "int16le",
        "voxels": vox_name,
        "mask": mask_name,
    }
    with open(os.path.join(folder, vox_name), "wb") as fh:
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes())
    with open(os.path.join(folder, mask_name), "wb") as fh:
        fh.write(np.ascontiguousarray(volume.mask != 0, dtype=np.uint8).tobytes())
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh)
        fh.write("\n")


def _read_payload(path, dtype, count, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} payload not found: {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise DataError(f"{path}: {what} payload has {data.size} values, header dims need {count}")
    return data


def load_volume(path, mask_path=None):
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("dtype", "int16le") != "int16le":
        raise DataError(f"{path}: unsupported dtype {header['dtype']!r}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"{path}: bad dims {dims}")
    folder = os.path.dirname(path)
    count = dims[0] * dims[1] * dims[2]
    vox = _read_payload(os.path.join(folder, header["voxels"]), "<i2", count, "voxel")
    if mask_path is None:
        if "mask" not in header:
            raise FileNotFoundError(f"{path}: header names no mask")
        mask_path = os.path.join(folder, header["mask"])
    mask = _read_payload(mask_path, np.uint8, count, "mask")
    return Volume(vox.astype(np.int16).reshape(dims), mask.reshape(dims),
                  tuple(float(s) for s in header.get("spacing_mm", (1.0, 1.0, 1.0))))


def _num(cell):
    return float(cell) if cell not in ("", None) else math.nan


def read_manifest(path):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "mask", "ve", "fev1_fvc", "fev1pct", "split"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            if row["split"] not in SPLITS:
                raise DataError(f"{path}: unknown split {row['split']!r}")
            entries.append(ManifestEntry(
                path=os.path.join(folder, row["path"]),
                mask=os.path.join(folder, row["mask"]) if row["mask"] else "",
                labels=ScanLabels(_num(row["ve"]), _num(row["fev1_fvc"]), _num(row["fev1pct"])),
                split=row["split"],
            ))
    return entries


def write_manifest(path, entries):
    folder = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "mask", "ve", "fev1_fvc", "fev1pct", "split"])
        for e in entries:
            lab = e.labels
            w.writerow([os.path.relpath(e.path, folder), os.path.relpath(e.mask, folder) if e.mask else "",
                        repr(lab.ve), repr(lab.fev1_fvc), repr(lab.fev1pct), e.split])


def load_entry(entry):
    return load_volume(entry.path, entry.mask or None)


# --------------------------------------------------------- preprocessing

def mask_bbox(mask):
    """Tight ``(lo, hi)`` bounds (hi exclusive) of nonzero voxels per axis."""
    box = []
    for axis in range(mask.ndim):
        other = tuple(a for a in range(mask.ndim) if a != axis)
        hit = np.flatnonzero(mask.any(axis=other))
        if hit.size == 0:
            raise DataError("mask is empty")
        box.append((int(hit[0]), int(hit[-1]) + 1))
    return box


def crop_to_mask_bbox(v):
    box = mask_bbox(v.mask)
    sl = tuple(slice(lo, hi) for lo, hi in box)
    origin = tuple(o + lo for o, (lo, _) in zip(v.origin, box))
    return replace(v, voxels=v.voxels[sl], mask=v.mask[sl], origin=origin)


def normalize_hu(hu, lo=HU_MIN, hi=HU_MAX):
    """Clamp to ``[lo, hi]`` HU and map linearly onto ``[-1, 1]``."""
    hu = np.clip(np.asarray(hu, dtype=np.float32), lo, hi)
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return ((hu - np.float32(mid)) / np.float32(half)).astype(np.float32)


def slice_indices(depth, n, offset):
    stride = depth / n
    idx = np.floor((np.arange(n) + offset) * stride).astype(np.int64)
    return np.clip(idx, 0, depth - 1)


def sample_slices(v, n, offset=INFERENCE_OFFSET, input_size=512):
    """Pick ``n`` regularly spaced axial slices and resample each to ``input_size``^2.

    Slice ``i`` comes from z = floor((i + offset) * Z / n), clamped to the
    volume.  In-plane, the full (y, x) extent is resampled bilinearly with
    corner alignment, then normalized.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = slice_indices(v.dims[0], n, offset)
    hu = resample_stack(v.voxels[idx].astype(np.float32), input_size)
    return SliceStack(normalize_hu(hu), idx)


def mirror(slices):
    return np.ascontiguousarray(slices[..., ::-1])


def rotate(slices, angles_deg, fill=-1.0):
    """Rotate each slice about its center by its angle (bilinear, ``fill`` outside)."""
    return rotate_stack(slices, np.deg2rad(np.asarray(angles_deg, dtype=np.float64)), fill)


def augment(stack, rng, mirror_prob=0.5, max_angle_deg=45.0):
    """Random left-right mirror (one coin per stack) and per-slice rotation."""
    flip = rng.random() < mirror_prob
    angles = rng.uniform(-max_angle_deg, max_angle_deg, size=stack.n)
    slices = mirror(stack.slices) if flip else stack.slices
    return SliceStack(rotate(slices, angles), stack.source_indices.copy())


# ----------------------------------------------------------------- split

def _apportion(quota):
    base = np.floor(quota).astype(np.int64)
    left = int(round(quota.sum() - base.sum()))
    order = sorted(range(len(quota)), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def stratified_split(cases, fractions, strata, rng, names=SPLITS, bins=None):
    """Assign a split name to every case, stratum by stratum.

    Each stratum (``strata(case)`` key, visited in sorted order) is shuffled
    and apportioned by largest remainder.  Rounding residue carries over to
    the next stratum so overall split sizes also match ``fractions`` to
    within one case.  Keys listed in ``bins`` but absent produce a warning.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-9 or len(fractions) != len(names):
        raise ValueError("fractions must sum to 1 and match split names")
    groups = {}
    for i, c in enumerate(cases):
        groups.setdefault(strata(c), []).append(i)
    for key in bins or ():
        if key not in groups:
            warnings.warn(f"stratum {key!r} is empty", stacklevel=2)
    tags = [None] * len(cases)
    carry = np.zeros(len(fractions))
    for key in sorted(groups):
        members = groups[key]
        quota = fractions * len(members) + carry
        counts = _apportion(np.clip(quota, 0, None))
        # clipping can leave the total off by one; fix on the largest split
        counts[np.argmax(counts)] += len(members) - counts.sum()
        carry = quota - counts
        order = rng.permutation(len(members))
        pos = 0
        for split, cnt in zip(names, counts):
            for j in order[pos:pos + cnt]:
                tags[members[j]] = split
            pos += cnt
    return tags


def split_entries(entries, split):
    return [e for e in entries if e.split == split]
