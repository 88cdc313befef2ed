"""Synthetic lung phantoms with planted low-attenuation lesions.

A phantom is an ellipsoidal lung (noisy parenchyma around -850 HU) in a
0 HU background, with spherical lesions at a constant -980 HU.  Labels are
deterministic or noisy functions of the exact lesion share of the lung.
"""
import os
from dataclasses import dataclass, field, replace

import numpy as np

from scan2num.data import ManifestEntry, ScanLabels, Volume, save_volume, stratified_split, write_manifest
from scan2num.seeding import derive_rng

MAX_LESION_SHARE = 0.5


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    semi_axes: tuple = (28.0, 26.0, 28.0)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    parenchyma_hu_mean: float = -850.0
    parenchyma_hu_noise_sd: float = 40.0
    lesion_hu: float = -980.0
    severity: float = 0.0
    lesion_radius_range: tuple = (2.0, 5.0)
    seed: int = 0
    # explicit ((z, y, x), radius) lesions; when given, severity is ignored
    lesions: tuple = ()

    def __post_init__(self):
        if not self.lesion_hu < -950 < self.parenchyma_hu_mean:
            raise ValueError("need lesion_hu < -950 < parenchyma_hu_mean")
        if not 0 <= self.severity <= 1:
            raise ValueError("severity must be in [0, 1]")
        for d, a in zip(self.dims, self.semi_axes):
            if a <= 0 or 2 * a > d:
                raise ValueError(f"ellipsoid semi-axis {a} does not fit in dimension {d}")


@dataclass
class PhantomCase:
    volume: Volume
    labels: ScanLabels
    planted_fraction: float
    lesion_centers: list = field(default_factory=list)


def lung_mask(dims, semi_axes):
    centre = [(d - 1) / 2.0 for d in dims]
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, semi_axes))
    return r2 <= 1.0


def _paint_sphere(lesion, mask, centre, radius):
    lo = [max(0, int(np.floor(c - radius))) for c in centre]
    hi = [min(d, int(np.ceil(c + radius)) + 1) for c, d in zip(centre, mask.shape)]
    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    ball = (zz - centre[0]) ** 2 + (yy - centre[1]) ** 2 + (xx - centre[2]) ** 2 <= radius ** 2
    box = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
    new = ball & mask[box] & ~lesion[box]
    lesion[box] |= new
    return int(new.sum())


def label_model(planted_fraction, rng):
    pf = planted_fraction
    eps1 = rng.normal(0.0, 0.02)
    eps2 = rng.normal(0.0, 4.0)
    return ScanLabels(
        ve=5.0 * min(1.0, pf / 0.4),
        fev1_fvc=float(np.clip(0.85 - 0.55 * pf / 0.5 + eps1, 0.2, 0.95)),
        fev1pct=float(np.clip(105.0 - 140.0 * pf / 0.5 + eps2, 15.0, 130.0)),
    )


def generate_phantom(spec, max_lesions=100_000):
    rng = np.random.default_rng(spec.seed)
    mask = lung_mask(spec.dims, spec.semi_axes)
    n_lung = int(mask.sum())
    hu = np.zeros(spec.dims, dtype=np.float64)
    noise = rng.normal(spec.parenchyma_hu_mean, spec.parenchyma_hu_noise_sd, size=n_lung)
    hu[mask] = noise
    lesion = np.zeros(spec.dims, dtype=bool)
    centres = []
    if spec.lesions:
        for centre, radius in spec.lesions:
            _paint_sphere(lesion, mask, centre, radius)
            centres.append(tuple(centre))
    else:
        target = spec.severity * MAX_LESION_SHARE * n_lung
        lung_idx = np.flatnonzero(mask)
        count = 0
        rmin, rmax = spec.lesion_radius_range
        while count < target:
            if len(centres) >= max_lesions:
                raise ValueError(f"severity {spec.severity} unreachable after {max_lesions} lesions")
            centre = np.unravel_index(lung_idx[rng.integers(lung_idx.size)], spec.dims)
            count += _paint_sphere(lesion, mask, centre, rng.uniform(rmin, rmax))
            centres.append(tuple(int(c) for c in centre))
    hu[lesion] = spec.lesion_hu
    voxels = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
    planted = float(lesion.sum()) / n_lung
    volume = Volume(voxels, mask.astype(np.uint8), tuple(spec.spacing_mm))
    return PhantomCase(volume, label_model(planted, rng), planted, centres)


def generate_dataset(out_dir, count, seed=0, severity_range=(0.0, 1.0), template=None,
                     fractions=(0.7, 0.15, 0.15), manifest_name="manifest.csv"):
    """Write ``count`` phantoms plus a stratified manifest into ``out_dir``.

    Case ``i`` draws its severity and geometry seed from (seed, i), so any
    case can be regenerated on its own.  Returns ``(manifest path, entries,
    cases)`` where ``cases`` holds planted fractions per case id.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    template = template or PhantomSpec()
    os.makedirs(out_dir, exist_ok=True)
    entries, planted = [], {}
    for i in range(count):
        rng = derive_rng(seed, "phantom", i)
        severity = float(rng.uniform(*severity_range)) if severity_range[1] > severity_range[0] \
            else float(severity_range[0])
        spec = replace(template, severity=severity, seed=int(rng.integers(2**31)))
        case = generate_phantom(spec)
        header = os.path.join(out_dir, f"case_{i:04d}.json")
        save_volume(header, case.volume)
        entries.append(ManifestEntry(header, header[:-5] + ".mask", case.labels))
        planted[f"case_{i:04d}"] = case.planted_fraction
    tags = stratified_split(entries, fractions, lambda e: int(np.floor(e.labels.ve + 0.5)),
                            derive_rng(seed, "split"), bins=range(6))
    for e, t in zip(entries, tags):
        e.split = t
    path = os.path.join(out_dir, manifest_name)
    write_manifest(path, entries)
    return path, entries, planted
