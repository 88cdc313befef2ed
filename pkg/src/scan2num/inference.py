"""Preparing scans for the network and running deterministic inference."""
import numpy as np

from scan2num.data import INFERENCE_OFFSET, crop_to_mask_bbox, load_entry, load_volume, sample_slices
from scan2num.errors import DataError


class PreparedCase:
    """A cropped volume held in memory plus its scalar target."""

    __slots__ = ("case_id", "volume", "target")

    def __init__(self, case_id, volume, target):
        self.case_id = case_id
        self.volume = volume
        self.target = target

    def stack(self, n, input_size, offset=INFERENCE_OFFSET):
        return sample_slices(self.volume, n, offset, input_size)


def prepare_entries(entries, target=None):
    """Load and crop every manifest entry; error on missing target labels."""
    out = []
    for e in entries:
        t = np.nan
        if target is not None:
            t = e.labels.get(target)
            if np.isnan(t):
                raise DataError(f"{e.case_id}: no {target} label")
        out.append(PreparedCase(e.case_id, crop_to_mask_bbox(load_entry(e)), float(t)))
    return out


def prepare_volume(path):
    return crop_to_mask_bbox(load_volume(path))


def predict_cases(net, cases, chunk=16):
    """Scores and per-slice responses, offset 0.5, no augmentation or dropout."""
    cfg = net.config
    scores, per_slice = [], []
    for start in range(0, len(cases), chunk):
        part = cases[start:start + chunk]
        stacks = np.stack([c.stack(cfg.num_slices, cfg.input_size).slices for c in part])
        s, p = net.forward(stacks, training=False)
        scores.append(s)
        per_slice.append(p)
    if not scores:
        return np.zeros(0), np.zeros((0, cfg.num_slices))
    return np.concatenate(scores).astype(np.float64), np.concatenate(per_slice).astype(np.float64)


def attribute(net, volume):
    """Per-slice responses of a volume, plus where each slice sits in z.

    Returns ``(score, rows)`` with rows of ``(slice_index, z_mm, response)``.
    Dropout is off, so the score is exactly the mean of the responses.
    """
    cfg = net.config
    cropped = crop_to_mask_bbox(volume)
    stack = sample_slices(cropped, cfg.num_slices, INFERENCE_OFFSET, cfg.input_size)
    pred = net.predict(stack.slices)
    z0, dz = cropped.origin[0], cropped.spacing_mm[0]
    rows = [(i, float((z0 + z) * dz), float(r))
            for i, (z, r) in enumerate(zip(stack.source_indices, pred.per_slice))]
    return pred.score, rows
