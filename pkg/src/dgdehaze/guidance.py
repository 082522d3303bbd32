"""Detection-derived guidance masks.

Detector predictions are rasterized into a single-channel mask: pixels inside
a predicted box take (class_id + 1) * score, pixels covered by nothing stay
zero.  Where boxes overlap, the detection with the highest score wins
(tie-break: larger class_id).  A pixel (i, j) counts as inside a box when its
center (j + 0.5, i + 0.5) lies in [xmin, xmax) x [ymin, ymax).

Masks are normalized by the class count before entering the network so the
guidance magnitude is independent of how many classes the detector has, and
resampled to each injection level by exact area averaging.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass
class GuidanceMask:
    values: np.ndarray  # HxW float32, >= 0
    num_classes: int

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def _pixel_span(lo, hi, size):
    """Index range [start, stop) of pixels whose centers fall in [lo, hi)."""
    start = max(0, math.ceil(lo - 0.5))
    stop = min(size, math.ceil(hi - 0.5))
    return start, stop


def render_guidance(detections, height, width, num_classes):
    """Rasterize detections into a raw (unnormalized) guidance mask."""
    values = np.zeros((height, width), dtype=np.float32)
    for det in detections:
        if det.class_id >= num_classes:
            raise ValueError(
                f"class_id {det.class_id} out of range for {num_classes} classes")
    # Painting in ascending (score, class_id) order leaves the winning
    # detection's value on every overlap pixel.
    for det in sorted(detections, key=lambda d: (d.score, d.class_id)):
        xmin, ymin, xmax, ymax = det.bbox
        j0, j1 = _pixel_span(xmin, xmax, width)
        i0, i1 = _pixel_span(ymin, ymax, height)
        if i1 > i0 and j1 > j0:
            values[i0:i1, j0:j1] = np.float32((det.class_id + 1) * det.score)
    return GuidanceMask(values=values, num_classes=num_classes)


def normalize_guidance(mask):
    """Scale values by 1/num_classes so the network input lies in [0,1]."""
    return GuidanceMask(
        values=(mask.values / np.float32(mask.num_classes)).astype(np.float32),
        num_classes=mask.num_classes,
    )


def area_resample_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic matrix mapping n_in cells to n_out area averages.

    Output cell k spans [k*n_in/n_out, (k+1)*n_in/n_out) in input-cell units;
    its value is the overlap-weighted average of the input cells it covers.
    Exact identity when n_in == n_out, works in both directions.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("cell counts must be >= 1")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for k in range(n_out):
        lo = k * scale
        hi = (k + 1) * scale
        m0 = int(math.floor(lo))
        m1 = min(n_in, int(math.ceil(hi)))
        for m in range(m0, m1):
            overlap = min(hi, m + 1) - max(lo, m)
            if overlap > 0:
                mat[k, m] = overlap / scale
    return mat.astype(dtype)


def resample_guidance(mask, target_h, target_w):
    """Area-average resampling to an arbitrary resolution.

    Identity when dimensions already match; output values stay within the
    input range (every output cell is a convex combination of input cells)
    and the global mean is preserved exactly up to float error.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = mask.values.shape
    if (h, w) == (target_h, target_w):
        return GuidanceMask(values=mask.values.copy(), num_classes=mask.num_classes)
    rows = area_resample_matrix(h, target_h)
    cols = area_resample_matrix(w, target_w)
    out = rows @ mask.values.astype(np.float64) @ cols.T
    return GuidanceMask(values=out.astype(np.float32), num_classes=mask.num_classes)


MASK_SCALE = 65535


def save_mask_png(mask, path):
    """Store a normalized mask as 16-bit PNG, stored = round(value * 65535).

    A sidecar JSON records the scale convention so decoding is exact to
    1/65535.  Values must already be normalized into [0,1].
    """
    vals = mask.values
    if vals.min() < 0.0 or vals.max() > 1.0:
        raise ValueError("mask must be normalized to [0,1] before export")
    stored = np.round(vals.astype(np.float64) * MASK_SCALE).astype(np.uint16)
    Image.fromarray(stored, mode="I;16").save(path)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"scale": MASK_SCALE, "num_classes": mask.num_classes,
                   "normalized": True}, fh, sort_keys=True)
    return path


def load_mask_png(path):
    with Image.open(path) as img:
        stored = np.asarray(img, dtype=np.float64)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    values = (stored / meta["scale"]).astype(np.float32)
    return GuidanceMask(values=values, num_classes=meta["num_classes"])
