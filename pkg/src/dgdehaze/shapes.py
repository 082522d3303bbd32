"""Desk-scale synthetic detection corpus: colored shapes on textured gray.

Three classes — circle (0), square (1), triangle (2) — each with a
class-specific color family so the toy detection problem is separable by
construction.  Every scene contains 1..max_objects shapes, fully inside the
canvas, with limited mutual overlap.  Annotations are tight bounding boxes
measured from the rendered pixel support.  All values stay inside
[0.06, 0.94] so haze synthesis never saturates the [0,1] clamp.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import manifest as mio

CLASS_NAMES = ("circle", "square", "triangle")


@dataclass(frozen=True)
class ShapesSceneSpec:
    canvas_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_radius: float = 6.0
    max_radius: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.canvas_size < 16:
            raise ValueError("canvas_size must be >= 16")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.num_classes != 3:
            raise ValueError("the shapes corpus defines exactly 3 classes")


# Per-class color ranges (dominant channel first): circles red, squares
# green, triangles blue.
_COLOR_RANGES = (
    ((0.55, 0.9), (0.06, 0.30), (0.06, 0.30)),
    ((0.06, 0.30), (0.55, 0.9), (0.06, 0.30)),
    ((0.06, 0.30), (0.06, 0.30), (0.55, 0.9)),
)


def _shape_mask(class_id, cx, cy, r, size):
    """Boolean pixel mask; a pixel belongs iff its center is inside."""
    yy = np.arange(size, dtype=np.float64)[:, None] + 0.5
    xx = np.arange(size, dtype=np.float64)[None, :] + 0.5
    if class_id == 0:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if class_id == 1:
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    # Upward isoceles triangle with vertices (cx, cy-r), (cx-r, cy+r), (cx+r, cy+r).
    inside_base = yy <= cy + r
    # Left/right edges: from apex to base corners.
    left = (yy - (cy - r)) * (-r) - (xx - cx) * (2 * r) >= 0
    right = (yy - (cy - r)) * r - (xx - cx) * (2 * r) <= 0
    return inside_base & left & right


def analytic_bbox(class_id, cx, cy, r):
    """Exact continuous bounding box of the shape geometry."""
    return (cx - r, cy - r, cx + r, cy + r)


def _tight_bbox(mask):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def render_scene(spec, rng):
    """One scene: returns (image HxWx3 float32, annotations list)."""
    size = spec.canvas_size
    base = rng.uniform(0.25, 0.45)
    image = np.full((size, size, 3), base, dtype=np.float64)
    image += rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.06, 0.94)

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    annotations = []
    placed = []
    for _ in range(n_objects):
        for _attempt in range(30):
            class_id = int(rng.integers(0, spec.num_classes))
            r = float(rng.uniform(spec.min_radius, spec.max_radius))
            margin = r + 2.0
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            box = analytic_bbox(class_id, cx, cy, r)
            if any(_overlap(box, pb) > 0.25 for pb in placed):
                continue
            mask = _shape_mask(class_id, cx, cy, r, size)
            if not mask.any():
                continue
            color = np.array([rng.uniform(*_COLOR_RANGES[class_id][c])
                              for c in range(3)])
            image[mask] = color
            annotations.append({"class_id": class_id,
                                "bbox": list(_tight_bbox(mask))})
            placed.append(box)
            break
    return np.clip(image, 0.06, 0.94).astype(np.float32), annotations


def _overlap(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / min(area_a, area_b)


def make_shapes_dataset(spec, n_images, out_dir):
    """Write ``n_images`` scenes + manifest; deterministic per spec.seed.

    Retries any scene that ends up empty so every image has >= 1 object.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    records = []
    for idx in range(n_images):
        image, annotations = render_scene(spec, rng)
        while not annotations:
            image, annotations = render_scene(spec, rng)
        path = os.path.join(out_dir, f"clean_{idx:05d}.png")
        mio.save_image(path, image)
        records.append({"image_path": os.path.abspath(path),
                        "annotations": annotations})
    return mio.write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
