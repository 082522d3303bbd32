"""Line-delimited JSON manifests and 8-bit PNG image I/O.

A manifest row is one JSON object per line.  Dataset rows look like
``{"image_path": ..., "annotations": [{"class_id": int, "bbox": [xmin, ymin,
xmax, ymax]}, ...]}`` with pixel-coordinate boxes (xmax > xmin, ymax > ymin);
hazy corpora add ``hazy_path`` and ``beta``.  Rows that failed to build carry
an ``error`` field instead.
"""

import json
import os

import numpy as np
from PIL import Image


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
    return path


def read_manifest(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def validate_annotations(annotations):
    """Check the {class_id, bbox} schema; raises ValueError on bad rows."""
    for ann in annotations:
        if "class_id" not in ann or "bbox" not in ann:
            raise ValueError(f"annotation missing class_id/bbox: {ann}")
        cid = ann["class_id"]
        if not isinstance(cid, int) or cid < 0:
            raise ValueError(f"class_id must be a non-negative integer: {cid}")
        xmin, ymin, xmax, ymax = ann["bbox"]
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate bbox: {ann['bbox']}")


def save_image(path, image):
    """Save a float [0,1] HxWx3 array as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)
    return path


def load_image(path):
    """Load an 8-bit image file as float32 HxWx3 in [0,1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def resolve_path(manifest_path, rel):
    """Manifest-relative paths resolve against the manifest's directory."""
    if os.path.isabs(rel):
        return rel
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), rel)
