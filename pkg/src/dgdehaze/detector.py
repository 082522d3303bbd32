"""Single-scale anchor-free grid detector and the detection loss.

The detector contract the rest of the pipeline relies on is small: a frozen
detector maps an image to per-cell raw predictions, is deterministic for
fixed weights, and lets gradients flow to its input while its own parameters
never update.  ``GridDetector`` is the reference implementation: a stack of
strided convolutions (total stride 8) with a 1x1 head emitting, per cell,
one objectness logit, K class logits, and 4 box parameters.  Any external
detector can be plugged in behind the same surface by producing
``Detection`` records (``{"class_id": int, "score": float, "bbox": [xmin,
ymin, xmax, ymax]}`` in pixel coordinates) and, for the task-driven loss
path, a grid of raw predictions with gradients to the input image.

Box parameterization per cell (row i, col j):
    cx = (j + sigmoid(tx)) * stride      cy = (i + sigmoid(ty)) * stride
    w  = stride * exp(tw)                h  = stride * exp(th)

The detection loss combines localization (mean 1-IoU over positive cells),
confidence (binary cross-entropy over all cells, target 1 at each cell
containing a ground-truth center) and classification (cross-entropy at
positive cells), weighted by ``DetLossWeights``.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (load_checkpoint, module_checksum, save_checkpoint,
                         state_dict_to_arrays)
from . import manifest as mio


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    bbox: tuple  # (xmin, ymin, xmax, ymax) in pixels

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0,1], got {self.score}")
        xmin, ymin, xmax, ymax = self.bbox
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate bbox {self.bbox}")

    def to_json(self):
        return {"class_id": self.class_id, "score": self.score,
                "bbox": list(self.bbox)}


@dataclass(frozen=True)
class DetectionTarget:
    class_id: int
    bbox: tuple

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        xmin, ymin, xmax, ymax = self.bbox
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate bbox {self.bbox}")


@dataclass(frozen=True)
class DetLossWeights:
    lambda_box: float = 0.05
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5

    def __post_init__(self):
        if min(self.lambda_box, self.lambda_obj, self.lambda_cls) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class RawPrediction:
    """Per-cell raw outputs for one image.

    ``grid`` has shape (5 + num_classes, grid_h, grid_w): channel 0 is the
    objectness logit, channels 1..K are class logits, the last 4 are box
    parameters (tx, ty, tw, th).
    """

    grid: torch.Tensor
    stride: int
    num_classes: int

    @property
    def grid_h(self):
        return self.grid.shape[-2]

    @property
    def grid_w(self):
        return self.grid.shape[-1]

    @property
    def grid_size(self):
        if self.grid_h != self.grid_w:
            raise ValueError("grid_size is only defined for square grids")
        return self.grid_h


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    stride: int = 8
    widths: tuple = (32, 64, 64, 96)
    # pretraining
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    lambda_box: float = 0.05
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5

    def loss_weights(self):
        return DetLossWeights(self.lambda_box, self.lambda_obj, self.lambda_cls)


class GridDetector(nn.Module):
    """Strided conv stack, total stride 8, 1x1 head -> (5+K) channels."""

    def __init__(self, config=DetectorConfig()):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.widths
        self.backbone = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=1, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(c3, c4, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(c4, c4, 3, stride=1, padding=1), nn.LeakyReLU(0.1),
        )
        self.head = nn.Conv2d(c4, 5 + config.num_classes, 1)
        # Priors: low objectness, ~1.5*stride initial box side, centered offset.
        with torch.no_grad():
            self.head.bias.zero_()
            self.head.bias[0] = -2.0
            self.head.bias[1 + config.num_classes + 2:] = math.log(1.5)

    @property
    def stride(self):
        return self.config.stride

    @property
    def num_classes(self):
        return self.config.num_classes

    def forward(self, images):
        """images: (B, 3, H, W) in [0,1], H and W divisible by the stride."""
        h, w = images.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"input {h}x{w} not divisible by detector stride {self.stride}")
        return self.head(self.backbone(images))


def image_to_tensor(image):
    """HxWx3 float [0,1] numpy -> (1, 3, H, W) float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).unsqueeze(0)


def detector_forward(model, image):
    """Run one image through the detector; returns a RawPrediction."""
    with torch.no_grad():
        grid = model(image_to_tensor(image))[0]
    return RawPrediction(grid=grid, stride=model.stride,
                         num_classes=model.num_classes)


def decode_boxes(grid, stride, num_classes):
    """Differentiable box decode for a (B, 5+K, gh, gw) grid.

    Returns (B, gh, gw, 4) boxes as (xmin, ymin, xmax, ymax) in pixels.
    """
    k = num_classes
    tx, ty, tw, th = grid[:, k + 1], grid[:, k + 2], grid[:, k + 3], grid[:, k + 4]
    gh, gw = grid.shape[-2:]
    jj = torch.arange(gw, dtype=grid.dtype, device=grid.device).view(1, 1, gw)
    ii = torch.arange(gh, dtype=grid.dtype, device=grid.device).view(1, gh, 1)
    cx = (jj + torch.sigmoid(tx)) * stride
    cy = (ii + torch.sigmoid(ty)) * stride
    w = stride * torch.exp(tw)
    h = stride * torch.exp(th)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def _box_iou_xyxy(a, b):
    """IoU of two box tensors broadcast over leading dims (last dim = 4)."""
    ix0 = torch.maximum(a[..., 0], b[..., 0])
    iy0 = torch.maximum(a[..., 1], b[..., 1])
    ix1 = torch.minimum(a[..., 2], b[..., 2])
    iy1 = torch.minimum(a[..., 3], b[..., 3])
    inter = (ix1 - ix0).clamp(min=0) * (iy1 - iy0).clamp(min=0)
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    return inter / (area_a + area_b - inter + 1e-9)


def _nms(dets, iou_thresh):
    kept = []
    for det in dets:  # already sorted by score descending
        box = torch.tensor(det.bbox, dtype=torch.float64)
        if all(_box_iou_xyxy(box, torch.tensor(k.bbox, dtype=torch.float64)) <= iou_thresh
               for k in kept):
            kept.append(det)
    return kept


def decode(pred, conf_threshold=0.25, nms_iou=0.45):
    """RawPrediction -> detections sorted by score descending.

    score = sigmoid(objectness) * max class probability (softmax).  Boxes are
    clipped to image bounds; greedy per-class NMS at ``nms_iou``.
    """
    if not 0.0 <= conf_threshold <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ValueError("thresholds must be in [0,1]")
    grid = pred.grid.detach().unsqueeze(0)
    k = pred.num_classes
    obj = torch.sigmoid(grid[:, 0])
    cls_prob = torch.softmax(grid[:, 1:1 + k], dim=1)
    best_prob, best_cls = cls_prob.max(dim=1)
    scores = (obj * best_prob)[0]
    boxes = decode_boxes(grid, pred.stride, k)[0]
    img_w = pred.grid_w * pred.stride
    img_h = pred.grid_h * pred.stride

    raw = []
    keep = scores >= conf_threshold
    for i, j in zip(*torch.nonzero(keep, as_tuple=True)):
        xmin, ymin, xmax, ymax = boxes[i, j].tolist()
        xmin, xmax = max(0.0, xmin), min(float(img_w), xmax)
        ymin, ymax = max(0.0, ymin), min(float(img_h), ymax)
        if xmax <= xmin or ymax <= ymin:
            continue
        raw.append(Detection(class_id=int(best_cls[0, i, j]),
                             score=float(scores[i, j]),
                             bbox=(xmin, ymin, xmax, ymax)))
    raw.sort(key=lambda d: -d.score)
    out = []
    for cid in sorted({d.class_id for d in raw}):
        out.extend(_nms([d for d in raw if d.class_id == cid], nms_iou))
    out.sort(key=lambda d: -d.score)
    return out


def assign_cells(targets, grid_h, grid_w, stride):
    """Positive-cell assignment: the cell containing each box center.

    Collisions keep the larger box; ties break toward the larger class_id.
    Returns {(i, j): DetectionTarget}.
    """
    cells = {}
    for tgt in targets:
        xmin, ymin, xmax, ymax = tgt.bbox
        j = min(grid_w - 1, max(0, int((xmin + xmax) / 2 / stride)))
        i = min(grid_h - 1, max(0, int((ymin + ymax) / 2 / stride)))
        prev = cells.get((i, j))
        if prev is not None:
            area_new = (xmax - xmin) * (ymax - ymin)
            pb = prev.bbox
            area_prev = (pb[2] - pb[0]) * (pb[3] - pb[1])
            if (area_new, tgt.class_id) <= (area_prev, prev.class_id):
                continue
        cells[(i, j)] = tgt
    return cells


def clip_targets(targets, height, width):
    """Clip target boxes to image bounds, dropping ones that collapse."""
    out = []
    for tgt in targets:
        xmin, ymin, xmax, ymax = tgt.bbox
        xmin, xmax = max(0.0, xmin), min(float(width), xmax)
        ymin, ymax = max(0.0, ymin), min(float(height), ymax)
        if xmax - xmin >= 1.0 and ymax - ymin >= 1.0:
            out.append(DetectionTarget(class_id=tgt.class_id,
                                       bbox=(xmin, ymin, xmax, ymax)))
    return out


def detection_loss_batch(grid, targets_per_image, weights, stride, num_classes):
    """Loss over a batched (B, 5+K, gh, gw) grid; returns (total, parts dict).

    Targets must be pre-clipped to image bounds.  With no targets anywhere,
    the localization and classification terms are zero and only the
    confidence term (all cells pushed toward empty) remains.
    """
    b, _, gh, gw = grid.shape
    k = num_classes
    obj_target = torch.zeros((b, gh, gw), dtype=grid.dtype, device=grid.device)
    pos = []  # (batch, i, j, target)
    for bi, targets in enumerate(targets_per_image):
        for (i, j), tgt in sorted(assign_cells(targets, gh, gw, stride).items()):
            obj_target[bi, i, j] = 1.0
            pos.append((bi, i, j, tgt))

    l_obj = F.binary_cross_entropy_with_logits(grid[:, 0], obj_target)
    if pos:
        boxes = decode_boxes(grid, stride, k)
        bb = torch.tensor([p[0] for p in pos])
        ii = torch.tensor([p[1] for p in pos])
        jj = torch.tensor([p[2] for p in pos])
        pred_boxes = boxes[bb, ii, jj]
        gt_boxes = torch.tensor([p[3].bbox for p in pos], dtype=grid.dtype,
                                device=grid.device)
        iou = _box_iou_xyxy(pred_boxes, gt_boxes)
        l_box = (1.0 - iou).mean()
        cls_logits = grid[:, 1:1 + k].permute(0, 2, 3, 1)[bb, ii, jj]
        cls_target = torch.tensor([p[3].class_id for p in pos], device=grid.device)
        l_cls = F.cross_entropy(cls_logits, cls_target)
    else:
        l_box = grid.new_zeros(())
        l_cls = grid.new_zeros(())

    total = (weights.lambda_box * l_box + weights.lambda_obj * l_obj
             + weights.lambda_cls * l_cls)
    return total, {"box": l_box, "obj": l_obj, "cls": l_cls}


def detection_loss(pred, targets, weights=DetLossWeights()):
    """Single-image detection loss (see detection_loss_batch)."""
    grid = pred.grid.unsqueeze(0)
    total, _ = detection_loss_batch(grid, [targets], weights, pred.stride,
                                    pred.num_classes)
    return total


def _load_training_set(manifest_path):
    records = [r for r in mio.read_manifest(manifest_path) if "error" not in r]
    images, targets = [], []
    for rec in records:
        img = mio.load_image(mio.resolve_path(manifest_path, rec["image_path"]))
        anns = rec.get("annotations", [])
        mio.validate_annotations(anns)
        h, w = img.shape[:2]
        images.append(img)
        targets.append(clip_targets(
            [DetectionTarget(class_id=a["class_id"], bbox=tuple(a["bbox"]))
             for a in anns], h, w))
    if not images:
        raise ValueError(f"{manifest_path}: no usable images")
    if not any(targets):
        raise ValueError(f"{manifest_path}: dataset has no annotations")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"pretraining expects a fixed canvas, got sizes {shapes}")
    return images, targets


@dataclass
class PretrainResult:
    checkpoint_path: str
    losses: list = field(default_factory=list)


def pretrain_detector(manifest_path, config, out_path):
    """Train the grid detector on clean annotated images and checkpoint it.

    Deterministic for a fixed seed (byte-identical checkpoint across runs).
    """
    images, targets = _load_training_set(manifest_path)
    torch.manual_seed(config.seed)
    model = GridDetector(config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                            weight_decay=config.weight_decay)
    weights = config.loss_weights()
    rng = np.random.default_rng(config.seed)
    losses = []
    model.train()
    for _ in range(config.steps):
        idx = rng.integers(0, len(images), size=config.batch_size)
        batch = torch.from_numpy(
            np.stack([images[i] for i in idx]).copy()).permute(0, 3, 1, 2)
        grid = model(batch)
        loss, _ = detection_loss_batch(grid, [targets[i] for i in idx], weights,
                                       config.stride, config.num_classes)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite detector loss at step {len(losses)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    meta = {"kind": "grid-detector", "config": asdict(config), "losses": losses}
    save_checkpoint(out_path, state_dict_to_arrays(model.state_dict()), meta)
    return PretrainResult(checkpoint_path=str(out_path), losses=losses)


class FrozenDetector:
    """Immutable detector handle: gradients flow to inputs, never to weights."""

    def __init__(self, model):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.stride = model.stride
        self.num_classes = model.num_classes

    def forward_tensor(self, images):
        """(B,3,H,W) -> (B,5+K,gh,gw); differentiable w.r.t. images."""
        return self.model(images)

    def raw_prediction(self, image):
        return detector_forward(self.model, image)

    def predict(self, image, conf_threshold=0.25, nms_iou=0.45):
        return decode(self.raw_prediction(image), conf_threshold, nms_iou)

    def checksum(self):
        return module_checksum(self.model)


def load_detector(path):
    """Rebuild a GridDetector from a checkpoint (checksum-verified)."""
    arrays, meta = load_checkpoint(path)
    cfg_dict = dict(meta["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    config = DetectorConfig(**cfg_dict)
    model = GridDetector(config)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model


def freeze(path):
    """Load a checkpoint and wrap it as a FrozenDetector."""
    return FrozenDetector(load_detector(path))
