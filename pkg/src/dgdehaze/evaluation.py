"""Image-quality metrics (PSNR, SSIM) and detection metrics (IoU, AP, mAP@0.5).

PSNR and SSIM are computed in float64 on [0,1] images.  SSIM uses an 11x11
Gaussian window (sigma 1.5), stabilizers C1 = 0.01^2 and C2 = 0.03^2 for unit
dynamic range, valid-region filtering, per channel then averaged.

Average precision uses greedy matching (highest score first, each ground
truth matched at most once, IoU >= 0.5 for a match) and the all-points
interpolated area under the precision-recall curve.  mAP averages only over
classes with at least one ground-truth instance; classes without ground
truth are excluded and flagged in the report.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import guidance as gmod
from . import manifest as mio
from .detector import DetectionTarget

PSNR_CAP_DB = 100.0


def psnr(a, b, cap=PSNR_CAP_DB):
    """10*log10(1/MSE) over all pixels and channels, capped at ``cap`` dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img, window):
    """Separable valid-mode correlation with a 1-D window along both axes."""
    n = window.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ window
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ window


def ssim(a, b, window_size=11, sigma=1.5):
    """Mean structural similarity; exactly 1.0 when a == b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError(f"image {a.shape[:2]} smaller than the "
                         f"{window_size}x{window_size} window")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    win = _gaussian_window(window_size, sigma)
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        var_x = _filter_valid(x * x, win) - mu_x * mu_x
        var_y = _filter_valid(y * y, win) - mu_y * mu_y
        cov = _filter_valid(x * y, win) - mu_x * mu_y
        smap = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
        scores.append(float(smap.mean()))
    return float(np.mean(scores))


def iou(box_a, box_b):
    """Intersection over union of two (xmin, ymin, xmax, ymax) boxes."""
    for box in (box_a, box_b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {box}")
    ix0 = max(box_a[0], box_b[0])
    iy0 = max(box_a[1], box_b[1])
    ix1 = min(box_a[2], box_b[2])
    iy1 = min(box_a[3], box_b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    if inter == 0.0:
        return 0.0
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


def _match_detections(dets, gts, iou_thresh):
    """Greedy matching; returns a TP/FP flag per detection (score-sorted).

    ``dets`` are (image_id, Detection), ``gts`` are (image_id, target); each
    ground truth is matched at most once, highest-score detection first.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].score)
    matched = [False] * len(gts)
    flags = []
    for i in order:
        img_id, det = dets[i]
        best_iou, best_j = 0.0, -1
        for j, (gt_img, gt) in enumerate(gts):
            if gt_img != img_id or matched[j]:
                continue
            val = iou(det.bbox, gt.bbox)
            if val > best_iou:
                best_iou, best_j = val, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_flags(flags, num_gts):
    if num_gts == 0:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    rec = tp / num_gts
    prec = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets, gts, iou_thresh=0.5):
    """All-points interpolated AP for one pooled detection/ground-truth set.

    Returns 0.0 both for "no detections but ground truth exists" and for the
    undefined no-ground-truth case; callers that need the distinction check
    ``len(gts)`` (the evaluation report flags undefined classes).
    """
    if not gts:
        return 0.0
    flags = _match_detections([(0, d) for d in dets], [(0, g) for g in gts],
                              iou_thresh)
    return _ap_from_flags(flags, len(gts))


def dataset_average_precision(dets_with_ids, gts_with_ids, iou_thresh=0.5):
    """AP over detections pooled across images; items are (image_id, obj)."""
    if not gts_with_ids:
        return 0.0
    flags = _match_detections(dets_with_ids, gts_with_ids, iou_thresh)
    return _ap_from_flags(flags, len(gts_with_ids))


@dataclass
class EvalReport:
    psnr_mean: float = 0.0
    ssim_mean: float = 0.0
    per_class_ap: dict = field(default_factory=dict)
    map50: float = 0.0
    undefined_classes: list = field(default_factory=list)
    num_images: int = 0
    num_instances: int = 0
    errors: list = field(default_factory=list)
    per_image: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map50": self.map50,
            "undefined_classes": self.undefined_classes,
            "num_images": self.num_images,
            "num_instances": self.num_instances,
            "errors": self.errors,
        }, sort_keys=True, indent=2)

    def to_table(self):
        lines = [
            f"{'images':<12}{self.num_images}",
            f"{'instances':<12}{self.num_instances}",
            f"{'psnr_mean':<12}{self.psnr_mean:.4f}",
            f"{'ssim_mean':<12}{self.ssim_mean:.6f}",
        ]
        for cid in sorted(self.per_class_ap):
            tag = " (no GT)" if cid in self.undefined_classes else ""
            lines.append(f"{'AP class ' + str(cid):<12}{self.per_class_ap[cid]:.4f}{tag}")
        lines.append(f"{'mAP@0.5':<12}{self.map50:.4f}")
        if self.errors:
            lines.append(f"errors      {len(self.errors)}")
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "psnr", "ssim", "detections"])
            for row in self.per_image:
                writer.writerow(row)


def evaluate_items(dehaze_fn, frozen_detector, items, conf_threshold=0.25,
                   nms_iou=0.45, iou_thresh=0.5):
    """Core evaluation over in-memory (clean, hazy, targets, meta) items.

    Per item: guidance comes from the frozen detector on the hazy image, the
    model restores it, PSNR/SSIM are measured against the clean image, and
    detections on the restored output feed the pooled per-class AP.
    """
    psnrs, ssims = [], []
    all_dets, all_gts = [], []
    per_image = []
    num_instances = 0
    for idx, (clean, hazy, targets, meta) in enumerate(items):
        h, w = hazy.shape[:2]
        dets_hazy = frozen_detector.predict(hazy, conf_threshold, nms_iou)
        mask = gmod.normalize_guidance(gmod.render_guidance(
            dets_hazy, h, w, frozen_detector.num_classes))
        restored = dehaze_fn(hazy, mask, meta)
        psnrs.append(psnr(restored, clean))
        ssims.append(ssim(restored, clean))
        dets = frozen_detector.predict(restored, conf_threshold, nms_iou)
        all_dets.extend((idx, d) for d in dets)
        all_gts.extend((idx, t) for t in targets)
        num_instances += len(targets)
        per_image.append([idx, psnrs[-1], ssims[-1], len(dets)])

    classes = sorted({g.class_id for _, g in all_gts}
                     | {d.class_id for _, d in all_dets})
    per_class_ap, undefined = {}, []
    for cid in classes:
        cls_dets = [(i, d) for i, d in all_dets if d.class_id == cid]
        cls_gts = [(i, g) for i, g in all_gts if g.class_id == cid]
        per_class_ap[cid] = dataset_average_precision(cls_dets, cls_gts, iou_thresh)
        if not cls_gts:
            undefined.append(cid)
    defined = [per_class_ap[c] for c in classes if c not in undefined]
    return EvalReport(
        psnr_mean=float(np.mean(psnrs)) if psnrs else 0.0,
        ssim_mean=float(np.mean(ssims)) if ssims else 0.0,
        per_class_ap=per_class_ap,
        map50=float(np.mean(defined)) if defined else 0.0,
        undefined_classes=undefined,
        num_images=len(psnrs),
        num_instances=num_instances,
        per_image=per_image,
    )


def evaluate(dehaze_fn, frozen_detector, manifest_path, conf_threshold=0.25,
             nms_iou=0.45, iou_thresh=0.5, csv_path=None):
    """Evaluate over a hazy-corpus manifest (see ``hazegen.build_dataset``).

    ``dehaze_fn(hazy, guidance_mask, meta) -> restored`` receives the raw
    manifest record as ``meta``.  Rows that fail to load are recorded in the
    report's error list and evaluation continues.
    """
    records = mio.read_manifest(manifest_path)
    items, errors = [], []
    for rec in records:
        if "error" in rec:
            errors.append(f"{rec.get('image_path')}: {rec['error']}")
            continue
        try:
            clean = mio.load_image(mio.resolve_path(manifest_path, rec["image_path"]))
            hazy = mio.load_image(mio.resolve_path(manifest_path, rec["hazy_path"]))
            anns = rec.get("annotations", [])
            mio.validate_annotations(anns)
            targets = [DetectionTarget(class_id=a["class_id"], bbox=tuple(a["bbox"]))
                       for a in anns]
            items.append((clean, hazy, targets, rec))
        except (OSError, ValueError, KeyError) as exc:
            errors.append(f"{rec.get('image_path')}: {type(exc).__name__}: {exc}")
    report = evaluate_items(dehaze_fn, frozen_detector, items, conf_threshold,
                            nms_iou, iou_thresh)
    report.errors = errors
    if csv_path:
        report.write_csv(csv_path)
    return report
