"""Task-driven dehazer training against a frozen detector.

Each step samples clean crops, synthesizes haze on the fly, renders guidance
from the frozen detector's predictions on the hazy crop, restores with the
dehazer, and optimizes ``L_total = L_res + lambda_det * L_det`` where the
detection loss is computed by running the frozen detector on the restored
crop against the ground-truth boxes of the underlying clean scene.  Only the
dehazer's weights update; the detector checksum is verified unchanged at the
end of every run.

With ``lambda_det == 0`` the detection loss is still computed and logged but
under no_grad, so the weight trajectory is bit-identical to a run with the
detection loss structurally disabled (``detection_loss_enabled=False``).

Runs are deterministic: a fixed config + seed yields byte-identical logs and
checkpoints.

Full-scale reference configuration (not the desk-scale defaults below):
batch 16, 256x256 crops, initial lr 4e-4 cosine-annealed, 100 epochs of
1024 steps, lambda_det 0.4, MAE restoration loss.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import evaluation, guidance as gmod, hazegen
from . import manifest as mio
from .checkpoint import save_checkpoint, load_checkpoint, state_dict_to_arrays
from .detector import DetectionTarget, clip_targets, detection_loss_batch, freeze
from .network import DehazeNet, NetworkConfig, count_params


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    batch_size: int = 8
    crop_size: int = 64
    epochs: int = 1
    steps_per_epoch: int = 200
    initial_lr: float = 2e-3
    lr_schedule: str = "cosine"
    lr_floor: float = 1e-6
    weight_decay: float = 1e-4
    lambda_det: float = 0.4
    restoration_loss_kind: str = "mae"
    detection_loss_enabled: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    # haze synthesis (training range)
    atmospheric_light: float = 0.5
    beta_low: float = 0.07
    beta_high: float = 0.12
    # guidance rendering
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    # network (ablation switches mirrored from NetworkConfig)
    num_levels: int = 3
    base_channels: int = 16
    blocks_per_level: int = 2
    channel_attention_ratio: int = 4
    enable_stage2: bool = True
    enable_guidance_fusion: bool = True
    enable_guidance_attention: bool = True
    fusion_levels: tuple = (0,)
    attention_levels: tuple = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_det < 0:
            raise ValueError("lambda_det must be >= 0")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("epochs and steps_per_epoch must be >= 0")
        if self.lr_schedule != "cosine":
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.restoration_loss_kind not in ("mae", "mse"):
            raise ValueError(f"unknown restoration_loss_kind "
                             f"{self.restoration_loss_kind!r}")
        if not 0.0 <= self.beta_low <= self.beta_high:
            raise ValueError("inverted beta range")
        if self.crop_size % (2 ** (self.num_levels - 1)):
            raise ValueError(f"crop_size {self.crop_size} incompatible with "
                             f"{self.num_levels} network levels")
        object.__setattr__(self, "fusion_levels", tuple(self.fusion_levels))
        if self.attention_levels is not None:
            object.__setattr__(self, "attention_levels", tuple(self.attention_levels))

    def network_config(self):
        return NetworkConfig(
            num_levels=self.num_levels,
            base_channels=self.base_channels,
            blocks_per_level=self.blocks_per_level,
            channel_attention_ratio=self.channel_attention_ratio,
            enable_stage2=self.enable_stage2,
            enable_guidance_fusion=self.enable_guidance_fusion,
            enable_guidance_attention=self.enable_guidance_attention,
            fusion_levels=self.fusion_levels,
            attention_levels=self.attention_levels,
        )

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["fusion_levels"] = list(self.fusion_levels)
        d["attention_levels"] = (None if self.attention_levels is None
                                 else list(self.attention_levels))
        return d


_CONFIG_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def config_from_dict(data):
    """Build a TrainConfig from a flat dict, rejecting unknown keys."""
    unknown = sorted(set(data) - set(_CONFIG_TYPES))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    clean = {}
    for key, value in data.items():
        if key in ("fusion_levels", "attention_levels") and value is not None:
            value = tuple(int(v) for v in value)
        clean[key] = value
    return TrainConfig(**clean)


def load_config(path, overrides=None):
    """Load a flat JSON config file; ``overrides`` wins over file values."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a flat JSON object")
    if overrides:
        data.update(overrides)
    return config_from_dict(data)


def restoration_loss(restored, clean, kind="mae"):
    """MAE (default) or MSE between restored and clean, differentiable."""
    if restored.shape != clean.shape:
        raise ValueError(f"shape mismatch {tuple(restored.shape)} vs "
                         f"{tuple(clean.shape)}")
    if kind == "mae":
        return (restored - clean).abs().mean()
    if kind == "mse":
        return ((restored - clean) ** 2).mean()
    raise ValueError(f"unknown restoration loss kind {kind!r}")


def total_loss(l_res, l_det, lambda_det):
    """L_total = L_res + lambda_det * L_det."""
    return l_res + lambda_det * l_det


def cosine_lr(step, total_steps, initial_lr, floor=1e-6):
    """Cosine annealing from initial_lr at step 0 down to ``floor`` at the end."""
    if total_steps <= 1:
        return initial_lr
    t = step / (total_steps - 1)
    return floor + 0.5 * (initial_lr - floor) * (1.0 + math.cos(math.pi * t))


class _CleanCorpus:
    """Clean images + targets loaded once; samples random crops."""

    def __init__(self, manifest_path):
        records = [r for r in mio.read_manifest(manifest_path) if "error" not in r]
        if not records:
            raise ValueError(f"{manifest_path}: empty manifest")
        self.images, self.targets = [], []
        for rec in records:
            img = mio.load_image(mio.resolve_path(manifest_path, rec["image_path"]))
            anns = rec.get("annotations", [])
            mio.validate_annotations(anns)
            self.images.append(img)
            self.targets.append([
                DetectionTarget(class_id=a["class_id"], bbox=tuple(a["bbox"]))
                for a in anns])

    def sample_crop(self, rng, crop):
        idx = int(rng.integers(0, len(self.images)))
        img = self.images[idx]
        h, w = img.shape[:2]
        if h < crop or w < crop:
            raise ValueError(f"image {h}x{w} smaller than crop {crop}")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        patch = img[top:top + crop, left:left + crop]
        shifted = [DetectionTarget(class_id=t.class_id,
                                   bbox=(t.bbox[0] - left, t.bbox[1] - top,
                                         t.bbox[2] - left, t.bbox[3] - top))
                   for t in self.targets[idx]]
        return patch, clip_targets(shifted, crop, crop)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps: int
    final_l_res: float = float("nan")
    detector_checksum: str = ""


def _log_line(step, l_res, l_det, lr, lambda_det):
    # Logged total is recomposed from the logged floats so the decomposition
    # L_total = L_res + lambda * L_det holds exactly in logging precision.
    return json.dumps({"step": step, "l_res": l_res, "l_det": l_det,
                       "l_total": l_res + lambda_det * l_det, "lr": lr},
                      sort_keys=True)


def _batch_to_tensor(stack):
    return torch.from_numpy(np.stack(stack).copy()).permute(0, 3, 1, 2)


def save_dehazer(path, model, config):
    meta = {"kind": "dehazer",
            "network_config": model.net_config.to_dict(),
            "train_config": config.to_dict() if config else None}
    save_checkpoint(path, state_dict_to_arrays(model.state_dict()), meta)
    return path


def load_dehazer(path):
    arrays, meta = load_checkpoint(path)
    model = DehazeNet(NetworkConfig.from_dict(meta["network_config"]))
    model.load_state_dict({k: torch.from_numpy(v.copy())
                           for k, v in arrays.items()})
    model.eval()
    return model


def train_dehazer(config, dataset_manifest, detector_checkpoint, out_dir):
    """Run the joint training loop; returns paths to checkpoint and log.

    Aborts loudly on a non-finite loss, saving a snapshot of the offending
    batch next to the log for diagnosis.
    """
    if config.batch_size < 8:
        raise ValueError("batch_size must be >= 8: the dehazer uses BatchNorm "
                         "and smaller batches make its statistics unreliable")
    if config.crop_size % 8:
        raise ValueError("crop_size must be divisible by the detector stride")
    os.makedirs(out_dir, exist_ok=True)
    corpus = _CleanCorpus(dataset_manifest)
    det = freeze(detector_checkpoint)
    checksum_before = det.checksum()

    torch.manual_seed(config.seed)
    model = DehazeNet(config.network_config())
    opt = torch.optim.AdamW(model.parameters(), lr=config.initial_lr,
                            weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    det_weights = None
    if config.detection_loss_enabled:
        det_weights = _detector_loss_weights(detector_checkpoint)

    log_path = os.path.join(out_dir, "train_log.jsonl")
    ckpt_path = os.path.join(out_dir, "dehazer.ckpt")
    final_l_res = float("nan")
    with open(log_path, "w") as log:
        for step in range(config.total_steps):
            lr = cosine_lr(step, config.total_steps, config.initial_lr,
                           config.lr_floor)
            for group in opt.param_groups:
                group["lr"] = lr

            cleans, hazies, masks, targets = [], [], [], []
            for _ in range(config.batch_size):
                clean, tgt = corpus.sample_crop(rng, config.crop_size)
                beta = float(rng.uniform(config.beta_low, config.beta_high))
                hazy, _ = hazegen.synthesize(
                    clean, hazegen.HazeParams(config.atmospheric_light, beta))
                dets = det.predict(hazy, config.conf_threshold, config.nms_iou)
                mask = gmod.normalize_guidance(gmod.render_guidance(
                    dets, config.crop_size, config.crop_size, det.num_classes))
                cleans.append(clean)
                hazies.append(hazy)
                masks.append(mask.values[:, :, None])
                targets.append(tgt)

            clean_t = _batch_to_tensor(cleans)
            hazy_t = _batch_to_tensor(hazies)
            mask_t = _batch_to_tensor(masks)

            model.train()
            restored = model(hazy_t, mask_t)
            l_res = restoration_loss(restored, clean_t,
                                     config.restoration_loss_kind)
            if config.detection_loss_enabled:
                if config.lambda_det > 0:
                    pred = det.forward_tensor(restored)
                    l_det, _ = detection_loss_batch(
                        pred, targets, det_weights, det.stride, det.num_classes)
                    loss = total_loss(l_res, l_det, config.lambda_det)
                else:
                    # lambda = 0: log the detection loss but detach its
                    # gradient path entirely.
                    with torch.no_grad():
                        pred = det.forward_tensor(restored)
                        l_det, _ = detection_loss_batch(
                            pred, targets, det_weights, det.stride,
                            det.num_classes)
                    loss = l_res
                l_det_val = float(l_det.detach())
            else:
                l_det_val = 0.0
                loss = l_res

            if not torch.isfinite(loss):
                snap = os.path.join(out_dir, f"diverged_step{step}.npz")
                np.savez(snap, clean=np.stack(cleans), hazy=np.stack(hazies),
                         mask=np.stack(masks))
                raise RuntimeError(
                    f"non-finite loss at step {step}; batch snapshot: {snap}")

            opt.zero_grad()
            loss.backward()
            opt.step()

            final_l_res = float(l_res.detach())
            log.write(_log_line(step, final_l_res, l_det_val, lr,
                                config.lambda_det if config.detection_loss_enabled
                                else 0.0))
            log.write("\n")
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_dehazer(os.path.join(out_dir, f"dehazer_step{step + 1:06d}.ckpt"),
                             model, config)

    checksum_after = det.checksum()
    if checksum_after != checksum_before:
        raise RuntimeError("frozen detector parameters changed during training")
    model.eval()
    save_dehazer(ckpt_path, model, config)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       steps=config.total_steps, final_l_res=final_l_res,
                       detector_checksum=checksum_after)


def _detector_loss_weights(detector_checkpoint):
    from .detector import DetectorConfig

    _, meta = load_checkpoint(detector_checkpoint)
    cfg = meta.get("config", {})
    return DetectorConfig(**{**cfg, "widths": tuple(cfg.get("widths", (32, 64, 64, 96)))}
                          ).loss_weights()


def make_dehaze_fn(model):
    """Wrap a DehazeNet as the (hazy, mask, meta) callable evaluation expects."""
    model.eval()

    def fn(hazy, mask, meta):
        with torch.no_grad():
            hazy_t = _batch_to_tensor([hazy])
            mask_t = _batch_to_tensor([mask.values[:, :, None]])
            out = model(hazy_t, mask_t)
        return out[0].permute(1, 2, 0).numpy()

    return fn


# Ablation variants: name -> config transform.
ABLATION_VARIANTS = {
    "full": lambda c: c,
    "no_stage2": lambda c: dataclasses.replace(c, enable_stage2=False),
    "no_fusion": lambda c: dataclasses.replace(c, enable_guidance_fusion=False),
    "no_attention": lambda c: dataclasses.replace(c, enable_guidance_attention=False),
    "no_guidance": lambda c: dataclasses.replace(
        c, enable_guidance_fusion=False, enable_guidance_attention=False),
    "mse_loss": lambda c: dataclasses.replace(c, restoration_loss_kind="mse"),
    "no_det_loss": lambda c: dataclasses.replace(c, detection_loss_enabled=False),
}


def resolve_variant(name):
    """Variant token -> config transform; 'lambda=<x>' sweeps the trade-off."""
    if name.startswith("lambda="):
        try:
            value = float(name.split("=", 1)[1])
        except ValueError:
            raise ValueError(f"bad lambda variant {name!r}") from None
        if value < 0:
            raise ValueError(f"lambda must be >= 0 in variant {name!r}")
        return lambda c: dataclasses.replace(c, lambda_det=value)
    if name not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {name!r}; known: "
                         f"{', '.join(sorted(ABLATION_VARIANTS))} or lambda=<x>")
    return ABLATION_VARIANTS[name]


@dataclass
class AblationRow:
    variant: str
    psnr: float
    ssim: float
    map50: float
    params: int


def format_ablation_table(rows):
    header = f"{'variant':<16}{'psnr':>9}{'ssim':>9}{'map50':>9}{'params':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row.variant:<16}{row.psnr:>9.3f}{row.ssim:>9.4f}"
                     f"{row.map50:>9.4f}{row.params:>10d}")
    return "\n".join(lines)


def run_ablation(base_config, variant_names, train_manifest, eval_manifest,
                 detector_checkpoint, out_dir):
    """Train + evaluate every variant under identical seeds; returns rows.

    All variant names are validated before any training starts.
    """
    transforms = [(name, resolve_variant(name)) for name in variant_names]
    os.makedirs(out_dir, exist_ok=True)
    det = freeze(detector_checkpoint)
    rows = []
    for name, transform in transforms:
        cfg = transform(base_config)
        run_dir = os.path.join(out_dir, name.replace("=", "_"))
        result = train_dehazer(cfg, train_manifest, detector_checkpoint, run_dir)
        model = load_dehazer(result.checkpoint_path)
        report = evaluation.evaluate(make_dehaze_fn(model), det, eval_manifest,
                                     cfg.conf_threshold, cfg.nms_iou)
        rows.append(AblationRow(variant=name, psnr=report.psnr_mean,
                                ssim=report.ssim_mean, map50=report.map50,
                                params=count_params(cfg.network_config())))
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump([dataclasses.asdict(r) for r in rows], fh, indent=2,
                  sort_keys=True)
    return rows
