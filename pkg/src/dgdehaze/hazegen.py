"""Haze synthesis via the atmospheric scattering model, plus the exact inverse.

A hazy image forms as I = J*t + A*(1-t) with scalar airlight A and a
per-pixel transmission t = exp(-beta*d).  The depth surrogate d peaks at the
image center (d = -0.04*rho + sqrt(max(h, w)) with rho the Euclidean distance
to the center pixel), so haze is thickest in the middle of the frame.  All
synthesis arithmetic is float32.

``dehaze_oracle`` applies the closed-form inversion J = I/t + A*(1 - 1/t) and
recovers the clean image up to clamping and float error; it is the reference
the learned dehazer is measured against in tests.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import manifest as mio

# Transmission floor: keeps the inversion's division finite.  With the
# in-distribution beta range and desk-scale image sizes t stays far above
# this, so the clamp is inert on real data.
T_MIN = 1e-3


@dataclass(frozen=True)
class HazeParams:
    """Airlight in [0,1] and haze thickness beta >= 0."""

    atmospheric_light: float = 0.5
    beta: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.atmospheric_light <= 1.0:
            raise ValueError(f"atmospheric_light must be in [0,1], got {self.atmospheric_light}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


def validate_image(image):
    """Check the HxWx3 float-[0,1] contract; returns the array as float32."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image dimensions must be >= 1, got {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    return arr


def depth_map(height, width):
    """Depth surrogate, maximal at the center pixel and clamped to >= 0.

    d(i,j) = -0.04 * rho(i,j) + sqrt(max(h,w)), rho the Euclidean distance
    from (i,j) to (h//2, w//2).  The clamp only engages on images far larger
    than anything in distribution, where the linear falloff would cross zero
    and produce t > 1.
    """
    if height < 1 or width < 1:
        raise ValueError(f"dimensions must be >= 1, got {height}x{width}")
    ci, cj = height // 2, width // 2
    ii = np.arange(height, dtype=np.float32)[:, None] - np.float32(ci)
    jj = np.arange(width, dtype=np.float32)[None, :] - np.float32(cj)
    rho = np.sqrt(ii * ii + jj * jj)
    d = np.float32(-0.04) * rho + np.float32(np.sqrt(max(height, width)))
    return np.maximum(d, np.float32(0.0))


def transmission_map(depth, beta):
    """t = exp(-beta * d), clamped into [T_MIN, 1]."""
    if beta < 0.0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    t = np.exp(np.float32(-beta) * np.asarray(depth, dtype=np.float32))
    return np.clip(t, np.float32(T_MIN), np.float32(1.0))


def synthesize(clean, params):
    """Apply scattering per pixel per channel; returns (hazy, transmission).

    The same t multiplies every channel.  Output is clamped to [0,1].
    """
    clean = validate_image(clean)
    d = depth_map(clean.shape[0], clean.shape[1])
    t = transmission_map(d, params.beta)
    a = np.float32(params.atmospheric_light)
    hazy = clean * t[:, :, None] + a * (np.float32(1.0) - t[:, :, None])
    return np.clip(hazy, 0.0, 1.0).astype(np.float32), t


def dehaze_oracle(hazy, params, t):
    """Exact inversion J = I/t + A*(1 - 1/t); requires t >= T_MIN everywhere."""
    hazy = validate_image(hazy)
    t = np.asarray(t, dtype=np.float32)
    if t.shape != hazy.shape[:2]:
        raise ValueError(f"transmission shape {t.shape} does not match image {hazy.shape[:2]}")
    if t.min() < T_MIN:
        raise ValueError(f"transmission contains values below {T_MIN}")
    inv_t = np.float32(1.0) / t[:, :, None]
    a = np.float32(params.atmospheric_light)
    clean = hazy * inv_t + a * (np.float32(1.0) - inv_t)
    return np.clip(clean, 0.0, 1.0).astype(np.float32)


def sample_params(rng_seed, beta_low, beta_high, atmospheric_light=0.5):
    """Draw beta uniformly from [beta_low, beta_high]; deterministic per seed."""
    if not 0.0 <= beta_low <= beta_high:
        raise ValueError(f"need 0 <= beta_low <= beta_high, got [{beta_low}, {beta_high}]")
    rng = np.random.default_rng(rng_seed)
    beta = float(rng.uniform(beta_low, beta_high))
    return HazeParams(atmospheric_light=atmospheric_light, beta=beta)


# Reference ranges: beta in [0.07, 0.12] for training corpora and
# [0.05, 0.14] for test corpora, with A = 0.5 throughout.
TRAIN_BETA_RANGE = (0.07, 0.12)
TEST_BETA_RANGE = (0.05, 0.14)


@dataclass(frozen=True)
class HazePolicy:
    """Per-image haze parameter draw used when materializing a corpus."""

    beta_low: float = TRAIN_BETA_RANGE[0]
    beta_high: float = TRAIN_BETA_RANGE[1]
    atmospheric_light: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta_low <= self.beta_high:
            raise ValueError(f"inverted beta range [{self.beta_low}, {self.beta_high}]")
        if not 0.0 <= self.atmospheric_light <= 1.0:
            raise ValueError("atmospheric_light must be in [0,1]")


def build_dataset(clean_manifest_path, policy, output_dir):
    """Materialize a hazy corpus next to a clean one.

    Reads rows {image_path, annotations} from the clean manifest, writes one
    hazy PNG per readable image into ``output_dir`` plus a manifest recording
    the per-image beta.  Unreadable rows are recorded with an ``error`` field
    and the run continues.  Deterministic for a fixed policy seed.
    """
    os.makedirs(output_dir, exist_ok=True)
    records = mio.read_manifest(clean_manifest_path)
    rng = np.random.default_rng(policy.seed)
    out_records = []
    for idx, rec in enumerate(records):
        beta = float(rng.uniform(policy.beta_low, policy.beta_high))
        try:
            clean = mio.load_image(mio.resolve_path(clean_manifest_path, rec["image_path"]))
            params = HazeParams(atmospheric_light=policy.atmospheric_light, beta=beta)
            hazy, _ = synthesize(clean, params)
            hazy_path = os.path.join(output_dir, f"hazy_{idx:05d}.png")
            mio.save_image(hazy_path, hazy)
            out_records.append({
                "image_path": os.path.abspath(
                    mio.resolve_path(clean_manifest_path, rec["image_path"])),
                "hazy_path": os.path.abspath(hazy_path),
                "beta": beta,
                "atmospheric_light": policy.atmospheric_light,
                "annotations": rec.get("annotations", []),
            })
        except (OSError, ValueError, KeyError) as exc:
            out_records.append({
                "image_path": rec.get("image_path", f"<row {idx}>"),
                "error": f"{type(exc).__name__}: {exc}",
            })
    return mio.write_manifest(os.path.join(output_dir, "manifest.jsonl"), out_records)
