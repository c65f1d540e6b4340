"""Synthetic forgery generation with exact ground-truth masks.

Three tasks: cross-image patch duplication (a rectangle from one image
pasted into another), within-image duplication split into a pseudo-pair, and
stitched composites labeled at the seam. Procedural base textures stand in
for the four source modalities (blobs, bands, scatter points, gradients).
Everything is a pure function of (parameters, seed): per-sample RNG streams
are derived from (seed, index) and the manifest records full provenance.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BadParameter, CannotSeparate, IoError, PatchDoesNotFit
from . import netpbm

BASE_KINDS = ("blob", "band", "scatter", "gradient")
TASKS = ("edd", "idd", "cstd")

# textures stay inside this range so pasted pixels never collide with the
# background by value
_LO, _HI = 0.02, 0.98


@dataclass
class AugmentationSpec:
    """Deterministic description of the patch transform."""

    scale: float = 1.0
    rotation_deg: float = 0.0
    hflip: bool = False
    vflip: bool = False
    noise_sigma: float = 0.0
    blend: str = "hard"  # "hard" or "feathered"
    feather_width: int = 0

    def __post_init__(self):
        if not 0.5 <= self.scale <= 2.0:
            raise BadParameter(f"scale {self.scale} outside [0.5, 2.0]")
        if not 0.0 <= self.rotation_deg < 360.0:
            raise BadParameter(f"rotation {self.rotation_deg} outside [0, 360)")
        if not 0.0 <= self.noise_sigma <= 0.05:
            raise BadParameter(f"noise_sigma {self.noise_sigma} outside [0, 0.05]")
        if self.blend not in ("hard", "feathered"):
            raise BadParameter(f"unknown blend '{self.blend}'")

    @classmethod
    def sample(cls, rng, feathered_prob=0.3):
        return cls(
            scale=float(rng.uniform(0.6, 1.6)),
            rotation_deg=float(rng.uniform(0.0, 360.0)),
            hflip=bool(rng.random() < 0.5),
            vflip=bool(rng.random() < 0.5),
            noise_sigma=float(rng.uniform(0.0, 0.03)),
            blend="feathered" if rng.random() < feathered_prob else "hard",
            feather_width=int(rng.integers(1, 4)),
        )


@dataclass
class ForgerySample:
    img1: np.ndarray
    img2: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    task: str
    provenance: dict = field(default_factory=dict)

    def as_training_tuple(self, dtype=np.float32):
        return (
            self.img1.astype(dtype),
            self.img2.astype(dtype),
            self.mask1.astype(dtype),
            self.mask2.astype(dtype),
        )


# ---------------------------------------------------------------------------
# base textures
# ---------------------------------------------------------------------------


def _rescale(img):
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-9:
        return np.full_like(img, 0.5)
    return _LO + (_HI - _LO) * (img - lo) / (hi - lo)


def base_image(kind, h, w, rng):
    """Procedural RGB texture in [0,1], deterministic per rng state."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "blob":
        img = np.zeros((h, w))
        for _ in range(rng.integers(6, 14)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sy = rng.uniform(h * 0.04, h * 0.18)
            sx = rng.uniform(w * 0.04, w * 0.18)
            amp = rng.uniform(0.4, 1.0)
            img += amp * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        tint = rng.uniform(0.75, 1.0, size=3)
    elif kind == "band":
        profile = np.full(h, rng.uniform(0.7, 0.9))
        for _ in range(rng.integers(3, 7)):
            cy = rng.uniform(0, h)
            width = rng.uniform(1.0, max(1.5, h * 0.06))
            depth = rng.uniform(0.3, 0.7)
            profile -= depth * np.exp(-(((np.arange(h) - cy) / width) ** 2))
        drift = 1.0 + 0.1 * np.sin(2 * np.pi * xx / w * rng.uniform(0.5, 2.0))
        img = profile[:, None] * drift
        tint = rng.uniform(0.8, 1.0, size=3)
    elif kind == "scatter":
        img = np.full((h, w), 0.1)
        count = int(rng.integers(30, 120))
        for _ in range(count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(0.5, 1.5)
            img += rng.uniform(0.5, 1.0) * np.exp(
                -(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            )
        tint = rng.uniform(0.5, 1.0, size=3)
    elif kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        img = np.cos(theta) * xx / w + np.sin(theta) * yy / h
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(min(h, w) * 0.08, min(h, w) * 0.25)
            disk = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
            img = np.where(disk, img + rng.uniform(-0.6, 0.6), img)
        tint = rng.uniform(0.7, 1.0, size=3)
    else:
        raise BadParameter(f"unknown base kind '{kind}'")
    img = _rescale(img)
    if kind == "blob":
        img = np.clip(img + 0.25, _LO, _HI)  # ambient floor, keeps means mid-range
    img = img + rng.normal(0.0, 0.004, size=img.shape)  # breaks exact-value ties
    rgb = np.clip(img[None, :, :] * tint[:, None, None], _LO, _HI)
    return rgb


# ---------------------------------------------------------------------------
# patch transform + paste
# ---------------------------------------------------------------------------


def _transform_patch(patch, spec, rng):
    """Scale/rotate/flip/noise a [3,h,w] patch.

    Returns (pixels [3,oh,ow], footprint alpha [oh,ow] in {0,1}). Pixels are
    sampled bilinearly through the inverse map; the footprint is the
    nearest-neighbor rasterization of the transformed rectangle.
    """
    p = patch
    if spec.hflip:
        p = p[:, :, ::-1]
    if spec.vflip:
        p = p[:, ::-1, :]
    _, ph, pw = p.shape
    ang = np.deg2rad(spec.rotation_deg)
    cos, sin = np.cos(ang), np.sin(ang)
    sh, sw = ph * spec.scale, pw * spec.scale
    oh = max(1, int(np.ceil(abs(sh * cos) + abs(sw * sin))))
    ow = max(1, int(np.ceil(abs(sh * sin) + abs(sw * cos))))
    oy, ox = np.mgrid[0:oh, 0:ow].astype(np.float64)
    oy = oy - (oh - 1) / 2.0
    ox = ox - (ow - 1) / 2.0
    # inverse rotation then inverse scale, into patch coordinates
    sy = (cos * oy + sin * ox) / spec.scale + (ph - 1) / 2.0
    sx = (-sin * oy + cos * ox) / spec.scale + (pw - 1) / 2.0
    inside = (sy > -0.5) & (sy < ph - 0.5) & (sx > -0.5) & (sx < pw - 0.5)
    y0 = np.clip(np.floor(sy).astype(int), 0, ph - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, pw - 1)
    y1 = np.clip(y0 + 1, 0, ph - 1)
    x1 = np.clip(x0 + 1, 0, pw - 1)
    wy = np.clip(sy - y0, 0.0, 1.0)
    wx = np.clip(sx - x0, 0.0, 1.0)
    out = np.zeros((3, oh, ow))
    for c in range(3):
        out[c] = (
            p[c][y0, x0] * (1 - wy) * (1 - wx)
            + p[c][y1, x0] * wy * (1 - wx)
            + p[c][y0, x1] * (1 - wy) * wx
            + p[c][y1, x1] * wy * wx
        )
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    return out, inside.astype(np.float64)


def _box_blur_2d(x, k):
    pad = k // 2
    xp = np.pad(x, pad, mode="edge")
    acc = np.zeros_like(x)
    for dy in range(k):
        for dx in range(k):
            acc += xp[dy : dy + x.shape[0], dx : dx + x.shape[1]]
    return acc / (k * k)


def _paste(canvas, pixels, footprint, top, left, spec):
    """Blend the transformed patch into canvas at (top, left); returns the
    binary destination mask."""
    oh, ow = footprint.shape
    region = canvas[:, top : top + oh, left : left + ow]
    if spec.blend == "feathered" and spec.feather_width > 0:
        alpha = footprint.copy()
        for _ in range(spec.feather_width):
            alpha = _box_blur_2d(alpha, 3)
        alpha = alpha * footprint  # never bleed outside the footprint
    else:
        alpha = footprint
    region[:] = alpha * pixels + (1.0 - alpha) * region
    mask = np.zeros(canvas.shape[1:], dtype=np.float64)
    mask[top : top + oh, left : left + ow] = footprint
    return mask


def _snap(value, step, minimum):
    return max(int(round(value / step)) * step, minimum)


def _sample_rect(rng, h, w, frac_range, grid_align=None):
    rh = int(rng.integers(int(h * frac_range[0]), max(int(h * frac_range[1]), int(h * frac_range[0]) + 1) + 1))
    rw = int(rng.integers(int(w * frac_range[0]), max(int(w * frac_range[1]), int(w * frac_range[0]) + 1) + 1))
    rh, rw = max(rh, 2), max(rw, 2)
    if grid_align:
        rh = min(_snap(rh, grid_align, grid_align), h)
        rw = min(_snap(rw, grid_align, grid_align), w)
        y = int(rng.integers(0, (h - rh) // grid_align + 1)) * grid_align
        x = int(rng.integers(0, (w - rw) // grid_align + 1)) * grid_align
    else:
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
    return y, x, rh, rw


# ---------------------------------------------------------------------------
# task generators
# ---------------------------------------------------------------------------


def synth_edd(base1, base2, spec, rng, patch_frac=(0.2, 0.4), retries=10, grid_align=None):
    """Copy an axis-aligned rectangle from base1, transform it, paste into
    base2. mask1 marks the source rectangle, mask2 the pasted footprint.

    ``grid_align`` snaps rectangle geometry to that pixel step so duplicated
    content lands exactly on a token grid."""
    if base1.shape != base2.shape:
        raise BadParameter("base images must share a shape")
    _, h, w = base1.shape
    for attempt in range(retries):
        sy, sx, rh, rw = _sample_rect(rng, h, w, patch_frac, grid_align)
        pixels, footprint = _transform_patch(base1[:, sy : sy + rh, sx : sx + rw], spec, rng)
        oh, ow = footprint.shape
        if oh <= h and ow <= w:
            if grid_align and (oh % grid_align == 0) and (ow % grid_align == 0):
                top = int(rng.integers(0, (h - oh) // grid_align + 1)) * grid_align
                left = int(rng.integers(0, (w - ow) // grid_align + 1)) * grid_align
            else:
                top = int(rng.integers(0, h - oh + 1))
                left = int(rng.integers(0, w - ow + 1))
            img2 = base2.copy()
            mask2 = _paste(img2, pixels, footprint, top, left, spec)
            mask1 = np.zeros((h, w))
            mask1[sy : sy + rh, sx : sx + rw] = 1.0
            prov = {
                "task": "edd",
                "source_rect": [sy, sx, rh, rw],
                "dest_rect": [top, left, oh, ow],
                "augmentation": asdict(spec),
            }
            return ForgerySample(
                img1=base1.copy(),
                img2=img2,
                mask1=mask1[None],
                mask2=mask2[None],
                task="edd",
                provenance=prov,
            )
    raise PatchDoesNotFit(f"no valid placement after {retries} tries")


def synth_idd_pseudo_pair(base, spec, rng, patch_frac=(0.25, 0.45), retries=10, return_full=False):
    """Within-image copy-move with source and destination in opposite
    halves, then a middle vertical split into a pseudo-pair."""
    _, h, w = base.shape
    half = w // 2
    if half < 4:
        raise CannotSeparate("image too narrow to split")
    for attempt in range(retries):
        src_left = bool(rng.random() < 0.5)
        sy, sx, rh, rw = _sample_rect(rng, h, half, patch_frac)
        if not src_left:
            sx += half
        pixels, footprint = _transform_patch(base[:, sy : sy + rh, sx : sx + rw], spec, rng)
        oh, ow = footprint.shape
        if oh > h or ow > half:
            continue
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, half - ow + 1))
        if src_left:
            left += half
        forged = base.copy()
        mask_dst = _paste(forged, pixels, footprint, top, left, spec)
        mask_src = np.zeros((h, w))
        mask_src[sy : sy + rh, sx : sx + rw] = 1.0
        full_mask = np.clip(mask_src + mask_dst, 0.0, 1.0)
        img1, img2 = forged[:, :, :half], forged[:, :, half:]
        m1, m2 = full_mask[:, :half], full_mask[:, half:]
        prov = {
            "task": "idd",
            "source_rect": [sy, sx, rh, rw],
            "dest_rect": [top, left, oh, ow],
            "split_col": half,
            "augmentation": asdict(spec),
        }
        sample = ForgerySample(
            img1=img1.copy(),
            img2=img2.copy(),
            mask1=m1[None].copy(),
            mask2=m2[None].copy(),
            task="idd",
            provenance=prov,
        )
        if return_full:
            return sample, forged, full_mask
        return sample
    raise CannotSeparate(f"no separable geometry after {retries} tries")


def synth_cstd(base_a, base_b, rng, band_width=3, return_full=False):
    """Stitch the left part of base_a to the right part of base_b; the mask
    is a vertical band of ``band_width`` columns centered on the seam."""
    if base_a.shape != base_b.shape:
        raise BadParameter("base images must share a shape")
    _, h, w = base_a.shape
    half = w // 2
    margin = band_width + 2
    # keep the seam strictly inside one half of the eventual split
    choices = list(range(margin, half - margin)) + list(range(half + margin, w - margin))
    seam = int(choices[rng.integers(0, len(choices))])
    full = np.concatenate([base_a[:, :, :seam], base_b[:, :, seam:]], axis=2)
    mask = np.zeros((h, w))
    lo = seam - band_width // 2
    mask[:, lo : lo + band_width] = 1.0
    img1, img2 = full[:, :, :half], full[:, :, half:]
    m1, m2 = mask[:, :half], mask[:, half:]
    prov = {"task": "cstd", "seam_col": seam, "band_width": band_width, "split_col": half}
    sample = ForgerySample(
        img1=img1.copy(),
        img2=img2.copy(),
        mask1=m1[None].copy(),
        mask2=m2[None].copy(),
        task="cstd",
        provenance=prov,
    )
    if return_full:
        return sample, full, mask
    return sample


def pristine_pair(kind, h, w, rng, task="edd"):
    """Unmanipulated sample: two independent textures (or a split one)."""
    if task == "edd":
        img1 = base_image(kind, h, w, rng)
        img2 = base_image(kind, h, w, rng)
    else:
        full = base_image(kind, h, 2 * w, rng)
        img1, img2 = full[:, :, :w].copy(), full[:, :, w:].copy()
    zeros = np.zeros((1, h, w))
    prov = {"task": task, "pristine": True}
    return ForgerySample(img1, img2, zeros.copy(), zeros.copy(), task, prov)


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


def perturb(img, kind, param, rng=None):
    """Photometric robustness perturbations; output clamped to [0,1].

    block_quant is a block-mean quantization proxy for lossy compression,
    not an actual codec.
    """
    img = np.asarray(img, dtype=np.float64)
    if kind == "brightness":
        if not -1.0 <= param <= 1.0:
            raise BadParameter(f"brightness shift {param} outside [-1, 1]")
        out = img + param
    elif kind == "contrast":
        if not 0.0 <= param <= 10.0:
            raise BadParameter(f"contrast gain {param} outside [0, 10]")
        out = (img - 0.5) * param + 0.5
    elif kind == "gaussian_noise":
        if not 0.0 <= param <= 1.0:
            raise BadParameter(f"noise sigma {param} outside [0, 1]")
        if param == 0.0:
            out = img.copy()
        else:
            if rng is None:
                raise BadParameter("gaussian_noise needs an rng")
            out = img + rng.normal(0.0, param, size=img.shape)
    elif kind == "blur":
        k = int(param)
        if k < 1 or k % 2 == 0:
            raise BadParameter(f"blur kernel must be odd and >= 1, got {param}")
        out = np.stack([_box_blur_2d(ch, k) for ch in img]) if img.ndim == 3 else _box_blur_2d(img, k)
    elif kind == "color_reduce":
        levels = int(param)
        if levels < 2:
            raise BadParameter(f"color_reduce needs >= 2 levels, got {param}")
        q = np.minimum(np.floor(img * levels), levels - 1)
        out = q / (levels - 1)
    elif kind == "block_quant":
        q = float(param)
        if q < 1:
            raise BadParameter(f"block_quant strength must be >= 1, got {param}")
        out = _block_quantize(img, q)
    else:
        raise BadParameter(f"unknown perturbation '{kind}'")
    return np.clip(out, 0.0, 1.0)


def _block_quantize(img, q, block=8):
    chans = img if img.ndim == 3 else img[None]
    out = np.empty_like(chans)
    _, h, w = chans.shape
    for c in range(chans.shape[0]):
        for y in range(0, h, block):
            for x in range(0, w, block):
                tile = chans[c, y : y + block, x : x + block]
                mean = tile.mean()
                out[c, y : y + block, x : x + block] = mean + np.round((tile - mean) * q) / q
    return out if img.ndim == 3 else out[0]


# ---------------------------------------------------------------------------
# dataset builder
# ---------------------------------------------------------------------------


def generate_sample(index, seed, image_size, task_mix, pristine_frac, base_kinds,
                    identity_spec=False, grid_align=None):
    """One deterministic sample from (seed, index)."""
    rng = np.random.default_rng([seed, index])
    tasks, weights = zip(*sorted(task_mix.items()))
    weights = np.asarray(weights, dtype=np.float64)
    task = str(rng.choice(tasks, p=weights / weights.sum()))
    kind = base_kinds[rng.integers(0, len(base_kinds))]
    h = w = image_size
    if rng.random() < pristine_frac:
        return pristine_pair(kind, h, w, rng, task=task)
    spec = AugmentationSpec() if identity_spec else AugmentationSpec.sample(rng)
    if task == "edd":
        base1 = base_image(kind, h, w, rng)
        base2 = base_image(kind, h, w, rng)
        return synth_edd(base1, base2, spec, rng, grid_align=grid_align)
    if task == "idd":
        base = base_image(kind, h, 2 * w, rng)
        return synth_idd_pseudo_pair(base, spec, rng)
    base_a = base_image(kind, h, 2 * w, rng)
    base_b = base_image(kind, h, 2 * w, rng)
    return synth_cstd(base_a, base_b, rng)


def generate_samples(count, seed, image_size=64, task_mix=None, pristine_frac=0.0,
                     base_kinds=BASE_KINDS, identity_spec=False, grid_align=None):
    task_mix = task_mix or {"edd": 1.0}
    return [
        generate_sample(i, seed, image_size, task_mix, pristine_frac, tuple(base_kinds),
                        identity_spec, grid_align)
        for i in range(count)
    ]


def build_dataset(out_dir, count, seed, image_size=64, task_mix=None, pristine_frac=0.0,
                  base_kinds=BASE_KINDS, identity_spec=False, grid_align=None):
    """Write samples and a provenance manifest; fully determined by config."""
    task_mix = task_mix or {"edd": 1.0}
    if not 0.0 <= pristine_frac <= 1.0:
        raise BadParameter(f"pristine_frac {pristine_frac} outside [0, 1]")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    entries = []
    for i in range(count):
        sample = generate_sample(
            i, seed, image_size, task_mix, pristine_frac, tuple(base_kinds),
            identity_spec, grid_align
        )
        files = {
            "img1": f"sample_{i:05d}_img1.ppm",
            "img2": f"sample_{i:05d}_img2.ppm",
            "mask1": f"sample_{i:05d}_mask1.pgm",
            "mask2": f"sample_{i:05d}_mask2.pgm",
        }
        netpbm.write_ppm(os.path.join(out_dir, files["img1"]), sample.img1)
        netpbm.write_ppm(os.path.join(out_dir, files["img2"]), sample.img2)
        netpbm.write_pgm(os.path.join(out_dir, files["mask1"]), sample.mask1)
        netpbm.write_pgm(os.path.join(out_dir, files["mask2"]), sample.mask2)
        entries.append(
            {
                "index": i,
                "task": sample.task,
                "manipulated": not sample.provenance.get("pristine", False),
                "files": files,
                "provenance": sample.provenance,
            }
        )
    manifest = {
        "count": count,
        "seed": seed,
        "image_size": image_size,
        "task_mix": task_mix,
        "pristine_frac": pristine_frac,
        "base_kinds": list(base_kinds),
        "identity_spec": identity_spec,
        "grid_align": grid_align,
        "samples": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(path):
    """Read a built dataset back as ForgerySamples (8-bit quantized)."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    samples = []
    for entry in manifest["samples"]:
        f = entry["files"]
        samples.append(
            ForgerySample(
                img1=netpbm.read_ppm(os.path.join(path, f["img1"])),
                img2=netpbm.read_ppm(os.path.join(path, f["img2"])),
                mask1=netpbm.read_pgm(os.path.join(path, f["mask1"]))[None],
                mask2=netpbm.read_pgm(os.path.join(path, f["mask2"]))[None],
                task=entry["task"],
                provenance=entry["provenance"],
            )
        )
    return samples, manifest


def dataset_digest(path):
    """SHA-256 over every file in the dataset directory (regeneration check)."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        fp = os.path.join(path, name)
        if os.path.isfile(fp):
            h.update(name.encode())
            with open(fp, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
