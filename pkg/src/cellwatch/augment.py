"""Probabilistic pair augmentation and upsampling with replacement.

The pipeline, in order: horizontal reflection (coin flip), fixed 25 degree
rotation (coin flip), random affine rotation+scale+shear (coin flip),
Gaussian blur (always), salt-and-pepper noise (coin flip). The geometric
steps share one set of draws across the optical and infrared channels so
the pair stays aligned; they compose into a single bilinear resampling so
the image is interpolated at most once. Blur and noise draw independently
per channel group. Out-of-frame regions fill with the source image's
border mean.

Each sample owns an rng stream derived from (seed, sample index), so
augmenting in any order, or in parallel, produces identical outputs.
"""

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imaging
from .dataset import Dataset, Sample
from .seeding import spawn_rng


@dataclass
class AugmentConfig:
    p_step: float = 0.5
    fixed_rotation_deg: float = 25.0
    affine_rotation_deg: float = 15.0
    affine_scale: tuple = (0.9, 1.1)
    affine_shear_deg: float = 10.0
    blur_sigma: tuple = (0.5, 1.5)
    salt_pepper_fraction: float = 0.02
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.p_step <= 1.0:
            raise ValueError(f"p_step {self.p_step} outside [0, 1]")
        lo, hi = self.affine_scale
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ValueError(f"bad affine_scale range {self.affine_scale}")
        lo, hi = self.blur_sigma
        if lo < 0 or lo > hi:
            raise ValueError(f"bad blur_sigma range {self.blur_sigma}")
        if not 0.0 <= self.salt_pepper_fraction <= 0.5:
            raise ValueError(
                f"salt_pepper_fraction {self.salt_pepper_fraction} outside [0, 0.5]"
            )
        return self

    def to_dict(self):
        d = asdict(self)
        d["affine_scale"] = list(self.affine_scale)
        d["blur_sigma"] = list(self.blur_sigma)
        return d

    @staticmethod
    def from_dict(d):
        cfg = AugmentConfig(**d)
        cfg.affine_scale = tuple(cfg.affine_scale)
        cfg.blur_sigma = tuple(cfg.blur_sigma)
        return cfg.validate()


def _salt_pepper(img, fraction, low, high, rng):
    """Replace ~fraction of pixels, half with low and half with high.
    For (C, H, W) images the same pixel flips across all channels."""
    if img.ndim == 3:
        h, w = img.shape[1], img.shape[2]
    else:
        h, w = img.shape
    u = rng.random((h, w))
    pepper = u < fraction / 2.0
    salt = (u >= fraction / 2.0) & (u < fraction)
    out = img.copy()
    if img.ndim == 3:
        out[:, pepper] = low
        out[:, salt] = high
    else:
        out[pepper] = low
        out[salt] = high
    return out


def augment_sample(sample, config, rng):
    """Apply one augmentation pass to an aligned optical/infrared pair.

    ``rng`` is the sample's private stream; consuming it advances the
    pipeline's randomness, so pass a freshly spawned stream per call.
    """
    config.validate()
    opt = sample.optical.astype(np.float64)
    ir = sample.infrared.astype(np.float64)
    h, w = ir.shape

    do_flip = rng.random() < config.p_step
    do_rot = rng.random() < config.p_step
    do_affine = rng.random() < config.p_step
    aff_deg = rng.uniform(-config.affine_rotation_deg, config.affine_rotation_deg)
    aff_scale = rng.uniform(*config.affine_scale)
    aff_shear = rng.uniform(-config.affine_shear_deg, config.affine_shear_deg)

    mats = []
    if do_flip:
        mats.append(imaging.flip_horizontal_matrix(h, w))
    if do_rot:
        mats.append(imaging.rotation_matrix(config.fixed_rotation_deg, h, w))
    if do_affine:
        mats.append(imaging.affine_matrix(aff_deg, aff_scale, aff_shear, h, w))
    if mats:
        m = imaging.compose(*mats)
        opt = imaging.warp_bilinear(opt, m, fill=imaging.border_mean(opt))
        ir = imaging.warp_bilinear(ir, m, fill=imaging.border_mean(ir))

    sigma_opt = rng.uniform(*config.blur_sigma)
    sigma_ir = rng.uniform(*config.blur_sigma)
    opt = np.stack([gaussian_filter(ch, sigma_opt) for ch in opt])
    ir = gaussian_filter(ir, sigma_ir)

    do_sp = rng.random() < config.p_step
    if do_sp:
        opt = _salt_pepper(opt, config.salt_pepper_fraction, 0.0, 1.0, rng)
        ir = _salt_pepper(ir, config.salt_pepper_fraction, ir.min(), ir.max(), rng)

    return Sample(
        sample_id=sample.sample_id,
        optical=np.clip(opt, 0.0, 1.0).astype(np.float32),
        infrared=ir.astype(np.float32),
        label=sample.label,
        split=sample.split,
        provenance=dict(
            sample.provenance,
            augmented={
                "flip": do_flip,
                "rotation_25": do_rot,
                "affine": do_affine,
                "salt_pepper": do_sp,
            },
        ),
    )


def upsample_with_replacement(dataset, target_size, seed):
    """Enlarge a dataset by uniform draws (with replacement) of its samples.

    Returns (new dataset, source index list). Entries are shallow
    references to the source samples; augment afterwards to decorrelate.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot upsample an empty dataset")
    if target_size <= 0:
        raise ValueError(f"target size must be positive, got {target_size}")
    rng = spawn_rng(seed, "upsample")
    idx = rng.integers(0, n, size=int(target_size))
    samples = [dataset.samples[i] for i in idx]
    out = Dataset(
        samples=samples,
        image_size=dataset.image_size,
        root_seed=dataset.root_seed,
        generator_version=dataset.generator_version,
    )
    return out, [int(i) for i in idx]


def upsample_and_augment(dataset, factor, config):
    """Upsample to ``factor`` times the source size, then augment every
    drawn copy with its own stream. This is the train-time path behind the
    Table-style "upsampled + augmented" dataset variant."""
    config.validate()
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    up, idx = upsample_with_replacement(dataset, factor * len(dataset), config.seed)
    out = []
    for i, src in enumerate(up.samples):
        s = augment_sample(src, config, spawn_rng(config.seed, "augment", i))
        s = Sample(
            sample_id=f"{src.sample_id}+aug{i:06d}",
            optical=s.optical,
            infrared=s.infrared,
            label=s.label,
            split=src.split,
            provenance=dict(s.provenance, source_id=src.sample_id, source_index=idx[i]),
        )
        out.append(s)
    return Dataset(
        samples=out,
        image_size=dataset.image_size,
        root_seed=dataset.root_seed,
        generator_version=dataset.generator_version,
    )
