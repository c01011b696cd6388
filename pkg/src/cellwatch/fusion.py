"""Infrared false-coloring and 6-channel optical/infrared fusion.

Temperatures map onto a fixed blue-to-red ramp over an absolute range
(default 20..90 degrees Celsius) rather than per-image min/max, so the
same color always means the same temperature and the 35 degree alarm
signal survives normalization. Fusion is plain channel concatenation:
channels 0..2 optical, channels 3..5 false-color infrared, both
recoverable by slicing.
"""

import numpy as np

from .errors import ShapeError

DEFAULT_IR_RANGE_C = (20.0, 90.0)


def ramp_position(temp, t_min=DEFAULT_IR_RANGE_C[0], t_max=DEFAULT_IR_RANGE_C[1]):
    """Normalized [0,1] position of each temperature on the color ramp."""
    if t_min >= t_max:
        raise ValueError(f"need t_min < t_max, got [{t_min}, {t_max}]")
    t = (np.asarray(temp, dtype=np.float64) - t_min) / (t_max - t_min)
    return np.clip(t, 0.0, 1.0)


def ir_to_falsecolor(temp, t_min=DEFAULT_IR_RANGE_C[0], t_max=DEFAULT_IR_RANGE_C[1]):
    """Map an (H, W) temperature map to a (3, H, W) float32 image in [0,1].

    The ramp runs blue (cold) to red (hot) with a mild green mid-bump for
    contrast. Position is recoverable from a pixel as (R - B + 1) / 2, so
    the mapping is invertible up to the clamp.
    """
    t = ramp_position(temp, t_min, t_max)
    r = t
    g = 0.25 * (1.0 - np.abs(2.0 * t - 1.0))
    b = 1.0 - t
    return np.stack([r, g, b]).astype(np.float32)


def fuse(optical, ir_rgb):
    """Concatenate a (3, H, W) optical image with a (3, H, W) false-color
    infrared image into a (6, H, W) representation."""
    optical = np.asarray(optical)
    ir_rgb = np.asarray(ir_rgb)
    if optical.ndim != 3 or optical.shape[0] != 3:
        raise ShapeError(f"optical must be (3, H, W), got {optical.shape}")
    if ir_rgb.ndim != 3 or ir_rgb.shape[0] != 3:
        raise ShapeError(f"ir_rgb must be (3, H, W), got {ir_rgb.shape}")
    if optical.shape[1:] != ir_rgb.shape[1:]:
        raise ShapeError(
            f"spatial dims differ: optical {optical.shape[1:]} vs infrared {ir_rgb.shape[1:]}"
        )
    return np.concatenate([optical, ir_rgb], axis=0)


INPUT_TYPES = ("optical", "infrared", "fusion")

INPUT_CHANNELS = {"optical": 3, "infrared": 3, "fusion": 6}


def sample_to_input(sample, input_type, ir_range=DEFAULT_IR_RANGE_C):
    """Build the (C, H, W) float32 model input for one sample."""
    if input_type not in INPUT_TYPES:
        raise ValueError(f"input_type must be one of {INPUT_TYPES}, got {input_type!r}")
    if input_type == "optical":
        return sample.optical.astype(np.float32)
    ir_rgb = ir_to_falsecolor(sample.infrared, *ir_range)
    if input_type == "infrared":
        return ir_rgb
    return fuse(sample.optical, ir_rgb).astype(np.float32)


def batch_to_input(samples, input_type, ir_range=DEFAULT_IR_RANGE_C):
    """Stack samples into an (N, C, H, W) float32 batch."""
    return np.stack([sample_to_input(s, input_type, ir_range) for s in samples])
