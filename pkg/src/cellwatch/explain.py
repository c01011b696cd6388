"""Saliency for trained detectors: Grad-CAM and attention heatmaps.

Grad-CAM (CNN families): backprop the chosen logit to the final conv
activations, weight each feature map by its spatial mean gradient, clamp
the weighted sum at zero, upsample bilinearly, normalize so the hottest
pixel is 1. Attention heatmaps (ViT): the class-token attention row of a
chosen encoder layer, averaged over heads, patch entries reshaped to the
patch grid and upsampled the same way.

Overlays blend the heatmap through the shared blue-to-red ramp over the
base image at fixed alpha and are written as lossless PNGs, including a
two-panel (input | overlay) export.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .dataset import unit_to_u8
from .errors import ShapeError
from .imaging import bilinear_resize
from .tensor import Tensor

OVERLAY_ALPHA = 0.45


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) float32 in [0, 1]
    source: str
    target: int


def normalize_map(raw):
    """Scale a non-negative map so its max is 1; an all-zero map stays
    zero. Applying this twice equals applying it once."""
    raw = np.asarray(raw, dtype=np.float32)
    m = float(raw.max(initial=0.0))
    return raw / m if m > 0 else np.zeros_like(raw)


def _as_batch(x):
    """Coerce to an (N, C, H, W) array; flag whether input was unbatched."""
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W) input, got {x.shape}")
    return x, single


def grad_cam(model, x, target):
    """Grad-CAM heatmaps for a batch; returns one Heatmap per sample.

    ``target`` is the logit index to explain (0 baseline, 1 runaway), a
    scalar or one per sample. Samples in a batch do not interact, so the
    heatmaps match the one-sample-at-a-time computation.
    """
    if model.spec.family not in ("cnn", "resnet"):
        raise ValueError(
            f"grad_cam supports the conv families, not {model.spec.family!r}; "
            "use attention_heatmap for the transformer"
        )
    xb, single = _as_batch(x)
    n = xb.shape[0]
    targets = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,))
    trace = model.forward(Tensor(xb, dtype=model.dtype))
    acts = trace.final_conv_activations
    picked = trace.logits[np.arange(n), targets]
    picked.sum().backward()
    grads = acts.grad  # (N, F, h, w)
    amaps = acts.data
    for p in model.parameters():
        p.grad = None
    size = model.spec.image_size
    out = []
    for i in range(n):
        alpha = grads[i].mean(axis=(1, 2))  # (F,)
        raw = np.maximum((alpha[:, None, None] * amaps[i]).sum(axis=0), 0.0)
        up = bilinear_resize(raw.astype(np.float64), size, size)
        out.append(
            Heatmap(values=normalize_map(up), source="gradcam:final_conv", target=int(targets[i]))
        )
    return out[0] if single else out


def attention_heatmap(model, x, layer=-1):
    """Class-token attention heatmap for one sample (or a batch).

    ``layer`` indexes the encoder stack (default last). Head dimension is
    averaged; the class token's self-entry is dropped before reshaping to
    the patch grid.
    """
    if model.spec.family != "vit":
        raise ValueError(f"attention_heatmap needs the vit family, got {model.spec.family!r}")
    depth = model.spec.depth
    if not -depth <= layer < depth:
        raise ValueError(f"layer {layer} out of range for depth {depth}")
    xb, single = _as_batch(x)
    with T.no_grad():
        trace = model.forward(Tensor(xb, dtype=model.dtype))
    attn = trace.attention_maps[layer].data  # (N, heads, T, T)
    grid = model.spec.image_size // model.spec.patch_size
    size = model.spec.image_size
    out = []
    for i in range(attn.shape[0]):
        cls_row = attn[i, :, 0, 1:].mean(axis=0)  # (patches,)
        patchmap = cls_row.reshape(grid, grid)
        up = bilinear_resize(patchmap.astype(np.float64), size, size)
        out.append(
            Heatmap(values=normalize_map(up), source=f"attention:layer{layer % depth}:headmean", target=-1)
        )
    return out[0] if single else out


def mass_fraction(heatmap, box):
    """Fraction of total heatmap mass inside box = (y0, y1, x0, x1)."""
    v = heatmap.values
    total = float(v.sum())
    if total == 0.0:
        return 0.0
    y0, y1, x0, x1 = box
    return float(v[y0:y1, x0:x1].sum()) / total


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _heat_color(values):
    """Shared blue-to-red ramp, warm = important (matches the IR ramp)."""
    v = np.asarray(values, dtype=np.float64)
    r = v
    g = 0.25 * (1.0 - np.abs(2.0 * v - 1.0))
    b = 1.0 - v
    return np.stack([r, g, b])


def overlay(heatmap, base):
    """Alpha-blend the colorized heatmap over a (3, H, W) base image in
    [0, 1]; returns (3, H, W) float32."""
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 3 or base.shape[0] != 3:
        raise ShapeError(f"base must be (3, H, W), got {base.shape}")
    if base.shape[1:] != heatmap.values.shape:
        raise ShapeError(
            f"heatmap {heatmap.values.shape} does not match base {base.shape[1:]}"
        )
    cmap = _heat_color(heatmap.values)
    blended = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * cmap
    return np.clip(blended, 0.0, 1.0).astype(np.float32)


def write_image(path, img):
    """Write a (3, H, W) float image in [0, 1] as a lossless PNG."""
    arr = unit_to_u8(np.asarray(img)).transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)
    return path


def side_by_side(base, heatmap):
    """Two-panel figure: input on the left, heatmap overlay on the right."""
    right = overlay(heatmap, base)
    left = np.asarray(base, dtype=np.float32)
    return np.concatenate([left, right], axis=2)


def contact_sheet(panels, columns=3):
    """Tile (3, H, W) panels row-major into one sheet (pads short rows)."""
    if not panels:
        raise ValueError("no panels to assemble")
    shapes = {p.shape for p in panels}
    if len(shapes) != 1:
        raise ShapeError(f"panels differ in shape: {sorted(shapes)}")
    c, h, w = panels[0].shape
    rows = -(-len(panels) // columns)
    sheet = np.zeros((c, rows * h, columns * w), dtype=np.float32)
    for i, p in enumerate(panels):
        r, col = divmod(i, columns)
        sheet[:, r * h : (r + 1) * h, col * w : (col + 1) * w] = p
    return sheet
