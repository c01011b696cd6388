"""Small image-geometry helpers: resizing and affine warps.

Images are numpy arrays shaped (H, W) or (C, H, W). Affine transforms use
homogeneous 3x3 matrices over (x, y) pixel coordinates with x along
columns; warping inverts the forward matrix once and gathers with
bilinear interpolation, filling out-of-frame reads with a constant.
"""

import numpy as np


def nearest_resize(img, out_h, out_w):
    """Nearest-neighbour resample using half-pixel sample centers."""
    h, w = img.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return img[..., rows[:, None], cols[None, :]]


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample using half-pixel sample centers, edge-clamped."""
    h, w = img.shape[-2:]
    fy = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    fx = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(fy), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(fx), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(fy - y0, 0.0, 1.0)[:, None]
    wx = np.clip(fx - x0, 0.0, 1.0)[None, :]
    tl = img[..., y0[:, None], x0[None, :]]
    tr = img[..., y0[:, None], x1[None, :]]
    bl = img[..., y1[:, None], x0[None, :]]
    br = img[..., y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * wx
    bot = bl + (br - bl) * wx
    return (top + (bot - top) * wy).astype(img.dtype)


# -- affine matrices (homogeneous, about the image center) ------------------


def _about_center(mat2, h, w):
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    m = np.eye(3)
    m[:2, :2] = mat2
    m[0, 2] = cx - mat2[0, 0] * cx - mat2[0, 1] * cy
    m[1, 2] = cy - mat2[1, 0] * cx - mat2[1, 1] * cy
    return m


def flip_horizontal_matrix(h, w):
    """Reflection across the vertical axis through the image center."""
    return _about_center(np.array([[-1.0, 0.0], [0.0, 1.0]]), h, w)


def rotation_matrix(deg, h, w):
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return _about_center(np.array([[c, -s], [s, c]]), h, w)


def affine_matrix(deg, scale, shear_deg, h, w):
    """Rotation, then isotropic scale, then x-shear, composed about center."""
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    rot = np.array([[c, -s], [s, c]])
    sc = np.array([[scale, 0.0], [0.0, scale]])
    sh = np.array([[1.0, np.tan(np.deg2rad(shear_deg))], [0.0, 1.0]])
    return _about_center(sh @ sc @ rot, h, w)


def compose(*mats):
    """Compose forward maps applied left to right: compose(a, b) maps p -> b(a(p))."""
    out = np.eye(3)
    for m in mats:
        out = m @ out
    return out


def warp_bilinear(img, forward_mat, fill):
    """Apply a forward affine map with one bilinear resampling pass.

    ``fill`` is the value for samples that fall outside the source frame;
    scalar for (H, W) images, per-channel sequence for (C, H, W).
    """
    h, w = img.shape[-2:]
    inv = np.linalg.inv(forward_mat)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1

    def gather(channel, fill_value):
        def at(yy, xx):
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = channel[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)].astype(np.float64)
            return np.where(inside, vals, fill_value)

        top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx
        bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx
        return top * (1 - wy) + bot * wy

    if img.ndim == 2:
        return gather(img, float(fill)).astype(img.dtype)
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = gather(img[c], float(fill[c])).astype(img.dtype)
    return out


def border_mean(img):
    """Mean over the one-pixel frame; per-channel for (C, H, W) images."""
    if img.ndim == 2:
        edges = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
        return float(edges.mean())
    return [border_mean(img[c]) for c in range(img.shape[0])]
