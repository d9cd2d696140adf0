"""Raster primitives: color conversion, interpolation, blur, pixel PCA, image I/O.

Images are plain numpy arrays of shape (height, width, channels), float64,
raw values in [0, 1].  Every function here is pure.
"""
from dataclasses import dataclass
import math

import numpy as np
from PIL import Image

from .errors import DegenerateInput


def as_plane(img):
    """Return ``img`` as a float (H, W, C) array, promoting 2-D input to one channel."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, C) raster, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


# ---------------------------------------------------------------- color ----

def rgb_to_hsv(rgb):
    """Hexcone HSV of RGB values in [0, 1]; works on (..., 3) arrays.

    Hue is returned in [0, 1) (degrees / 360).
    """
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    # (x % 1.0) can round up to exactly 1.0 for tiny negative x
    h = np.where(h >= 1.0, 0.0, h)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    """Inverse of :func:`rgb_to_hsv`; hue is taken modulo 1."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h = np.mod(hsv[..., 0], 1.0) * 6.0
    s = hsv[..., 1]
    v = hsv[..., 2]
    i = np.floor(h)
    f = h - i
    i = i.astype(np.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# ------------------------------------------------------- interpolation ----

def _bilinear(img, xs, ys):
    h, w = img.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def bilinear_sample(img, x, y):
    """Bilinearly interpolated pixel at continuous (column ``x``, row ``y``).

    Coordinates outside the raster are clamped to the nearest edge.
    """
    img = as_plane(img)
    return _bilinear(img, np.asarray(float(x)), np.asarray(float(y)))


def warp_affine(img, M, out_h, out_w):
    """Resample ``img`` through the inverse map ``M`` (2x3).

    Output pixel (r, c) takes the value at source column/row ``M @ (c, r, 1)``.
    """
    img = as_plane(img)
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (2, 3) or not np.all(np.isfinite(M)):
        raise ValueError("M must be a finite 2x3 matrix")
    rows, cols = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    xs = M[0, 0] * cols + M[0, 1] * rows + M[0, 2]
    ys = M[1, 0] * cols + M[1, 1] * rows + M[1, 2]
    return _bilinear(img, xs, ys)


def warp_points(img, xs, ys):
    """Sample ``img`` at arbitrary coordinate arrays (used for non-affine warps)."""
    return _bilinear(as_plane(img), np.asarray(xs, float), np.asarray(ys, float))


# ----------------------------------------------------------------- blur ----

def gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img, kernel, axis):
    radius = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img, sigma):
    """Separable Gaussian blur, kernel truncated at 3 sigma, edges clamped."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = as_plane(img)
    if sigma == 0:
        return img.copy()
    kernel = gaussian_kernel(sigma)
    return _convolve_axis(_convolve_axis(img, kernel, 0), kernel, 1)


# ------------------------------------------------------------------ PCA ----

@dataclass(frozen=True)
class PixelPCA:
    mean: np.ndarray        # (3,)
    components: np.ndarray  # (3, 3), rows are principal directions
    variances: np.ndarray   # (3,), non-increasing

    def project(self, pixels):
        return (np.asarray(pixels) - self.mean) @ self.components.T

    def reconstruct(self, coords):
        return np.asarray(coords) @ self.components + self.mean


def fit_pixel_pca(pixels):
    """Principal axes of a pixel cloud.

    Each component is signed so its largest-magnitude entry is positive.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if len(pixels) < 3:
        raise DegenerateInput("need at least 3 pixels")
    if np.all(pixels == pixels[0]):
        raise DegenerateInput("all pixels are identical")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / len(pixels)
    variances, vectors = np.linalg.eigh(cov)
    order = np.argsort(variances)[::-1]
    variances = np.clip(variances[order], 0.0, None)
    components = vectors[:, order].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PixelPCA(mean=mean, components=components, variances=variances)


# ------------------------------------------------------------ gradients ----

def gradient_energy_map(img):
    """Per-pixel squared gradient magnitude, averaged over channels.

    Central differences with replicated borders.
    """
    img = as_plane(img)
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    dy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return (dx * dx + dy * dy).mean(axis=2)


def gradient_energy(img, window, energy_map=None):
    """Mean squared gradient magnitude inside ``window = (row, col, height, width)``.

    ``energy_map`` may be passed to reuse a precomputed :func:`gradient_energy_map`.
    """
    r, c, h, w = window
    if energy_map is None:
        energy_map = gradient_energy_map(img)
    H, W = energy_map.shape
    if r < 0 or c < 0 or h < 1 or w < 1 or r + h > H or c + w > W:
        raise ValueError(f"window {window} outside image of size {H}x{W}")
    return float(energy_map[r:r + h, c:c + w].mean())


# ------------------------------------------------------------------ I/O ----

def read_image(path):
    """Load an 8-bit PNG/PPM/PGM into [0, 1] floats."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_plane(arr)


def write_image(path, img):
    img = as_plane(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)
