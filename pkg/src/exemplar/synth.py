"""Procedural natural-ish RGB images for demos and tests (no dataset download needed)."""
import numpy as np

from . import tensorimg


def random_image(rng, height=96, width=96, n_shapes=12):
    """Smooth colored background with random ellipses, bars and striped patches."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    c0, c1 = rng.random(3), rng.random(3)
    t = (xx * rng.normal() + yy * rng.normal()) / (width + height)
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(n_shapes):
        color = rng.random(3)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        kind = rng.integers(3)
        if kind == 0:
            ax, ay = rng.uniform(3, width / 4), rng.uniform(3, height / 4)
            th = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            mask = (u / ax) ** 2 + (v / ay) ** 2 <= 1
        elif kind == 1:
            th = rng.uniform(0, np.pi)
            d = np.abs((xx - cx) * np.sin(th) - (yy - cy) * np.cos(th))
            along = np.abs((xx - cx) * np.cos(th) + (yy - cy) * np.sin(th))
            mask = (d < rng.uniform(1, 4)) & (along < rng.uniform(8, width / 2))
        else:
            r = rng.uniform(6, width / 5)
            period = rng.uniform(3, 9)
            th = rng.uniform(0, np.pi)
            phase = ((xx * np.cos(th) + yy * np.sin(th)) / period) % 1.0
            mask = ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r) & (phase < 0.5)
        img[mask] = color
    img = tensorimg.gaussian_blur(img, 0.6)
    return np.clip(img, 0.0, 1.0)


def random_images(rng, count, height=96, width=96):
    return [random_image(rng, height, width) for _ in range(count)]
