"""Surrogate training set: textured seed patches, K transformed copies each, mean subtraction."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import hashlib
import math
import struct

import numpy as np

from . import tensorimg, transforms
from .errors import InsufficientTexture

MAX_REJECTIONS = 10 ** 6
WARMUP_PROPOSALS = 256


@dataclass(frozen=True)
class SeedWindow:
    image: int   # index into the image list
    row: int
    col: int
    size: int    # side of the (square) source window before resampling


@dataclass
class SurrogateDataset:
    data: np.ndarray          # (N*K, P, P, C) float32, mean-subtracted
    labels: np.ndarray        # (N*K,) int64
    pixel_mean: np.ndarray    # (P, P, C)
    pca: tensorimg.PixelPCA
    n_classes: int
    samples_per_class: int
    seeds: list = field(default_factory=list)    # per class SeedWindow
    params: list = field(default_factory=list)   # per sample TransformParams

    @property
    def patch_size(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[3]

    def __len__(self):
        return len(self.labels)

    def class_indices(self, i):
        return np.flatnonzero(self.labels == i)

    def subset(self, idx):
        """Dataset restricted to sample indices ``idx`` (class sizes may become unequal)."""
        idx = np.asarray(idx)
        params = [self.params[i] for i in idx] if self.params else []
        k = len(idx) // self.n_classes if len(idx) % self.n_classes == 0 else 0
        return SurrogateDataset(self.data[idx], self.labels[idx], self.pixel_mean, self.pca,
                                self.n_classes, k, self.seeds, params)


def _window_energy(emap, row, col, size):
    return float(emap[row:row + size, col:col + size].mean())


def sample_seed_windows(images, n, patch_size, scale_range=(0.7, 1.4), rng=None,
                        energy_maps=None):
    """Pick ``n`` windows with probability proportional to their mean squared gradient.

    Adaptive rejection sampling: proposals are uniform over (image, scale,
    position) and accepted with probability energy / ceiling, where the
    ceiling is the largest energy seen so far (seeded by a warm-up batch of
    proposals).  Returns a list of :class:`SeedWindow`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    if energy_maps is None:
        energy_maps = [tensorimg.gradient_energy_map(im) for im in images]
    lo, hi = scale_range
    for im in images:
        if min(im.shape[:2]) <= patch_size:
            raise ValueError("every image must be larger than the patch size")

    def propose():
        i = int(rng.integers(len(images)))
        h, w = energy_maps[i].shape
        size = int(round(patch_size * (lo + (hi - lo) * rng.random())))
        size = max(1, min(size, h, w))
        r = int(rng.integers(h - size + 1))
        c = int(rng.integers(w - size + 1))
        return SeedWindow(i, r, c, size)

    ceiling = 0.0
    for _ in range(WARMUP_PROPOSALS):
        win = propose()
        ceiling = max(ceiling, _window_energy(energy_maps[win.image], win.row, win.col, win.size))

    out = []
    rejections = 0
    while len(out) < n:
        win = propose()
        e = _window_energy(energy_maps[win.image], win.row, win.col, win.size)
        if e > ceiling:
            ceiling = e
        if e > 0 and rng.random() * ceiling < e:
            out.append(win)
            rejections = 0
        else:
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise InsufficientTexture(
                    f"{MAX_REJECTIONS} consecutive rejections; images lack gradient energy")
    return out


def crop_window(image, win, patch_size):
    """Cut out ``win`` and resample it to ``patch_size`` squared."""
    crop = image[win.row:win.row + win.size, win.col:win.col + win.size]
    if win.size == patch_size:
        return np.array(crop, dtype=np.float64)
    s = win.size / patch_size
    # pixel-center alignment: src = (dst + 0.5) * s - 0.5
    M = np.array([[s, 0.0, 0.5 * s - 0.5], [0.0, s, 0.5 * s - 0.5]])
    return tensorimg.warp_affine(crop, M, patch_size, patch_size)


def sample_seeds(images, n, patch_size=32, scale_range=(0.7, 1.4), rng=None):
    """Seed patches and their provenance, as a list of ``(patch, SeedWindow)``."""
    images = [tensorimg.as_plane(im) for im in images]
    wins = sample_seed_windows(images, n, patch_size, scale_range, rng)
    return [(crop_window(images[w.image], w, patch_size), w) for w in wins]


def fit_dataset_pca(patches):
    return tensorimg.fit_pixel_pca(np.concatenate([p.reshape(-1, 3) for p in patches]))


def build_dataset(seeds, k, ranges=None, rng=None, pca=None, workers=1):
    """Materialize K transformed samples for every seed and subtract the per-pixel mean.

    ``seeds`` is the output of :func:`sample_seeds` (or bare patches).  Each
    seed draws its parameters from its own child generator, so the result
    does not depend on processing order or on ``workers``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ranges = transforms.TransformRanges() if ranges is None else ranges
    rng = np.random.default_rng() if rng is None else rng
    patches = [s[0] if isinstance(s, tuple) else s for s in seeds]
    windows = [s[1] if isinstance(s, tuple) else None for s in seeds]
    if pca is None:
        pca = fit_dataset_pca(patches)
    size = patches[0].shape[0]
    n = len(patches)
    data = np.empty((n * k, size, size, patches[0].shape[2]), dtype=np.float64)
    labels = np.repeat(np.arange(n, dtype=np.int64), k)
    params = [None] * (n * k)

    def augment(i, patch, sub):
        for j in range(k):
            p = transforms.sample_params(ranges, sub)
            data[i * k + j] = transforms.apply(p, patch, size, pca)
            params[i * k + j] = p

    jobs = list(zip(range(n), patches, rng.spawn(n)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda job: augment(*job), jobs))
    else:
        for job in jobs:
            augment(*job)
    pixel_mean = data.mean(axis=0)
    data -= pixel_mean
    return SurrogateDataset(data.astype(np.float32), labels, pixel_mean, pca, n, k,
                            windows, params)


def split_validation(ds, frac=0.1, rng=None):
    """Per-class split; each class keeps ceil((1 - frac) K) training samples, capped at K - 1."""
    if not 0 < frac < 1:
        raise ValueError("frac must lie in (0, 1)")
    k = ds.samples_per_class
    if k < 2:
        raise ValueError("need at least 2 samples per class to split")
    n_train = min(math.ceil((1 - frac) * k), k - 1)
    rng = np.random.default_rng(0) if rng is None else rng
    train_idx, val_idx = [], []
    for i in range(ds.n_classes):
        idx = ds.class_indices(i)
        idx = idx[rng.permutation(len(idx))]
        train_idx.append(np.sort(idx[:n_train]))
        val_idx.append(np.sort(idx[n_train:]))
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(val_idx))


# ------------------------------------------------------------------ EXDS ----

EXDS_MAGIC = b"EXDS"
EXDS_VERSION = 1


def save_exds(ds, path):
    """Write the binary dataset file (little endian)."""
    n, k = ds.n_classes, ds.samples_per_class
    if len(ds) != n * k:
        raise ValueError("only complete datasets (N*K samples) can be saved")
    with open(path, "wb") as fh:
        fh.write(EXDS_MAGIC)
        fh.write(struct.pack("<5I", EXDS_VERSION, n, k, ds.patch_size, ds.channels))
        fh.write(np.asarray(ds.pixel_mean, dtype="<f4").tobytes())
        pca_block = np.concatenate([ds.pca.mean, ds.pca.components.ravel(), ds.pca.variances])
        fh.write(pca_block.astype("<f4").tobytes())
        for label, sample in zip(ds.labels, ds.data):
            fh.write(struct.pack("<I", int(label)))
            fh.write(np.asarray(sample, dtype="<f4").tobytes())


def load_exds(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != EXDS_MAGIC:
        raise ValueError(f"{path}: not an EXDS file")
    version, n, k, p, c = struct.unpack_from("<5I", buf, 4)
    if version != EXDS_VERSION:
        raise ValueError(f"unsupported EXDS version {version}")
    off = 24
    plane = p * p * c
    pixel_mean = np.frombuffer(buf, "<f4", plane, off).reshape(p, p, c).astype(np.float64)
    off += 4 * plane
    block = np.frombuffer(buf, "<f4", 15, off).astype(np.float64)
    off += 60
    pca = tensorimg.PixelPCA(block[:3], block[3:12].reshape(3, 3), block[12:])
    rec = np.dtype([("label", "<u4"), ("pix", "<f4", (plane,))])
    records = np.frombuffer(buf, rec, n * k, off)
    data = records["pix"].reshape(n * k, p, p, c).astype(np.float32)
    labels = records["label"].astype(np.int64)
    return SurrogateDataset(data, labels, pixel_mean, pca, n, k)


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
