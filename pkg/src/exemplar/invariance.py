"""Feature invariance curves under transformations of growing magnitude."""
from dataclasses import dataclass
import csv

import numpy as np

from . import classify, transforms
from .errors import ZeroFeature

NORM_FLOOR = 1e-12
DEFAULT_PATCH_COUNT = 500


def family_params(family, patch_size=32):
    """Full-magnitude (t = 1) parameters and the t grid for one transformation family.

    Translation reaches 1/8 of the patch size (8 px on 64-px patches) in
    one-pixel steps at 64 px; rotation reaches 20 degrees in 2.5 degree
    steps; the photometric families use t in {0, 1/8, ..., 1}.
    """
    eighths = np.linspace(0.0, 1.0, 9)
    if family == "translation":
        shift = patch_size // 8
        return transforms.TransformParams(dx=shift / patch_size), np.arange(shift + 1) / shift
    if family == "rotation":
        return transforms.TransformParams(angle=20.0), eighths
    if family == "contrast":
        return transforms.TransformParams(pca_mul=(2.0, 2.0, 2.0)), eighths
    if family == "saturation":
        return transforms.TransformParams(s_pow=4.0), eighths
    if family == "color":
        return transforms.TransformParams(hue_shift=0.1), eighths
    raise ValueError(f"unknown family {family!r}")


INVARIANCE_FAMILIES = ("translation", "rotation", "contrast", "saturation", "color")


@dataclass
class InvarianceCurve:
    family: str
    magnitudes: np.ndarray
    raw_distances: np.ndarray
    normalized: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["magnitude", "raw", "normalized"])
            for row in zip(self.magnitudes, self.raw_distances, self.normalized):
                w.writerow([repr(float(v)) for v in row])


def _unit(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    if n <= NORM_FLOOR:
        # a constant zero feature would look perfectly invariant
        raise ZeroFeature("feature vector has (near) zero norm")
    return v / n


def raw_distances(extractor, patches, params, magnitudes, pca=None):
    """Mean Euclidean distance between unit-normalized features of each patch and its transform."""
    base = [_unit(extractor(p)) for p in patches]
    out = []
    for t in magnitudes:
        p_t = transforms.magnitude_scaled(params, float(t))
        d = [np.linalg.norm(_unit(extractor(transforms.apply(p_t, p, pca=pca))) - b)
             for p, b in zip(patches, base)]
        out.append(float(np.mean(d)))
    return np.array(out)


def distance_curve(extractor, patches, family, magnitudes=None, pca=None, params=None):
    """Normalized invariance curve for ``family``; ``magnitudes`` are t values in [0, 1]."""
    if len(patches) < 1:
        raise ValueError("need at least one patch")
    default_params, grid = family_params(family, patches[0].shape[0])
    params = default_params if params is None else params
    mags = grid if magnitudes is None else np.asarray(magnitudes, dtype=np.float64)
    if not np.any(mags == 0):
        raise ValueError("magnitudes must include 0")
    raw = raw_distances(extractor, patches, params, mags, pca)
    peak = raw.max()
    if peak <= 0:
        raise ZeroFeature("features do not change at any magnitude; curve cannot be normalized")
    return InvarianceCurve(family, mags, raw, raw / peak)


def accuracy_vs_magnitude(model, extractor, patches, labels, family, magnitudes=None, pca=None,
                          params=None):
    """Test accuracy of a fixed classifier on increasingly transformed test patches."""
    default_params, grid = family_params(family, patches[0].shape[0])
    params = default_params if params is None else params
    mags = grid if magnitudes is None else np.asarray(magnitudes, dtype=np.float64)
    acc = []
    for t in mags:
        p_t = transforms.magnitude_scaled(params, float(t))
        feats = np.array([extractor(transforms.apply(p_t, p, pca=pca)) for p in patches])
        acc.append(classify.accuracy(model, feats, labels)[0])
    return mags, np.array(acc)
