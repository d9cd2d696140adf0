"""Matching benchmark pairs: known transformations of a base image plus ground-truth mappings."""
from dataclasses import dataclass
import csv
import math
import struct

import numpy as np

from . import tensorimg
from .matching import EllipseRegion

PAIR_FAMILIES = ("rotation", "zoom", "perspective", "nonlinear", "lighting", "blur")

# four graded strengths per family
DEFAULT_MAGNITUDES = {
    "rotation": (10.0, 20.0, 40.0, 60.0),      # degrees
    "zoom": (1.25, 1.5, 2.0, 2.5),             # scale factor
    "perspective": (0.04, 0.08, 0.12, 0.16),   # corner shift / image size
    "nonlinear": (2.0, 4.0, 6.0, 8.0),         # displacement amplitude, px
    "lighting": (0.25, 0.5, 0.75, 1.0),        # gamma/gain strength
    "blur": (1.0, 2.0, 3.0, 4.0),              # sigma, px
}


class Homography:
    """Source -> target projective map."""

    kind = "homography"

    def __init__(self, H):
        self.H = np.asarray(H, dtype=np.float64) / H[2, 2]
        self.H_inv = np.linalg.inv(self.H)

    @staticmethod
    def _apply(H, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        q = pts @ H[:, :2].T + H[:, 2]
        return q[:, :2] / q[:, 2:3]

    def forward(self, pts):
        return self._apply(self.H, pts)

    def inverse(self, pts):
        return self._apply(self.H_inv, pts)

    def jacobian(self, pt):
        x, y = pt
        H = self.H
        w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
        px = H[0, 0] * x + H[0, 1] * y + H[0, 2]
        py = H[1, 0] * x + H[1, 1] * y + H[1, 2]
        return np.array([[H[0, 0] * w - px * H[2, 0], H[0, 1] * w - px * H[2, 1]],
                         [H[1, 0] * w - py * H[2, 0], H[1, 1] * w - py * H[2, 1]]]) / (w * w)

    def project(self, region):
        return _project(self, region)

    def to_text(self):
        return "homography\n" + "\n".join(" ".join(repr(float(v)) for v in row) for row in self.H) + "\n"


class DisplacementField:
    """Dense map given by its target -> source displacement grid.

    A target pixel p samples the source at p + d(p); d is bilinearly
    interpolated from the grid.  The source -> target direction is solved by
    fixed-point iteration.
    """

    kind = "displacement"

    def __init__(self, dx, dy):
        self.grid = np.stack([dx, dy], axis=-1).astype(np.float64)

    def _d(self, pts):
        pts = np.atleast_2d(pts)
        return tensorimg.warp_points(self.grid, pts[:, 0], pts[:, 1])

    def inverse(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return pts + self._d(pts)

    def forward(self, pts, iterations=50):
        x = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        p = x.copy()
        for _ in range(iterations):
            p = x - self._d(p)
        return p

    def jacobian(self, pt, eps=0.5):
        pt = np.asarray(pt, dtype=np.float64)
        J = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = eps
            J[:, k] = (self.forward(pt + e)[0] - self.forward(pt - e)[0]) / (2 * eps)
        return J

    def project(self, region):
        return _project(self, region)

    def to_bytes(self):
        h, w, _ = self.grid.shape
        return b"EXGRID" + struct.pack("<II", h, w) + self.grid.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf):
        if buf[:6] != b"EXGRID":
            raise ValueError("not an EXGRID file")
        h, w = struct.unpack_from("<II", buf, 6)
        g = np.frombuffer(buf, "<f4", h * w * 2, 14).reshape(h, w, 2)
        return cls(g[..., 0], g[..., 1])


def _project(mapping, region):
    """Local affine projection of an ellipse: A' = J^-T A J^-1 at the mapped center."""
    center = mapping.forward([region.u, region.v])[0]
    J = mapping.jacobian((region.u, region.v))
    Ji = np.linalg.inv(J)
    A = Ji.T @ region.matrix @ Ji
    theta = region.theta
    if theta is not None:
        d = J @ np.array([math.cos(theta), math.sin(theta)])
        theta = math.atan2(d[1], d[0])
    return EllipseRegion.from_matrix(center, A, theta)


IDENTITY = Homography(np.eye(3))


def _about_center(M, w, h):
    c = np.array([[1, 0, (w - 1) / 2], [0, 1, (h - 1) / 2], [0, 0, 1.0]])
    ci = np.array([[1, 0, -(w - 1) / 2], [0, 1, -(h - 1) / 2], [0, 0, 1.0]])
    return c @ M @ ci


def _corners_homography(src, dst):
    A = []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    _, _, vt = np.linalg.svd(np.asarray(A))
    return vt[-1].reshape(3, 3)


def warp_homography(img, mapping):
    h, w = img.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    src = mapping.inverse(np.stack([cols.ravel(), rows.ravel()], axis=1))
    return tensorimg.warp_points(img, src[:, 0], src[:, 1]).reshape(img.shape)


def warp_displacement(img, field):
    h, w = img.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    return tensorimg.warp_points(img, cols + field.grid[..., 0], rows + field.grid[..., 1])


def make_mapping(family, magnitude, width, height, rng=None):
    """Ground-truth mapping for one family/magnitude (identity for photometric families)."""
    if magnitude == 0 or family in ("lighting", "blur"):
        return IDENTITY
    if family == "rotation":
        t = math.radians(magnitude)
        M = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])
        return Homography(_about_center(M, width, height))
    if family == "zoom":
        M = np.diag([magnitude, magnitude, 1.0])
        return Homography(_about_center(M, width, height))
    if family == "perspective":
        rng = np.random.default_rng(0) if rng is None else rng
        src = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], float)
        angles = rng.uniform(0, 2 * math.pi, 4)
        shift = magnitude * np.array([width, height])
        dst = src + shift * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return Homography(_corners_homography(src, dst))
    if family == "nonlinear":
        rng = np.random.default_rng(0) if rng is None else rng
        wavelength = max(width, height) / 3.0
        phase = rng.uniform(0, 2 * math.pi, 2)
        rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
        dx = magnitude * np.sin(2 * math.pi * rows / wavelength + phase[0])
        dy = magnitude * np.sin(2 * math.pi * cols / wavelength + phase[1])
        return DisplacementField(dx, dy)
    raise ValueError(f"unknown family {family!r}")


@dataclass
class PairSpec:
    family: str
    magnitude: float
    image: np.ndarray
    mapping: object


def apply_family(base, family, magnitude, rng=None):
    h, w = base.shape[:2]
    mapping = make_mapping(family, magnitude, w, h, rng)
    if magnitude == 0:
        return base.copy(), mapping
    if family == "lighting":
        gamma = 1.0 + magnitude
        gain = 1.0 - 0.4 * magnitude
        return np.clip(gain * base ** gamma, 0, 1), mapping
    if family == "blur":
        return tensorimg.gaussian_blur(base, magnitude), mapping
    if isinstance(mapping, Homography):
        return warp_homography(base, mapping), mapping
    return warp_displacement(base, mapping), mapping


def generate_pairs(base, families=PAIR_FAMILIES, magnitudes=None, rng=None):
    """Transformed versions of ``base`` with their source -> target mappings."""
    base = tensorimg.as_plane(base)
    if min(base.shape[:2]) <= 256:
        raise ValueError("base image must be larger than 256x256")
    rng = np.random.default_rng(0) if rng is None else rng
    out = []
    for family in families:
        mags = DEFAULT_MAGNITUDES[family] if magnitudes is None else magnitudes.get(
            family, DEFAULT_MAGNITUDES[family])
        for m in mags:
            img, mapping = apply_family(base, family, float(m), rng)
            out.append(PairSpec(family, float(m), img, mapping))
    return out


def random_regions(img, n, rng, radius_range=(6.0, 20.0), margin=24):
    """Random textured-area ellipses standing in for detector output."""
    img = tensorimg.as_plane(img)
    h, w = img.shape[:2]
    emap = tensorimg.gradient_energy_map(img)
    weights = emap[margin:h - margin, margin:w - margin].ravel() + 1e-12
    idx = rng.choice(len(weights), size=n, replace=False, p=weights / weights.sum())
    rows, cols = np.divmod(idx, w - 2 * margin)
    out = []
    for r, c in zip(rows + margin, cols + margin):
        r1, r2 = rng.uniform(*radius_range, 2)
        t = rng.uniform(0, math.pi)
        R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        A = R @ np.diag([1 / r1 ** 2, 1 / r2 ** 2]) @ R.T
        out.append(EllipseRegion.from_matrix((float(c), float(r)), A))
    return out


def save_mapping(path, mapping):
    if isinstance(mapping, Homography):
        with open(path, "w") as fh:
            fh.write(mapping.to_text())
    else:
        with open(path, "wb") as fh:
            fh.write(mapping.to_bytes())


def load_mapping(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf.startswith(b"EXGRID"):
        return DisplacementField.from_bytes(buf)
    lines = buf.decode().split("\n")
    if lines[0].strip() != "homography":
        raise ValueError(f"{path}: unknown mapping format")
    return Homography(np.array([[float(t) for t in l.split()] for l in lines[1:4]]))


def write_manifest(path, rows):
    """rows: (pair_id, family, magnitude, base_image, target_image, mapping_file)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "family", "magnitude", "base", "image", "mapping"])
        w.writerows(rows)


def read_manifest(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
