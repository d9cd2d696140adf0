"""Descriptor matching benchmark: elliptic regions, normalized patches, greedy matching, AP."""
from dataclasses import dataclass, field
import csv
from fractions import Fraction
import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import tensorimg
from .errors import EmptyGroundTruth, InvalidEllipse, OutOfBounds, ParseError

IOU_THRESHOLD = 0.5
BORDER_FILL = 20.0 / 21.0
ORIENTATION_BINS = 36


@dataclass(frozen=True)
class EllipseRegion:
    """Points with a(x-u)^2 + 2b(x-u)(y-v) + c(y-v)^2 <= 1."""
    u: float
    v: float
    a: float
    b: float
    c: float
    theta: float = None

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0 and self.a * self.c - self.b * self.b > 0):
            raise InvalidEllipse(f"not positive definite: a={self.a} b={self.b} c={self.c}")

    @classmethod
    def circle(cls, u, v, r, theta=None):
        return cls(u, v, 1.0 / (r * r), 0.0, 1.0 / (r * r), theta)

    @classmethod
    def from_matrix(cls, center, A, theta=None):
        return cls(float(center[0]), float(center[1]), float(A[0, 0]),
                   float(0.5 * (A[0, 1] + A[1, 0])), float(A[1, 1]), theta)

    @property
    def matrix(self):
        return np.array([[self.a, self.b], [self.b, self.c]])

    @property
    def det(self):
        return self.a * self.c - self.b * self.b

    @property
    def area(self):
        return math.pi / math.sqrt(self.det)

    def half_extent(self):
        """Half widths of the axis-aligned bounding box (x, y)."""
        return math.sqrt(self.c / self.det), math.sqrt(self.a / self.det)

    def chord(self, y):
        """x-interval [lo, hi] of the ellipse on rows ``y`` (NaN where the row misses)."""
        dy = np.asarray(y, dtype=np.float64) - self.v
        disc = self.a - self.det * dy * dy
        root = np.sqrt(np.where(disc >= 0, disc, np.nan))
        lo = self.u + (-self.b * dy - root) / self.a
        hi = self.u + (-self.b * dy + root) / self.a
        return lo, hi


# ------------------------------------------------------------ region files ----

def parse_regions(path):
    """Read an ``exreg v1`` region file."""
    with open(path) as fh:
        return parse_regions_text(fh.read())


def parse_regions_text(text):
    """Header line ``exreg v1``, then one ``u v a b c [theta]`` line per region."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "exreg v1":
        raise ParseError("missing 'exreg v1' header", (1, 1))
    regions = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) not in (5, 6):
            raise ParseError(f"expected 5 or 6 numbers, got {len(tokens)}", (lineno, 1))
        vals = []
        col = 1
        for tok in tokens:
            col = line.index(tok, col - 1) + 1
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(f"not a number: {tok!r}", (lineno, col)) from None
            col += len(tok)
        try:
            regions.append(EllipseRegion(*vals))
        except InvalidEllipse as e:
            raise InvalidEllipse(f"line {lineno}: {e}") from None
    return regions


def format_regions(regions):
    out = ["exreg v1"]
    for r in regions:
        vals = [r.u, r.v, r.a, r.b, r.c] + ([] if r.theta is None else [r.theta])
        out.append(" ".join(f"{x:.6g}" for x in vals))
    return "\n".join(out) + "\n"


def write_regions(path, regions):
    with open(path, "w") as fh:
        fh.write(format_regions(regions))


# -------------------------------------------------------- patch extraction ----

def _inv_sqrt(A):
    w, V = np.linalg.eigh(A)
    return V @ np.diag(1.0 / np.sqrt(w)) @ V.T


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _shape_normalizing_map(region, out_size, theta):
    """2x3 map patch pixel -> image pixel sending the patch disk onto the ellipse."""
    radius = out_size * BORDER_FILL / 2.0
    L = _inv_sqrt(region.matrix) @ _rot(theta) / radius
    cc = (out_size - 1) / 2.0
    offset = np.array([region.u, region.v]) - L @ np.array([cc, cc])
    return np.hstack([L, offset[:, None]])


def dominant_orientation(img, region, size=41):
    """Peak of a 36-bin, magnitude-weighted gradient orientation histogram inside the region."""
    patch = tensorimg.warp_affine(img, _shape_normalizing_map(region, size, 0.0), size, size)
    gray = patch.mean(axis=2)
    gy, gx = np.gradient(gray)
    cc = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    inside = (xx - cc) ** 2 + (yy - cc) ** 2 <= (size * BORDER_FILL / 2.0) ** 2
    angles = np.arctan2(gy, gx)[inside] % (2 * math.pi)
    hist = np.bincount((angles / (2 * math.pi) * ORIENTATION_BINS).astype(int) % ORIENTATION_BINS,
                       weights=np.hypot(gx, gy)[inside], minlength=ORIENTATION_BINS)
    return (np.argmax(hist) + 0.5) * 2 * math.pi / ORIENTATION_BINS


def normalize_patch(img, region, out_size=113):
    """Warp the region to a centered upright disk filling 20/21 of an ``out_size`` patch."""
    img = tensorimg.as_plane(img)
    h, w = img.shape[:2]
    if not (0 <= region.u <= w - 1 and 0 <= region.v <= h - 1):
        raise OutOfBounds(f"region center ({region.u}, {region.v}) outside {w}x{h} image")
    theta = dominant_orientation(img, region) if region.theta is None else region.theta
    return tensorimg.warp_affine(img, _shape_normalizing_map(region, out_size, theta),
                                 out_size, out_size)


# --------------------------------------------------------------------- IOU ----

def _intersection_area(e1, e2, rows):
    h1, h2 = e1.half_extent()[1], e2.half_extent()[1]
    y0 = max(e1.v - h1, e2.v - h2)
    y1 = min(e1.v + h1, e2.v + h2)
    if y1 <= y0:
        return 0.0
    dy = (y1 - y0) / rows
    ys = y0 + (np.arange(rows) + 0.5) * dy
    lo1, hi1 = e1.chord(ys)
    lo2, hi2 = e2.chord(ys)
    width = np.minimum(hi1, hi2) - np.maximum(lo1, lo2)
    return float(np.nansum(np.clip(width, 0.0, None)) * dy)


def ellipse_iou(e1, e2, tol=1e-5, max_rows=1 << 16):
    """Intersection over union of two elliptic regions.

    The intersection is integrated row by row with exact chord intervals
    (midpoint rule), doubling the row count until it changes by less than
    ``tol`` relative to the union; the ellipse areas are analytic.
    """
    if (e1.u, e1.v, e1.a, e1.b, e1.c) == (e2.u, e2.v, e2.a, e2.b, e2.c):
        return 1.0
    w1, h1 = e1.half_extent()
    w2, h2 = e2.half_extent()
    if abs(e1.u - e2.u) >= w1 + w2 or abs(e1.v - e2.v) >= h1 + h2:
        return 0.0
    rows = 64
    prev = _intersection_area(e1, e2, rows)
    while True:
        rows *= 2
        cur = _intersection_area(e1, e2, rows)
        union = e1.area + e2.area - cur
        if abs(cur - prev) <= tol * union or rows >= max_rows:
            break
        prev = cur
    return float(min(max(cur / union, 0.0), 1.0))


# ---------------------------------------------------------------- matching ----

def distance_matrix(desc_a, desc_b):
    return cdist(np.asarray(desc_a, dtype=np.float64), np.asarray(desc_b, dtype=np.float64))


def greedy_match(desc_a, desc_b):
    """Repeatedly take the globally closest remaining pair; returns [(i, j, distance), ...].

    Ties are broken by lower ``i``, then lower ``j``.
    """
    d = distance_matrix(desc_a, desc_b)
    if d.size == 0:
        raise ValueError("descriptor sets must be non-empty")
    ii, jj = np.meshgrid(np.arange(d.shape[0]), np.arange(d.shape[1]), indexing="ij")
    order = np.lexsort((jj.ravel(), ii.ravel(), d.ravel()))
    used_a = np.zeros(d.shape[0], bool)
    used_b = np.zeros(d.shape[1], bool)
    pairs = []
    for k in order:
        i, j = ii.flat[k], jj.flat[k]
        if used_a[i] or used_b[j]:
            continue
        used_a[i] = used_b[j] = True
        pairs.append((int(i), int(j), float(d.flat[k])))
        if used_a.all() or used_b.all():
            break
    return pairs


@dataclass
class MatchRanking:
    pairs: list                 # (region_a, region_b, distance, is_true_positive)
    n_achievable: int
    iou: np.ndarray = field(default=None, repr=False)

    @property
    def flags(self):
        return np.array([p[3] for p in self.pairs], dtype=bool)


def precision_recall(flags, n_achievable):
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return tp / ranks, tp / n_achievable


def average_precision(flags, n_achievable):
    """Sum of precision at each true-positive rank, divided by the achievable match count.

    Accumulated in exact rational arithmetic and rounded once, so the result
    is the float nearest the true value.
    """
    if n_achievable <= 0:
        raise EmptyGroundTruth("no region pair reaches the IOU threshold")
    ranks = np.flatnonzero(np.asarray(flags, dtype=bool)) + 1
    total = sum((Fraction(tp, int(r)) for tp, r in enumerate(ranks, start=1)), Fraction(0))
    return float(total / n_achievable)


def max_matching(ok):
    """Size of a maximum-cardinality matching in the bipartite graph ``ok`` (bool matrix)."""
    ok = np.asarray(ok, dtype=bool)
    if ok.size == 0 or not ok.any():
        return 0
    rows, cols = linear_sum_assignment(ok.astype(np.int64), maximize=True)
    return int(ok[rows, cols].sum())


def project_regions(regions, mapping):
    if mapping is None:
        return list(regions)
    return [mapping.project(r) for r in regions]


def iou_matrix(regions_a, regions_b):
    out = np.zeros((len(regions_a), len(regions_b)))
    for i, ea in enumerate(regions_a):
        for j, eb in enumerate(regions_b):
            out[i, j] = ellipse_iou(ea, eb)
    return out


def evaluate_pair(regions_a, regions_b, desc_a, desc_b, mapping=None):
    """Rank greedy descriptor matches and score them against projected ground-truth ellipses.

    Returns (MatchRanking, (precision, recall), AP).
    """
    if len(regions_a) != len(desc_a) or len(regions_b) != len(desc_b):
        raise ValueError("descriptors must align with regions")
    iou = iou_matrix(project_regions(regions_a, mapping), regions_b)
    ok = iou >= IOU_THRESHOLD
    n_achievable = max_matching(ok)
    pairs = [(i, j, d, bool(ok[i, j])) for i, j, d in greedy_match(desc_a, desc_b)]
    ranking = MatchRanking(pairs, n_achievable, iou)
    ap = average_precision(ranking.flags, n_achievable)
    return ranking, precision_recall(ranking.flags, n_achievable), ap


# ---------------------------------------------------- baseline descriptors ----

def pixel_descriptor(patch, size=8):
    """Gray patch box-downsampled to ``size`` squared, zero-mean and unit-norm."""
    gray = tensorimg.as_plane(patch).mean(axis=2)
    n = gray.shape[0] // size * size
    small = gray[:n, :n].reshape(size, n // size, size, n // size).mean(axis=(1, 3)).ravel()
    small = small - small.mean()
    norm = np.linalg.norm(small)
    return small / norm if norm > 0 else small


def gradient_histogram_descriptor(patch, cells=4, bins=8):
    """Orientation histograms of gray gradients on a cells x cells grid (SIFT-like, 128-d)."""
    gray = tensorimg.as_plane(patch).mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % (2 * math.pi)
    b = (ang / (2 * math.pi) * bins).astype(int) % bins
    n = gray.shape[0]
    rr, cc = np.mgrid[0:n, 0:n]
    cell = (rr * cells // n) * cells + (cc * cells // n)
    hist = np.bincount((cell * bins + b).ravel(), weights=mag.ravel(),
                       minlength=cells * cells * bins)
    norm = np.linalg.norm(hist)
    if norm > 0:
        hist = np.minimum(hist / norm, 0.2)
        hist /= np.linalg.norm(hist)
    return hist


def write_results_csv(path, rows):
    """rows: (pair_id, transform, magnitude, descriptor, ap)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "transform", "magnitude", "descriptor", "AP"])
        w.writerows(rows)


def summarize(rows):
    """Mean AP per (transform, descriptor)."""
    groups = {}
    for _, transform, _, descriptor, ap in rows:
        groups.setdefault((transform, descriptor), []).append(float(ap))
    return [(t, d, float(np.mean(v)), len(v)) for (t, d), v in sorted(groups.items())]


def write_summary_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["transform", "descriptor", "mean_AP", "pairs"])
        w.writerows(summarize(rows))
