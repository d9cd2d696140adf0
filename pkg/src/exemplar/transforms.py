"""Parameterized patch transformations used to build surrogate classes.

A :class:`TransformParams` is one concatenated parameter vector; applying it
runs, in this order: one fused affine warp (scale, rotation, translation about
the patch center), contrast along the pixel principal components, the HSV
power/multiply/add contrast with hue shift, and a Gaussian blur.
"""
from dataclasses import dataclass, field, fields, replace
import math

import numpy as np

from . import tensorimg

FAMILIES = ("translation", "scale", "rotation", "pca_contrast", "hsv_contrast", "color", "blur")

# parameter fields touched by each family
FAMILY_FIELDS = {
    "translation": ("dx", "dy"),
    "scale": ("scale",),
    "rotation": ("angle",),
    "pca_contrast": ("pca_mul",),
    "hsv_contrast": ("s_pow", "v_pow", "s_mul", "v_mul", "s_add", "v_add"),
    "color": ("hue_shift",),
    "blur": ("blur_sigma",),
}

MULTIPLICATIVE = ("scale", "pca_mul", "s_pow", "v_pow", "s_mul", "v_mul")


@dataclass(frozen=True)
class TransformParams:
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    angle: float = 0.0
    pca_mul: tuple = (1.0, 1.0, 1.0)
    s_pow: float = 1.0
    v_pow: float = 1.0
    s_mul: float = 1.0
    v_mul: float = 1.0
    s_add: float = 0.0
    v_add: float = 0.0
    hue_shift: float = 0.0
    blur_sigma: float = 0.0

    def as_vector(self):
        vals = []
        for f in fields(self):
            v = getattr(self, f.name)
            vals.extend(v if isinstance(v, tuple) else [v])
        return np.array(vals, dtype=np.float64)

    @classmethod
    def from_vector(cls, vec):
        vec = [float(v) for v in vec]
        if len(vec) != 15:
            raise ValueError("parameter vector must have 15 entries")
        return cls(vec[0], vec[1], vec[2], vec[3], tuple(vec[4:7]), *vec[7:])

    def is_identity(self):
        return self == IDENTITY


IDENTITY = TransformParams()


def identity_params():
    return IDENTITY


@dataclass(frozen=True)
class TransformRanges:
    """Sampling ranges for every field; defaults are the object-classification setting."""
    translate_frac: float = 0.2
    scale: tuple = (0.7, 1.4)
    rotate_deg: float = 20.0
    pca_contrast: tuple = (0.5, 2.0)
    hsv_pow: tuple = (0.25, 4.0)
    hsv_mul: tuple = (0.7, 1.4)
    hsv_add: tuple = (-0.1, 0.1)
    hue_add: tuple = (-0.1, 0.1)
    blur_sigma: tuple = (0.0, 0.0)
    enabled: frozenset = field(
        default_factory=lambda: frozenset(f for f in FAMILIES if f != "blur"))

    def __post_init__(self):
        if self.translate_frac < 0 or self.rotate_deg < 0:
            raise ValueError("translate_frac and rotate_deg must be >= 0")
        for name in ("scale", "pca_contrast", "hsv_pow", "hsv_mul", "hsv_add", "hue_add",
                     "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} > max {hi}")
        unknown = set(self.enabled) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown transform families: {sorted(unknown)}")
        object.__setattr__(self, "enabled", frozenset(self.enabled))

    def with_only(self, *families):
        return replace(self, enabled=frozenset(families))

    def without(self, *families):
        return replace(self, enabled=self.enabled - set(families))

    # config file lines: transform.<field> = <value>
    def to_config(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "enabled":
                text = ",".join(x for x in FAMILIES if x in v) or "none"
            elif isinstance(v, tuple):
                text = ",".join(repr(float(x)) for x in v)
            else:
                text = repr(float(v))
            lines.append(f"transform.{f.name} = {text}")
        return lines

    @classmethod
    def from_config(cls, items):
        """Build from a ``{field: text}`` mapping (keys without the ``transform.`` prefix)."""
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, text in items.items():
            if key not in known:
                raise KeyError(f"unknown transform key: {key}")
            text = text.strip()
            if key == "enabled":
                kwargs[key] = frozenset() if text == "none" else frozenset(
                    t.strip() for t in text.split(",") if t.strip())
            elif key in ("translate_frac", "rotate_deg"):
                kwargs[key] = float(text)
            else:
                parts = [float(t) for t in text.split(",")]
                if len(parts) != 2:
                    raise ValueError(f"transform.{key} needs 'min,max'")
                kwargs[key] = tuple(parts)
        return cls(**kwargs)


def sample_params(ranges, rng):
    """Draw one parameter vector, every field uniform over its range.

    Draw count and order are fixed regardless of which families are enabled,
    so toggling a family does not perturb the other fields' streams.
    """
    u = rng.random(15)

    def lerp(lo, hi, t):
        return lo + (hi - lo) * t

    on = ranges.enabled
    p = {}
    if "translation" in on:
        p["dx"] = lerp(-ranges.translate_frac, ranges.translate_frac, u[0])
        p["dy"] = lerp(-ranges.translate_frac, ranges.translate_frac, u[1])
    if "scale" in on:
        p["scale"] = lerp(*ranges.scale, u[2])
    if "rotation" in on:
        p["angle"] = lerp(-ranges.rotate_deg, ranges.rotate_deg, u[3])
    if "pca_contrast" in on:
        p["pca_mul"] = tuple(float(lerp(*ranges.pca_contrast, t)) for t in u[4:7])
    if "hsv_contrast" in on:
        p["s_pow"] = lerp(*ranges.hsv_pow, u[7])
        p["v_pow"] = lerp(*ranges.hsv_pow, u[8])
        p["s_mul"] = lerp(*ranges.hsv_mul, u[9])
        p["v_mul"] = lerp(*ranges.hsv_mul, u[10])
        p["s_add"] = lerp(*ranges.hsv_add, u[11])
        p["v_add"] = lerp(*ranges.hsv_add, u[12])
    if "color" in on:
        p["hue_shift"] = lerp(*ranges.hue_add, u[13])
    if "blur" in on:
        p["blur_sigma"] = lerp(*ranges.blur_sigma, u[14])
    return replace(IDENTITY, **{k: (v if isinstance(v, tuple) else float(v)) for k, v in p.items()})


def spatial_matrix(params, in_size, out_size):
    """Inverse 2x3 map (output pixel -> source pixel) for the fused spatial warp.

    Forward model about the patch centers: out = c_out + t + R(angle) * s * (src - c_in),
    with s also absorbing the in/out resolution ratio.
    """
    s = params.scale * out_size / in_size
    theta = math.radians(params.angle)
    cos, sin = math.cos(theta), math.sin(theta)
    c_in = (in_size - 1) / 2.0
    c_out = (out_size - 1) / 2.0
    tx = params.dx * out_size
    ty = params.dy * out_size
    # inverse rotation R(-theta) / s
    a, b = cos / s, sin / s
    c, d = -sin / s, cos / s
    ox, oy = c_out + tx, c_out + ty
    return np.array([[a, b, c_in - a * ox - b * oy],
                     [c, d, c_in - c * ox - d * oy]])


def _spatial_is_identity(params, in_size, out_size):
    return (params.dx == 0 and params.dy == 0 and params.scale == 1 and params.angle == 0
            and in_size == out_size)


def apply(params, patch, out_size=None, pca=None):
    """Apply one composed transformation to a square RGB patch.

    ``pca`` is the dataset-wide :class:`~exemplar.tensorimg.PixelPCA`; it is
    required only when ``params.pca_mul`` is not all ones.
    """
    patch = tensorimg.as_plane(patch)
    size = patch.shape[0]
    if patch.shape[1] != size or patch.shape[2] != 3:
        raise ValueError("patch must be square RGB")
    out_size = size if out_size is None else int(out_size)

    if _spatial_is_identity(params, size, out_size):
        out = patch.astype(np.float64, copy=True)
    else:
        out = tensorimg.warp_affine(patch, spatial_matrix(params, size, out_size),
                                    out_size, out_size)

    if any(m != 1.0 for m in params.pca_mul):
        if pca is None:
            raise ValueError("PCA contrast requested but no PixelPCA given")
        coords = pca.project(out.reshape(-1, 3)) * np.asarray(params.pca_mul)
        out = np.clip(pca.reconstruct(coords), 0.0, 1.0).reshape(out.shape)

    hsv_touched = (params.s_pow, params.v_pow, params.s_mul, params.v_mul,
                   params.s_add, params.v_add, params.hue_shift) != (1, 1, 1, 1, 0, 0, 0)
    if hsv_touched:
        hsv = tensorimg.rgb_to_hsv(out)
        hsv[..., 1] = np.clip(params.s_mul * hsv[..., 1] ** params.s_pow + params.s_add, 0, 1)
        hsv[..., 2] = np.clip(params.v_mul * hsv[..., 2] ** params.v_pow + params.v_add, 0, 1)
        hsv[..., 0] = np.mod(hsv[..., 0] + params.hue_shift, 1.0)
        out = tensorimg.hsv_to_rgb(hsv)

    if params.blur_sigma > 0:
        out = tensorimg.gaussian_blur(out, params.blur_sigma)
    return np.clip(out, 0.0, 1.0)


def magnitude_scaled(params, t):
    """Interpolate from the identity (t=0) to ``params`` (t=1).

    Multiplicative fields are interpolated in log space.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 1.0:
        return params
    if t == 0.0:
        return IDENTITY
    out = {}
    for f in fields(params):
        v = getattr(params, f.name)
        if f.name in MULTIPLICATIVE:
            if isinstance(v, tuple):
                out[f.name] = tuple(float(math.exp(t * math.log(x))) for x in v)
            else:
                out[f.name] = float(math.exp(t * math.log(v)))
        else:
            out[f.name] = float(t * v)
    return TransformParams(**out)
