"""Convolutional feature extraction on arbitrary-sized images and max-pooling schemes."""
from dataclasses import dataclass
import struct

import numpy as np

from . import net, tensorimg
from .errors import ImageTooSmall

SCHEMES = ("quadrant", "pyramid", "grid4")
CELLS = {"quadrant": 4, "pyramid": 21, "grid4": 16}


@dataclass
class FeatureMap:
    layer_index: int       # 1-based weight layer
    values: np.ndarray     # (H, W, C)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class FeatureVector:
    values: np.ndarray     # channel-major: (channels * cells,)
    scheme: str
    layer: int


def prepare_input(image, pixel_mean):
    """Subtract the dataset mean; images of another size get the per-channel mean of the mean plane."""
    image = tensorimg.as_plane(image)
    pixel_mean = np.asarray(pixel_mean)
    if image.shape == pixel_mean.shape:
        return image - pixel_mean
    return image - pixel_mean.mean(axis=(0, 1))


def _fc_kernel_sizes(spec):
    """Spatial extent of each fully connected layer's input at training resolution."""
    shapes = spec.shape_chain()
    sizes = {}
    prev = (spec.input_size, spec.input_size, spec.input_channels)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, net.FullyConnected):
            sizes[i] = prev
        prev = shapes[i]
    return sizes


def block_end(spec, layer):
    """Index of the last layer belonging to weight layer ``layer`` (1-based).

    A conv block ends after its ReLU (pooling excluded); a fully connected
    block after its ReLU and dropout; the classifier block at the logits.
    """
    weight_layers = spec.weight_layers()
    if not 1 <= layer <= len(weight_layers):
        raise ValueError(f"layer must lie in 1..{len(weight_layers)}")
    i = weight_layers[layer - 1]
    j = i + 1
    while j < len(spec.layers) and isinstance(spec.layers[j], (net.ReLU, net.Dropout)):
        j += 1
    return j - 1


def extract_map(state, image, layer):
    """Responses of weight layer ``layer`` computed convolutionally over ``image``.

    ``image`` must already be normalized (see :func:`prepare_input`).  Fully
    connected layers slide over their input as convolutions with stride 1.
    """
    spec = state.spec
    x = np.asarray(tensorimg.as_plane(image), dtype=state.dtype)[None]
    if x.shape[3] != spec.input_channels:
        raise ValueError("channel count does not match the network")
    fc_in = _fc_kernel_sizes(spec)
    stop = block_end(spec, layer)
    for i in range(stop + 1):
        l, p = spec.layers[i], state.params[i]
        if isinstance(l, net.Conv):
            if x.shape[1] < l.kernel or x.shape[2] < l.kernel:
                raise ImageTooSmall(f"map {x.shape[1]}x{x.shape[2]} smaller than kernel {l.kernel}")
            x, _ = net.conv_forward(x, p["W"], p["b"], l.stride)
        elif isinstance(l, net.MaxPool):
            if x.shape[1] < l.size or x.shape[2] < l.size:
                raise ImageTooSmall("map smaller than pooling window")
            x, _ = net.pool_forward(x, l.size)
        elif isinstance(l, net.FullyConnected):
            kh, kw, kc = fc_in[i]
            if x.shape[1] < kh or x.shape[2] < kw:
                raise ImageTooSmall(f"map {x.shape[1]}x{x.shape[2]} smaller than {kh}x{kw} FC support")
            W = p["W"].reshape(kh, kw, kc, -1)
            x, _ = net.conv_forward(x, W, p["b"], 1)
        elif isinstance(l, net.ReLU):
            x = np.maximum(x, 0)
        elif isinstance(l, net.Dropout):
            x = x * x.dtype.type(1.0 - l.rate)
    return FeatureMap(layer, x[0])


def output_size(spec, size, layer):
    """Spatial size of :func:`extract_map` output along one axis of length ``size``."""
    fc_in = _fc_kernel_sizes(spec)
    for i in range(block_end(spec, layer) + 1):
        l = spec.layers[i]
        if isinstance(l, net.Conv):
            size = (size - l.kernel) // l.stride + 1
        elif isinstance(l, net.MaxPool):
            size //= l.size
        elif isinstance(l, net.FullyConnected):
            size = size - fc_in[i][0] + 1
    return size


# ---------------------------------------------------------------- pooling ----

def _values(fmap):
    return fmap.values if isinstance(fmap, FeatureMap) else tensorimg.as_plane(fmap)


def _layer(fmap):
    return fmap.layer_index if isinstance(fmap, FeatureMap) else -1


def _pool_cells(v, row_bounds, col_bounds):
    out = np.empty((v.shape[2], (len(row_bounds) - 1) * (len(col_bounds) - 1)), dtype=v.dtype)
    k = 0
    for r0, r1 in zip(row_bounds[:-1], row_bounds[1:]):
        for c0, c1 in zip(col_bounds[:-1], col_bounds[1:]):
            out[:, k] = v[r0:r1, c0:c1].max(axis=(0, 1))
            k += 1
    return out


def halves(n):
    """Quadrant split; the extra row/column of odd sizes goes to the bottom/right half."""
    return [0, n // 2, n]


def grid_bounds(n, cells=4):
    """Rounded equal partition of ``n`` into ``cells`` (half rounds up)."""
    return [int(np.floor(i * n / cells + 0.5)) for i in range(cells + 1)]


def _quadrants(v):
    if v.shape[0] < 2 or v.shape[1] < 2:
        raise ImageTooSmall("quadrant pooling needs a map of at least 2x2")
    return _pool_cells(v, halves(v.shape[0]), halves(v.shape[1]))


def _grid4(v):
    if v.shape[0] < 4 or v.shape[1] < 4:
        raise ImageTooSmall("4x4 pooling needs a map of at least 4x4")
    return _pool_cells(v, grid_bounds(v.shape[0]), grid_bounds(v.shape[1]))


def pool_quadrant(fmap):
    return FeatureVector(_quadrants(_values(fmap)).ravel(), "quadrant", _layer(fmap))


def pool_pyramid(fmap):
    """Per channel: global max, 4 quadrant maxima, 16 grid-cell maxima (1+4+16 = 21)."""
    v = _values(fmap)
    if v.shape[0] < 4 or v.shape[1] < 4:
        raise ImageTooSmall("pyramid pooling needs a map of at least 4x4")
    cells = np.concatenate([v.max(axis=(0, 1))[:, None], _quadrants(v), _grid4(v)], axis=1)
    return FeatureVector(cells.ravel(), "pyramid", _layer(fmap))


def pool_grid4(fmap):
    return FeatureVector(_grid4(_values(fmap)).ravel(), "grid4", _layer(fmap))


POOLERS = {"quadrant": pool_quadrant, "pyramid": pool_pyramid, "grid4": pool_grid4}


def pool(fmap, scheme):
    try:
        return POOLERS[scheme](fmap)
    except KeyError:
        raise ValueError(f"unknown pooling scheme {scheme!r}; choose from {SCHEMES}") from None


def extractor(state, layer, scheme, pixel_mean):
    """Image -> pooled feature values, for the evaluation harnesses."""
    def run(image):
        fmap = extract_map(state, prepare_input(image, pixel_mean), layer)
        if scheme is None:
            return fmap.values.ravel().astype(np.float64)
        return pool(fmap, scheme).values.astype(np.float64)
    return run


# ----------------------------------------------------------------- EXDESC ----

EXDESC_MAGIC = b"EXDESC"
EXDESC_VERSION = 1


def save_exdesc(path, vectors, layer=None, scheme=None, checkpoint_hash=None):
    arr = np.asarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("descriptors must form a (count, dim) array")
    with open(path, "wb") as fh:
        fh.write(EXDESC_MAGIC)
        fh.write(struct.pack("<III", EXDESC_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
    with open(str(path) + ".txt", "w") as fh:
        fh.write(f"layer={layer}\nscheme={scheme}\ncheckpoint_sha256={checkpoint_hash}\n")


def load_exdesc(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:6] != EXDESC_MAGIC:
        raise ValueError(f"{path}: not an EXDESC file")
    version, count, dim = struct.unpack_from("<III", buf, 6)
    if version != EXDESC_VERSION:
        raise ValueError(f"unsupported EXDESC version {version}")
    return np.frombuffer(buf, "<f4", count * dim, 18).reshape(count, dim).copy()
