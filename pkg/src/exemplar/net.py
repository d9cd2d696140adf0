"""Small CNN engine: architecture codes, forward/backward passes, SGD training.

Activations are laid out NHWC.  Convolutions use valid padding and are
computed as one matrix product over im2col patches.  Dropout follows the
original formulation: training multiplies by a {0, 1} mask, evaluation
multiplies by the keep probability.
"""
from dataclasses import dataclass, field, replace
import copy
import csv
import math
import re
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteLoss, ParseError, ShapeMismatch

DROPOUT_RATE = 0.5


# ------------------------------------------------------------ layer specs ----

@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class FullyConnected:
    units: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float = DROPOUT_RATE


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple
    input_size: int = 32
    input_channels: int = 3
    code: str = ""

    @property
    def n_classes(self):
        if self.layers and isinstance(self.layers[-1], Softmax):
            return self.layers[-2].units
        return None

    def weight_layers(self):
        """Indices of Conv and FullyConnected layers, in order."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv, FullyConnected))]

    def with_classifier(self, n_classes):
        """Append the FullyConnected(n_classes) + Softmax head used for training."""
        if self.n_classes is not None:
            raise ValueError("spec already ends in a classifier")
        return replace(self, layers=self.layers + (FullyConnected(n_classes), Softmax()))

    def shape_chain(self):
        """(height, width, channels) after every layer; raises ShapeMismatch if a layer does not fit."""
        h = w = self.input_size
        c = self.input_channels
        shapes = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                if h < layer.kernel or w < layer.kernel:
                    raise ShapeMismatch(f"{h}x{w} input too small for kernel {layer.kernel}")
                h = (h - layer.kernel) // layer.stride + 1
                w = (w - layer.kernel) // layer.stride + 1
                c = layer.filters
            elif isinstance(layer, MaxPool):
                if h < layer.size or w < layer.size:
                    raise ShapeMismatch(f"{h}x{w} input too small for {layer.size}x{layer.size} pooling")
                h //= layer.size
                w //= layer.size
            elif isinstance(layer, FullyConnected):
                h = w = 1
                c = layer.units
            shapes.append((h, w, c))
        return shapes


_TERM = re.compile(r"(\d+)(?:c(\d+)(?:s(\d+))?|(f))")


def parse_arch(code, input_size=32, input_channels=3, dropout=DROPOUT_RATE):
    """Parse an architecture code such as ``64c5-64c5-128f``.

    ``NcF[sS]`` is a convolution with N filters of size FxF (stride S), ``Nf``
    a fully connected layer with N units.  Every weight layer is followed by a
    ReLU, 2x2 max pooling follows the first two convolutions, and fully
    connected layers get dropout.  The classifier head is not part of the code;
    see :meth:`ArchSpec.with_classifier`.
    """
    layers = []
    pos = 0
    n_conv = 0
    seen_fc = False
    if not code:
        raise ParseError("empty architecture code", 0)
    while True:
        m = _TERM.match(code, pos)
        if m is None:
            j = pos
            while j < len(code) and code[j].isdigit():
                j += 1
            raise ParseError("expected a count followed by 'c<kernel>[s<stride>]' or 'f'", j)
        n, kernel, stride, fc = m.groups()
        if int(n) < 1 or (kernel and int(kernel) < 1) or (stride and int(stride) < 1):
            raise ParseError("sizes must be positive", m.start())
        if fc:
            layers += [FullyConnected(int(n)), ReLU(), Dropout(dropout)]
            seen_fc = True
        else:
            if seen_fc:
                raise ParseError("convolution after fully connected layer", m.start())
            layers += [Conv(int(n), int(kernel), int(stride) if stride else 1), ReLU()]
            n_conv += 1
            if n_conv <= 2:
                layers.append(MaxPool(2))
        pos = m.end()
        if pos == len(code):
            break
        if code[pos] != "-":
            raise ParseError("expected '-' between terms", pos)
        pos += 1
    return ArchSpec(tuple(layers), input_size, input_channels, code)


def format_arch(spec):
    """Inverse of :func:`parse_arch` (ignores the classifier head)."""
    terms = []
    layers = list(spec.layers)
    if spec.n_classes is not None:
        layers = layers[:-2]
    for layer in layers:
        if isinstance(layer, Conv):
            terms.append(f"{layer.filters}c{layer.kernel}" + (f"s{layer.stride}" if layer.stride != 1 else ""))
        elif isinstance(layer, FullyConnected):
            terms.append(f"{layer.units}f")
    return "-".join(terms)


# ---------------------------------------------------------------- state ----

@dataclass
class NetworkState:
    spec: ArchSpec
    params: list              # per layer: {"W": ..., "b": ...} or None
    mode: str = "train"

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p["W"].dtype
        return np.float64

    def copy(self):
        return NetworkState(self.spec, copy.deepcopy(self.params), self.mode)

    def astype(self, dtype):
        params = [None if p is None else {k: v.astype(dtype) for k, v in p.items()}
                  for p in self.params]
        return NetworkState(self.spec, params, self.mode)

    def eval(self):
        return NetworkState(self.spec, self.params, "eval")

    def train(self):
        return NetworkState(self.spec, self.params, "train")

    @property
    def classifier(self):
        """(W, b) of the last fully connected layer, with W of shape (units_in, n_classes)."""
        last = self.spec.weight_layers()[-1]
        return self.params[last]["W"], self.params[last]["b"]


def _fan_shapes(spec):
    h = w = spec.input_size
    c = spec.input_channels
    shapes = spec.shape_chain()
    out = []
    for layer, (oh, ow, oc) in zip(spec.layers, shapes):
        if isinstance(layer, Conv):
            out.append((layer.kernel, layer.kernel, c, layer.filters))
        elif isinstance(layer, FullyConnected):
            out.append((h * w * c, layer.units))
        else:
            out.append(None)
        h, w, c = oh, ow, oc
    return out


def init_weights(spec, rng, dtype=np.float32):
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    params = []
    for shape in _fan_shapes(spec):
        if shape is None:
            params.append(None)
            continue
        if len(shape) == 4:
            k1, k2, cin, cout = shape
            fan_in, fan_out = k1 * k2 * cin, k1 * k2 * cout
        else:
            fan_in, fan_out = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params.append({"W": W, "b": np.zeros(shape[-1], dtype=dtype)})
    return NetworkState(spec, params)


# ---------------------------------------------------------- layer passes ----

def _im2col(x, k, stride):
    # (N, H, W, C) -> (N, Ho, Wo, k, k, C)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv_forward(x, W, b, stride):
    k = W.shape[0]
    cols = _im2col(x, k, stride)
    n, ho, wo = cols.shape[:3]
    flat = cols.reshape(n * ho * wo, -1)
    out = flat @ W.reshape(-1, W.shape[3]) + b
    return out.reshape(n, ho, wo, -1), flat


def conv_backward(dout, x_shape, flat, W, stride, need_dx=True):
    k = W.shape[0]
    n, ho, wo, f = dout.shape
    d2 = dout.reshape(-1, f)
    dW = (flat.T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (d2 @ W.reshape(-1, f).T).reshape(n, ho, wo, k, k, W.shape[2])
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, :, i, j]
    return dx, dW, db


def pool_forward(x, size):
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    xc = x[:, :ho * size, :wo * size].reshape(n, ho, size, wo, size, c)
    out = xc.max(axis=(2, 4))
    return out, xc


def pool_backward(dout, x_shape, xc, out):
    # ties share the gradient; they only occur on zeros after a ReLU, whose
    # gradient is masked anyway
    n, ho, size, wo, _, c = xc.shape
    mask = xc == out[:, :, None, :, None]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :ho * size, :wo * size] = (mask * dout[:, :, None, :, None]).reshape(
        n, ho * size, wo * size, c)
    return dx


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(state, x):
    spec = state.spec
    if x.ndim != 4 or x.shape[1:] != (spec.input_size, spec.input_size, spec.input_channels):
        raise ShapeMismatch(
            f"expected (N, {spec.input_size}, {spec.input_size}, {spec.input_channels}), got {x.shape}")


def forward(state, batch, rng=None, return_caches=False):
    """Run the network; returns the output of every layer.

    ``activations[i]`` is the output of ``spec.layers[i]``.  The penultimate
    representation g is the input of the last fully connected layer, the
    logits h its output, f the softmax.  In train mode dropout masks are drawn
    from ``rng``.
    """
    x = np.asarray(batch, dtype=state.dtype)
    _check_input(state, x)
    train = state.mode == "train"
    acts = []
    caches = []
    for layer, p in zip(state.spec.layers, state.params):
        cache = None
        if isinstance(layer, Conv):
            x_in = x
            x, flat = conv_forward(x, p["W"], p["b"], layer.stride)
            cache = (x_in.shape, flat)
        elif isinstance(layer, MaxPool):
            x_shape = x.shape
            x, xc = pool_forward(x, layer.size)
            cache = (x_shape, xc, x)
        elif isinstance(layer, FullyConnected):
            x_shape = x.shape
            x2 = x.reshape(len(x), -1)
            x = x2 @ p["W"] + p["b"]
            cache = (x_shape, x2)
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = x * cache
        elif isinstance(layer, Dropout):
            keep = 1.0 - layer.rate
            if train:
                if rng is None:
                    raise ValueError("train-mode forward needs an rng for dropout")
                cache = (rng.random(x.shape) < keep).astype(x.dtype)
                x = x * cache
            else:
                x = x * x.dtype.type(keep)
        elif isinstance(layer, Softmax):
            x = softmax(x)
        acts.append(x)
        caches.append(cache)
    if return_caches:
        return acts, caches
    return acts


def roles(state, acts):
    """Split forward activations into (g, h, f)."""
    last_fc = state.spec.weight_layers()[-1]
    g = acts[last_fc - 1].reshape(len(acts[last_fc - 1]), -1)
    h = acts[last_fc]
    f = acts[-1] if isinstance(state.spec.layers[-1], Softmax) else softmax(h)
    return g, h, f


def loss_and_grad(state, batch, labels, rng=None):
    """Mean negative log likelihood and its gradient for every weight layer."""
    spec = state.spec
    if not isinstance(spec.layers[-1], Softmax):
        raise ShapeMismatch("network has no softmax output")
    labels = np.asarray(labels)
    acts, caches = forward(state, batch, rng, return_caches=True)
    logits = acts[-2]
    n = len(labels)
    if logits.shape[0] != n:
        raise ShapeMismatch("batch and label counts differ")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logz - z[np.arange(n), labels]))

    d = acts[-1].copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 2, -1, -1):
        if d is None:
            break
        layer, p, cache = spec.layers[i], state.params[i], caches[i]
        if isinstance(layer, FullyConnected):
            x_shape, x2 = cache
            grads[i] = {"W": x2.T @ d, "b": d.sum(axis=0)}
            d = (d @ p["W"].T).reshape(x_shape)
        elif isinstance(layer, Conv):
            x_shape, flat = cache
            d, dW, db = conv_backward(d, x_shape, flat, p["W"], layer.stride, need_dx=i > 0)
            grads[i] = {"W": dW, "b": db}
        elif isinstance(layer, MaxPool):
            x_shape, xc, out = cache
            d = pool_backward(d, x_shape, xc, out)
        elif isinstance(layer, ReLU):
            d = d * cache
        elif isinstance(layer, Dropout):
            if state.mode == "train":
                d = d * cache
            else:
                d = d * d.dtype.type(1.0 - layer.rate)
    return loss, grads


def sgd_step(state, grads, velocity, lr, momentum):
    """In-place momentum update: v <- momentum v - lr g; w <- w + v."""
    for p, g, v in zip(state.params, grads, velocity):
        if p is None:
            continue
        for key in p:
            v[key] *= momentum
            v[key] -= lr * g[key]
            p[key] += v[key]
    return state, velocity


def zero_velocity(state):
    return [None if p is None else {k: np.zeros_like(v) for k, v in p.items()}
            for p in state.params]


# -------------------------------------------------------------- training ----

@dataclass
class TrainSchedule:
    lr0: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 3.0
    plateau_patience: int = 3
    max_decays: int = 4
    batch_size: int = 64
    max_rounds: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 <= self.momentum < 1 or self.lr_decay_factor <= 1:
            raise ValueError("invalid schedule")


@dataclass
class History:
    epochs: list = field(default_factory=list)   # (epoch, train_loss, val_err, lr)

    def append(self, epoch, train_loss, val_err, lr):
        self.epochs.append((epoch, train_loss, val_err, lr))

    @property
    def lrs(self):
        return [e[3] for e in self.epochs]

    @property
    def val_errors(self):
        return [e[2] for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_err", "lr"])
            for row in self.epochs:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def predict(state, x, batch_size=256):
    state = state.eval()
    out = []
    for i in range(0, len(x), batch_size):
        out.append(forward(state, x[i:i + batch_size])[-1])
    return np.concatenate(out)


def error_rate(state, x, labels):
    return float(np.mean(predict(state, x).argmax(axis=1) != labels))


def train(train_ds, spec, schedule=None, val_ds=None, state=None, on_epoch=None, dtype=np.float32):
    """SGD with momentum and a plateau learning-rate schedule.

    Every epoch visits the training set in a fresh random order.  When the
    validation error has not improved for ``plateau_patience`` epochs the
    learning rate is divided by ``lr_decay_factor``; training stops instead
    of a further drop after ``max_decays`` drops (lr would fall below
    lr0 / factor**max_decays), or after ``max_rounds`` epochs.

    ``train_ds``/``val_ds`` are :class:`~exemplar.surrogate.SurrogateDataset`
    (or any object with ``data``, ``labels``, ``n_classes``).  When ``val_ds``
    is omitted a 10% per-class split is taken.  ``on_epoch(epoch, state)`` is
    called after every epoch, and once with epoch 0 before training.
    """
    from . import surrogate

    schedule = TrainSchedule() if schedule is None else schedule
    if val_ds is None:
        train_ds, val_ds = surrogate.split_validation(
            train_ds, 0.1, np.random.default_rng(schedule.seed))
    if spec.n_classes is None:
        spec = spec.with_classifier(train_ds.n_classes)
    root = np.random.SeedSequence(schedule.seed)
    init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in root.spawn(3))
    if state is None:
        state = init_weights(spec, init_rng, dtype)
    state = state.train()
    velocity = zero_velocity(state)
    x, y = train_ds.data, train_ds.labels
    history = History()
    lr = schedule.lr0
    best = math.inf
    since_best = 0
    decays = 0
    last_good = state.copy()
    if on_epoch is not None:
        on_epoch(0, state)
    for epoch in range(1, schedule.max_rounds + 1):
        order = order_rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss, grads = loss_and_grad(state, x[idx], y[idx], drop_rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} in epoch {epoch}", last_good, history)
            sgd_step(state, grads, velocity, lr, schedule.momentum)
            total += loss * len(idx)
        val_err = error_rate(state, val_ds.data, val_ds.labels)
        history.append(epoch, total / len(y), val_err, lr)
        last_good = state.copy()
        if on_epoch is not None:
            on_epoch(epoch, state)
        if val_err < best:
            best = val_err
            since_best = 0
        else:
            since_best += 1
            if since_best >= schedule.plateau_patience:
                if decays >= schedule.max_decays:
                    break
                lr /= schedule.lr_decay_factor
                decays += 1
                since_best = 0
    return state.eval(), history


# ------------------------------------------------------------ checkpoint ----

EXNET_MAGIC = b"EXNET"
EXNET_VERSION = 1


def header_code(spec):
    """Arch code plus the fields the code alone does not carry."""
    rate = next((l.rate for l in spec.layers if isinstance(l, Dropout)), DROPOUT_RATE)
    return (f"{format_arch(spec)};input={spec.input_size}x{spec.input_channels};"
            f"classes={spec.n_classes or 0};dropout={rate!r}")


def parse_header_code(text):
    code, *fields_ = text.split(";")
    opts = dict(f.split("=", 1) for f in fields_)
    size, channels = (int(v) for v in opts.get("input", "32x3").split("x"))
    spec = parse_arch(code, size, channels, float(opts.get("dropout", DROPOUT_RATE)))
    classes = int(opts.get("classes", 0))
    return spec.with_classifier(classes) if classes else spec


def save_checkpoint(state, path):
    code = header_code(state.spec).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EXNET_MAGIC)
        fh.write(struct.pack("<II", EXNET_VERSION, len(code)))
        fh.write(code)
        for p in state.params:
            if p is None:
                continue
            for key in ("W", "b"):
                fh.write(np.ascontiguousarray(p[key], dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != EXNET_MAGIC:
        raise ValueError(f"{path}: not an EXNET checkpoint")
    version, n = struct.unpack_from("<II", buf, 5)
    if version != EXNET_VERSION:
        raise ValueError(f"unsupported EXNET version {version}")
    off = 13
    spec = parse_header_code(buf[off:off + n].decode("utf-8"))
    off += n
    params = []
    for shape in _fan_shapes(spec):
        if shape is None:
            params.append(None)
            continue
        size = int(np.prod(shape))
        W = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
        b = np.frombuffer(buf, "<f4", shape[-1], off).astype(np.float32)
        off += 4 * shape[-1]
        params.append({"W": W, "b": b})
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return NetworkState(spec, params, "eval")
