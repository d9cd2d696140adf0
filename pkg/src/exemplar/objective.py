"""Surrogate objective and its split into a classification term and an invariance gap.

For every surrogate class i with logits h(T x_i) = W g(T x_i) + b over its
stored samples, the mean negative log likelihood

    mean_T [-h_i + Z(h)]

separates exactly into

    [-hbar_i + Z(hbar)]  +  [mean_T Z(h) - Z(hbar)],    hbar = W gbar_i + b,

where Z is log-sum-exp and gbar_i the class-mean penultimate activation.
The second bracket is a Jensen gap and never negative.
"""
from dataclasses import dataclass
import csv

import numpy as np

from . import net
from .errors import ShapeMismatch

EQUALITY_TOL = 1e-10


def logsumexp(x, axis=-1):
    """log(sum(exp(x))) evaluated as max + log(sum(exp(x - max)))."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = out.squeeze(axis)
    return float(out) if out.ndim == 0 else out


def lse_hessian(x):
    """Closed-form Hessian of log-sum-exp: (1'u diag(u) - u u') / (1'u)^2, u = exp(x)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.exp(x - x.max())
    s = u.sum()
    return (s * np.diag(u) - np.outer(u, u)) / (s * s)


def lse_quadratic_form(x, z):
    """z' H(x) z as the softmax-weighted variance of z, without forming H.

    The weighted mean is taken relative to z[0], so any multiple of the
    all-ones vector gives exactly 0.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    u = np.exp(x - x.max())
    p = u / u.sum()
    d = z - z[0]
    d = d - (p * d).sum()
    return float((p * d * d).sum())


@dataclass
class ObjectiveReport:
    total: float
    classification_term: float
    regularizer_term: float
    per_class_regularizer: np.ndarray
    g_bar: np.ndarray
    h_bar: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "regularizer_gap"])
            for i, gap in enumerate(self.per_class_regularizer):
                w.writerow([i, repr(float(gap))])
            w.writerow(["total", repr(self.total)])
            w.writerow(["classification_term", repr(self.classification_term)])
            w.writerow(["regularizer_term", repr(self.regularizer_term)])

    def is_finite(self):
        return bool(np.isfinite([self.total, self.classification_term, self.regularizer_term]).all()
                    and np.isfinite(self.per_class_regularizer).all())


def decompose_features(g, labels, W, b=None, n_classes=None):
    """Decomposition from penultimate features ``g`` (M, D), ``W`` (D, N) and bias ``b``."""
    g = np.asarray(g, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    labels = np.asarray(labels)
    n = W.shape[1] if n_classes is None else n_classes
    if g.ndim != 2 or g.shape[1] != W.shape[0] or len(labels) != len(g):
        raise ShapeMismatch("features, labels and W disagree in shape")
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    h = g @ W + b
    z = logsumexp(h, axis=1)
    present = np.unique(labels)
    g_bar = np.zeros((n, g.shape[1]))
    gaps = np.zeros(n)
    first = np.zeros(n)
    for i in present:
        rows = labels == i
        g_bar[i] = g[rows].mean(axis=0)
        # equals W gbar + b by linearity; averaging h keeps K=1 gaps exactly 0
        h_bar = h[rows].mean(axis=0)
        z_bar = logsumexp(h_bar)
        first[i] = -h_bar[i] + z_bar
        gaps[i] = z[rows].mean() - z_bar
    h_bar = g_bar @ W + b
    term1 = float(first.sum())
    term2 = float(gaps.sum())
    total = float(sum((z[labels == i] - h[labels == i, i]).mean() for i in present))
    return ObjectiveReport(total, term1, term2, gaps, g_bar, h_bar)


def _eval_features(state, data, batch_size=256):
    state = state.eval()
    gs = []
    for i in range(0, len(data), batch_size):
        g, _, _ = net.roles(state, net.forward(state, data[i:i + batch_size]))
        gs.append(g)
    return np.concatenate(gs).astype(np.float64)


def decompose(state, ds):
    """Decompose the objective of ``state`` (evaluated without dropout) on ``ds``."""
    W, b = state.classifier
    return decompose_features(_eval_features(state, ds.data), ds.labels, W, b, ds.n_classes)


def empirical_objective(state, ds, batch_size=256):
    """Sum over all stored samples of -log f_label(sample), eval mode."""
    state = state.eval()
    total = 0.0
    for i in range(0, len(ds.labels), batch_size):
        _, h, _ = net.roles(state, net.forward(state, ds.data[i:i + batch_size]))
        h = h.astype(np.float64)
        y = ds.labels[i:i + batch_size]
        if h.shape[1] <= y.max():
            raise ShapeMismatch("label outside the network's class range")
        total += float((logsumexp(h, axis=1) - h[np.arange(len(y)), y]).sum())
    return total


def jensen_equality_check(logit_sets):
    """Per-class mean Z(h) - Z(mean h), plus a flag for classes at equality."""
    gaps = []
    for hs in logit_sets:
        hs = np.atleast_2d(np.asarray(hs, dtype=np.float64))
        if len(hs) == 0:
            raise ValueError("every class needs at least one logit vector")
        gaps.append(float(logsumexp(hs, axis=1).mean() - logsumexp(hs.mean(axis=0))))
    gaps = np.array(gaps)
    if np.any(gaps < -EQUALITY_TOL):
        raise AssertionError(f"negative Jensen gap {gaps.min()}")
    return gaps, gaps <= EQUALITY_TOL

