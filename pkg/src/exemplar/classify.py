"""One-vs-all linear SVM on pooled features, and accuracy metrics."""
from dataclasses import dataclass
import csv

import numpy as np

from .errors import DegenerateLabels


@dataclass
class LinearOVA:
    weights: np.ndarray   # (n_classes, dim)
    biases: np.ndarray    # (n_classes,)
    C: float
    mean: np.ndarray      # per-dimension standardization
    scale: np.ndarray

    @property
    def n_classes(self):
        return self.weights.shape[0]

    def decision_function(self, features):
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return x @ self.weights.T + self.biases

    def predict(self, features):
        # argmax returns the lowest index among ties
        return np.argmax(self.decision_function(features), axis=1)

    def save(self, path):
        with open(path, "wb") as fh:
            header = f"linear-ova v1 classes={self.n_classes} dim={self.weights.shape[1]} C={self.C!r}\n"
            fh.write(header.encode())
            block = np.concatenate([self.weights.ravel(), self.biases, self.mean, self.scale])
            fh.write(block.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = fh.readline().decode().split()
            fields = dict(t.split("=") for t in header[2:])
            n, d = int(fields["classes"]), int(fields["dim"])
            block = np.frombuffer(fh.read(), "<f4").astype(np.float64)
        w = block[:n * d].reshape(n, d)
        b = block[n * d:n * d + n]
        mean = block[n * d + n:n * d + n + d]
        scale = block[n * d + n + d:]
        return cls(w, b, float(fields["C"]), mean, scale)


def hinge_objective(w, b, x, y, C):
    """0.5 (|w|^2 + b^2) + C sum max(0, 1 - y (w.x + b)) for labels y in {-1, +1}."""
    margins = y * (x @ w + b)
    return 0.5 * (w @ w + b * b) + C * np.maximum(0.0, 1.0 - margins).sum()


def train_ova(features, labels, C=1.0, epochs=50, rng=None, standardize=True):
    """Pegasos-style stochastic subgradient descent, all classes updated together.

    Each binary problem minimizes ``hinge_objective`` (the bias is treated as
    a weight on a constant feature).  Steps are 1 / (lambda t) with
    lambda = 1 / (C n); the returned weights average the iterates of the
    second half of training.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateLabels("need at least two classes")
    n_classes = int(labels.max()) + 1
    if len(classes) != n_classes:
        raise DegenerateLabels("labels must cover 0..n_classes-1 with at least one sample each")
    rng = np.random.default_rng(0) if rng is None else rng
    n, d = x.shape
    if standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
    else:
        mean, scale = np.zeros(d), np.ones(d)
    xs = np.hstack([(x - mean) / scale, np.ones((n, 1))])
    y = np.where(labels[:, None] == np.arange(n_classes), 1.0, -1.0)
    lam = 1.0 / (C * n)
    w = np.zeros((d + 1, n_classes))
    avg = np.zeros_like(w)
    n_avg = 0
    total = epochs * n
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            active = y[i] * (xs[i] @ w) < 1.0
            w *= 1.0 - eta * lam
            w += eta * np.outer(xs[i], y[i] * active)
            if t > total // 2:
                avg += w
                n_avg += 1
    w = avg / n_avg
    return LinearOVA(w[:-1].T.copy(), w[-1].copy(), C, mean, scale)


def accuracy(model, features, labels):
    """(overall accuracy, mean of per-class accuracies)."""
    labels = np.asarray(labels)
    pred = model.predict(features) if hasattr(model, "predict") else np.asarray(model)
    correct = pred == labels
    per_class = [correct[labels == c].mean() for c in np.unique(labels)]
    return float(correct.mean()), float(np.mean(per_class))


def write_eval_csv(path, rows):
    """rows: iterable of (split, overall_acc, per_class_acc)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "overall_acc", "per_class_acc"])
        w.writerows(rows)
