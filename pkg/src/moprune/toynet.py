"""Tiny ReLU MLP classifier, its trainer, and the calibration capture.

Data is column-major in the sample index: an input batch is ``dim x n`` and a
layer input matrix X is ``d_in x N``, which is the shape the Hessian
builders consume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .matrixcore import NumericalError, round_half_up
from .serialize import read_tensors, write_tensors

log = logging.getLogger(__name__)

SPLITS = ("train", "calibration", "test")


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]


@dataclass
class ToyNet:
    layers: list[Layer]

    def __post_init__(self):
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.d_out != b.d_in:
                raise ValueError(f"layer {i} d_out={a.d_out} != layer {i + 1} d_in={b.d_in}")

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].d_in] + [l.d_out for l in self.layers]

    def copy(self) -> "ToyNet":
        return ToyNet([Layer(l.W.copy(), l.b.copy()) for l in self.layers])

    def forward(self, X: np.ndarray) -> np.ndarray:
        return _forward(self, X)[0][-1]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(X), axis=0)

    def save(self, path) -> None:
        tensors = {}
        for i, l in enumerate(self.layers):
            tensors[f"layer{i}.W"] = l.W
            tensors[f"layer{i}.b"] = l.b
        write_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "ToyNet":
        t = read_tensors(path)
        layers = []
        i = 0
        while f"layer{i}.W" in t:
            layers.append(Layer(t[f"layer{i}.W"], t[f"layer{i}.b"].ravel()))
            i += 1
        if not layers:
            raise ValueError(f"{path}: no layers found")
        return cls(layers)


def init_net(widths: list[int], seed: int) -> ToyNet:
    """He-initialised MLP with the given layer widths (input first)."""
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(widths, widths[1:]):
        W = rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
        layers.append(Layer(W, np.zeros(d_out)))
    return ToyNet(layers)


@dataclass
class Dataset:
    inputs: np.ndarray  # dim x n
    labels: np.ndarray  # n, int
    classes: int
    index: dict[str, np.ndarray] = field(default_factory=dict)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.index[name]
        return self.inputs[:, idx], self.labels[idx]

    def save(self, path) -> None:
        t = {"inputs": self.inputs, "labels": self.labels.astype(np.float64),
             "classes": np.array([float(self.classes)])}
        for s in SPLITS:
            t[f"split.{s}"] = self.index[s].astype(np.float64)
        write_tensors(path, t)

    @classmethod
    def load(cls, path) -> "Dataset":
        t = read_tensors(path)
        index = {s: t[f"split.{s}"].ravel().astype(np.int64) for s in SPLITS}
        return cls(t["inputs"], t["labels"].ravel().astype(np.int64), int(t["classes"][0, 0]), index)


def generate_dataset(seed: int, n: int, classes: int, dim: int, sigma: float = 1.0,
                     radius: float = 2.5) -> Dataset:
    """Gaussian blobs, one isotropic component per class, split 70/15/15.

    When ``classes <= dim`` the class means sit at ``radius`` along random
    orthonormal directions, so pairwise mean distance is ``radius * sqrt(2)``
    (3.5 sigma by default).
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if n < classes:
        raise ValueError(f"n={n} is smaller than classes={classes}")
    rng = np.random.default_rng(seed)
    if classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        means = radius * sigma * q
    else:
        min_sep = radius * np.sqrt(2.0) * sigma
        while True:
            means = rng.standard_normal((dim, classes)) * radius * sigma
            d = np.linalg.norm(means[:, :, None] - means[:, None, :], axis=0)
            if d[np.triu_indices(classes, 1)].min() >= min_sep:
                break
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    inputs = means[:, labels] + sigma * rng.standard_normal((dim, n))

    order = rng.permutation(n)
    n_train = round_half_up(0.70 * n)
    n_cal = round_half_up(0.15 * n)
    index = {
        "train": np.sort(order[:n_train]),
        "calibration": np.sort(order[n_train:n_train + n_cal]),
        "test": np.sort(order[n_train + n_cal:]),
    }
    return Dataset(inputs, labels.astype(np.int64), classes, index)


def _forward(net: ToyNet, X: np.ndarray):
    acts = [np.asarray(X, dtype=np.float64)]
    pres = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = layer.W @ acts[-1] + layer.b[:, None]
        pres.append(z)
        acts.append(z if i == last else np.maximum(z, 0.0))
    return acts, pres


def per_sample_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Softmax cross-entropy of each column."""
    zmax = logits.max(axis=0)
    lse = zmax + np.log(np.exp(logits - zmax).sum(axis=0))
    return lse - logits[labels, np.arange(logits.shape[1])]


def _output_delta(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.exp(logits - logits.max(axis=0))
    p /= p.sum(axis=0)
    p[labels, np.arange(logits.shape[1])] -= 1.0
    return p


def _backward(net: ToyNet, pres: list[np.ndarray], delta_out: np.ndarray) -> list[np.ndarray]:
    """Per-sample derivatives of the loss w.r.t. each layer's pre-activation output."""
    deltas = [delta_out]
    for i in range(len(net.layers) - 1, 0, -1):
        d = (net.layers[i].W.T @ deltas[0]) * (pres[i - 1] > 0)
        deltas.insert(0, d)
    return deltas


def loss_and_grads(net: ToyNet, X: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
    """Mean cross-entropy (+ L2 on weights) and its gradients per layer."""
    acts, pres = _forward(net, X)
    n = X.shape[1]
    loss = float(per_sample_loss(acts[-1], y).mean())
    deltas = _backward(net, pres, _output_delta(acts[-1], y))
    grads = []
    for layer, a, d in zip(net.layers, acts, deltas):
        gW = d @ a.T / n
        if weight_decay:
            gW = gW + weight_decay * layer.W
            loss += 0.5 * weight_decay * float(np.sum(layer.W * layer.W))
        grads.append((gW, d.mean(axis=1)))
    return loss, grads


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(np.sum(gW * gW) + np.sum(gb * gb) for gW, gb in grads)))


@dataclass
class TrainResult:
    net: ToyNet
    losses: list[float]
    grad_norms: list[float]

    @property
    def initial_grad_norm(self) -> float:
        return self.grad_norms[0]

    @property
    def final_grad_norm(self) -> float:
        return self.grad_norms[-1]


def train(net: ToyNet, data: Dataset, epochs: int, lr: float, seed: int = 0,
          momentum: float = 0.9, weight_decay: float = 1e-3, batch_size: int | None = None,
          tol: float | None = None) -> TrainResult:
    """SGD with heavy-ball momentum on the training split.

    ``batch_size=None`` means full-batch steps, which is what drives the
    gradient to near zero. With ``tol`` set, training stops once the full
    training-gradient norm falls below ``tol`` times its initial value.
    The input net is not modified.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    X, y = data.split("train")
    n = X.shape[1]
    rng = np.random.default_rng(seed)
    net = net.copy()
    vel = [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in net.layers]
    losses, norms = [], []

    for epoch in range(epochs):
        loss, grads = loss_and_grads(net, X, y, weight_decay)
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch, loss)
        losses.append(loss)
        norms.append(_grad_norm(grads))
        if tol is not None and norms[-1] <= tol * norms[0]:
            break
        if batch_size is None or batch_size >= n:
            batches = [None]
        else:
            perm = rng.permutation(n)
            batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
        for bidx in batches:
            if bidx is not None:
                _, grads = loss_and_grads(net, X[:, bidx], y[bidx], weight_decay)
            for layer, (vW, vb), (gW, gb) in zip(net.layers, vel, grads):
                vW *= momentum
                vW -= lr * gW
                vb *= momentum
                vb -= lr * gb
                layer.W += vW
                layer.b += vb
    loss, grads = loss_and_grads(net, X, y, weight_decay)
    if not np.isfinite(loss):
        raise TrainingDiverged(len(losses), loss)
    losses.append(loss)
    norms.append(_grad_norm(grads))
    log.info("trained %d epochs: loss %.4g, grad norm %.3g -> %.3g",
             len(losses) - 1, loss, norms[0], norms[-1])
    return TrainResult(net, losses, norms)


@dataclass
class LayerCapture:
    """Calibration data for one linear layer.

    X is ``d_in x N``; A has shape ``(d_out, d_in, N)`` and ``A[k][:, j]`` is
    the gradient of sample j's loss w.r.t. row k of the layer weight.
    """

    X: np.ndarray
    A: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]

    @property
    def d_in(self) -> int:
        return self.X.shape[0]

    @property
    def d_out(self) -> int:
        return self.A.shape[0]


@dataclass
class CalibrationCapture:
    layers: list[LayerCapture]

    def __getitem__(self, i: int) -> LayerCapture:
        return self.layers[i]

    def __len__(self) -> int:
        return len(self.layers)

    def save(self, path) -> None:
        t = {}
        for i, lc in enumerate(self.layers):
            t[f"layer{i}.X"] = lc.X
            for k in range(lc.d_out):
                t[f"layer{i}.A.{k}"] = lc.A[k]
        write_tensors(path, t)

    @classmethod
    def load(cls, path) -> "CalibrationCapture":
        t = read_tensors(path)
        layers = []
        i = 0
        while f"layer{i}.X" in t:
            k = 0
            rows = []
            while f"layer{i}.A.{k}" in t:
                rows.append(t[f"layer{i}.A.{k}"])
                k += 1
            layers.append(LayerCapture(t[f"layer{i}.X"], np.stack(rows)))
            i += 1
        return cls(layers)


def capture(net: ToyNet, X: np.ndarray, y: np.ndarray) -> CalibrationCapture:
    """Record each layer's inputs and per-sample, per-row loss gradients.

    Gradients are of the per-sample loss (not the batch mean); the 1/N of the
    empirical Fisher is applied by the Hessian builder.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("calibration needs at least one sample")
    if X.shape[0] != net.layers[0].d_in:
        raise ValueError(f"input dim {X.shape[0]} != net input dim {net.layers[0].d_in}")
    acts, pres = _forward(net, X)
    deltas = _backward(net, pres, _output_delta(acts[-1], np.asarray(y)))
    layers = []
    for a, d in zip(acts, deltas):
        # A[k, i, j] = d[k, j] * a[i, j]: chain rule for a linear layer
        layers.append(LayerCapture(a.copy(), d[:, None, :] * a[None, :, :]))
    return CalibrationCapture(layers)


def recalibrate(net: ToyNet, X: np.ndarray, y: np.ndarray) -> CalibrationCapture:
    """Capture again on a (partially pruned) network."""
    return capture(net, X, y)

