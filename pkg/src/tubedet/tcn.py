"""Temporal convolutional re-scoring of tubelets.

A 4-layer 1-D fully convolutional network maps a 3 x T series (detection
score, tracking score, normalized anchor offset) to per-frame foreground
probabilities. Forward and backward passes are plain numpy; convolutions are
"same" zero-padded cross-correlations computed through an im2col matmul.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import BoundingBox, GroundTruthObject, boxes_to_array, iou_matrix
from .tubelets import Tubelet, copy_tubelet

MODEL_FORMAT = "tubedet-tcn"
MODEL_VERSION = 1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TcnArchitecture:
    in_channels: int = 3
    channels: tuple = (256, 256, 256, 2)
    kernels: tuple = (5, 5, 7, 3)
    window: int = 50

    def __post_init__(self):
        if len(self.channels) != len(self.kernels):
            raise ValueError("channels and kernels must have the same length")
        if self.channels[-1] != 2:
            raise ValueError("the last layer must output 2 channels (background, foreground)")
        if any(k % 2 == 0 or k < 1 for k in self.kernels):
            raise ValueError("kernel sizes must be odd for same padding")

    def shapes(self) -> list[tuple[tuple[int, int, int], tuple[int]]]:
        cin = self.in_channels
        out = []
        for cout, k in zip(self.channels, self.kernels):
            out.append(((cout, cin, k), (cout,)))
            cin = cout
        return out


@dataclass
class TcnModel:
    arch: TcnArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: Optional[int] = None

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "TcnModel":
        return TcnModel(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    iterations: int = 200
    batch_size: int = 8
    label_iou: float = 0.5
    window_stride: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.iterations < 1 or self.batch_size < 1 or self.window_stride < 1:
            raise ValueError("learning rate, iterations, batch size and stride must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def init_model(arch: TcnArchitecture = TcnArchitecture(), seed: int = 0) -> TcnModel:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for wshape, bshape in arch.shapes():
        fan_in = wshape[1] * wshape[2]
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=wshape))
        biases.append(np.zeros(bshape))
    return TcnModel(arch, weights, biases, seed)


# -- features and labels -----------------------------------------------------

@dataclass
class FeatureSeries:
    """One fixed-length window of a tubelet; ``mask`` is False on padding."""

    start: int
    features: np.ndarray  # (3, T)
    mask: np.ndarray  # (T,) bool

    @property
    def valid(self) -> int:
        return int(self.mask.sum())


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets covering ``length`` frames; the last window is right-aligned."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window, stride))
    starts.append(length - window)
    return starts


def _windowed(series: np.ndarray, window: int, stride: int) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Split (C, L) into windows of width ``window``, replicate-padding the last frame."""
    length = series.shape[1]
    out = []
    for s in window_starts(length, window, stride):
        chunk = series[:, s:s + window]
        n = chunk.shape[1]
        mask = np.zeros(window, dtype=bool)
        mask[:n] = True
        if n < window:
            chunk = np.concatenate([chunk, np.repeat(chunk[:, -1:], window - n, axis=1)], axis=1)
        out.append((s, chunk, mask))
    return out


def tubelet_series(tubelet: Tubelet) -> np.ndarray:
    return np.array([
        [tb.det_score for tb in tubelet.boxes],
        [tb.track_score for tb in tubelet.boxes],
        [tb.anchor_offset_norm for tb in tubelet.boxes],
    ], dtype=np.float64)


def build_features(tubelet: Tubelet, window: int = 50, stride: int = 25) -> list[FeatureSeries]:
    if not tubelet.boxes:
        raise ValueError("cannot build features for an empty tubelet")
    return [FeatureSeries(s, x, m) for s, x, m in _windowed(tubelet_series(tubelet), window, stride)]


def frame_labels(tubelet: Tubelet, gt_by_frame: Mapping[int, Sequence[BoundingBox]],
                 iou_thresh: float = 0.5) -> np.ndarray:
    """1 where the tubelet box overlaps some ground-truth box with IoU strictly above ``iou_thresh``."""
    labels = np.zeros(len(tubelet.boxes), dtype=np.int64)
    for i, tb in enumerate(tubelet.boxes):
        gts = gt_by_frame.get(tb.frame)
        if gts:
            labels[i] = int(iou_matrix(boxes_to_array([tb.box]), boxes_to_array(gts)).max() > iou_thresh)
    return labels


def make_labels(tubelet: Tubelet, gt_by_frame: Mapping[int, Sequence[BoundingBox]],
                iou_thresh: float = 0.5, window: int = 50, stride: int = 25) -> list[np.ndarray]:
    """Per-window label sequences aligned with :func:`build_features` (padding labelled 0)."""
    labels = frame_labels(tubelet, gt_by_frame, iou_thresh)[None, :].astype(np.float64)
    out = []
    for _, chunk, mask in _windowed(labels, window, stride):
        y = chunk[0].astype(np.int64)
        y[~mask] = 0
        out.append(y)
    return out


def gt_index(ground_truth: Iterable[GroundTruthObject]) -> dict[tuple[str, int], dict[int, list[BoundingBox]]]:
    """(video, class) -> frame -> ground-truth boxes."""
    out: dict[tuple[str, int], dict[int, list[BoundingBox]]] = {}
    for g in ground_truth:
        out.setdefault((g.video_id, g.class_id), {}).setdefault(g.frame, []).append(g.box)
    return out


def training_set(tubelets: Iterable[Tubelet], ground_truth: Iterable[GroundTruthObject],
                 cfg: TrainConfig = TrainConfig(), window: int = 50):
    """Stack windows, labels and masks of ``tubelets`` into (N, 3, T), (N, T), (N, T)."""
    index = gt_index(ground_truth)
    xs, ys, ms = [], [], []
    for t in tubelets:
        gts = index.get((t.video_id, t.class_id), {})
        feats = build_features(t, window, cfg.window_stride)
        labels = make_labels(t, gts, cfg.label_iou, window, cfg.window_stride)
        for fs, y in zip(feats, labels):
            xs.append(fs.features)
            ys.append(y)
            ms.append(fs.mask)
    if not xs:
        return np.zeros((0, 3, window)), np.zeros((0, window), dtype=np.int64), np.zeros((0, window), dtype=bool)
    return np.stack(xs), np.stack(ys), np.stack(ms)


# -- network -----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, T) -> (B*T, C*k) rows of zero-padded receptive fields."""
    b, c, t = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2)  # (B, C, T, k)
    return np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(b * t, c * k)


def conv1d(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 1-D cross-correlation: (B, Cin, T) x (Cout, Cin, k) -> (B, Cout, T)."""
    b, _, t = x.shape
    cout, _, k = w.shape
    out = _im2col(x, k) @ w.reshape(cout, -1).T + bias
    return out.reshape(b, t, cout).transpose(0, 2, 1)


def _conv1d_backward(dout, cols, x_shape, w):
    b, cin, t = x_shape
    cout, _, k = w.shape
    d2 = dout.transpose(0, 2, 1).reshape(b * t, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(cout, -1)).reshape(b, t, cin, k)
    pad = k // 2
    dxp = np.zeros((b, cin, t + 2 * pad))
    for j in range(k):
        dxp[:, :, j:j + t] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, pad:pad + t], dw, db


def _softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: TcnModel, features: np.ndarray, return_activations: bool = False):
    """Per-timestep class probabilities.

    ``features`` is (3, T) or (B, 3, T); the output has matching leading
    shape with 2 channels, channel 1 being the foreground probability.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != model.arch.in_channels:
        raise ValueError(f"expected features of shape ({model.arch.in_channels}, T), got {np.shape(features)}")
    acts = [x]
    n = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        x = conv1d(x, w, b)
        if i < n - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    probs = _softmax2(x)
    if single:
        probs = probs[0]
    if return_activations:
        return probs, acts
    return probs


def loss_and_grads(model: TcnModel, x: np.ndarray, y: np.ndarray, mask: np.ndarray,
                   reduction: str = "mean"):
    """Masked per-frame cross-entropy and its gradient w.r.t. every parameter.

    Returns ``(loss, grads)`` with grads ordered like :meth:`TcnModel.params`.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    m = np.asarray(mask, dtype=np.float64)
    if reduction == "mean":
        denom = m.sum()
        if denom == 0:
            raise ValueError("all frames are masked")
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError("reduction must be 'mean' or 'sum'")

    n = len(model.weights)
    acts, cols = [x], []
    h = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        c = _im2col(h, w.shape[2])
        cols.append(c)
        bsz, _, t = h.shape
        h = (c @ w.reshape(w.shape[0], -1).T + b).reshape(bsz, t, w.shape[0]).transpose(0, 2, 1)
        if i < n - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)

    logits = acts[-1]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(log_probs, y[:, None, :], axis=1)[:, 0, :]
    loss = float(-(picked * m).sum() / denom)

    probs = np.exp(log_probs)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, y[:, None, :], 1.0, axis=1)
    grad = (probs - onehot) * (m / denom)[:, None, :]

    grads_w, grads_b = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            grad = grad * (acts[i + 1] > 0)
        grad, grads_w[i], grads_b[i] = _conv1d_backward(grad, cols[i], acts[i].shape, model.weights[i])
    return loss, [g for pair in zip(grads_w, grads_b) for g in pair]


def train(x: np.ndarray, y: np.ndarray, mask: np.ndarray, cfg: TrainConfig = TrainConfig(),
          arch: TcnArchitecture = TcnArchitecture(), model: Optional[TcnModel] = None,
          target_accuracy: Optional[float] = None):
    """Mini-batch SGD with momentum on masked per-frame cross-entropy.

    Returns ``(model, loss_history)``. With ``target_accuracy`` set, stops as
    soon as the unmasked frame accuracy on the full set reaches it.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if len(x) == 0 or not mask.any():
        raise ValueError("training needs at least one window with an unmasked frame")
    model = init_model(arch, cfg.seed) if model is None else model.copy()
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    order = np.zeros(0, dtype=np.int64)
    history = []
    for it in range(cfg.iterations):
        if len(order) < min(cfg.batch_size, len(x)):
            order = np.concatenate([order, rng.permutation(len(x))])
        batch, order = np.sort(order[:cfg.batch_size]), order[cfg.batch_size:]
        if not mask[batch].any():
            continue
        # overflow is caught by the finiteness check below, so numpy need not warn
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grads(model, x[batch], y[batch], mask[batch])
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise NumericalError(f"non-finite loss or gradient at iteration {it}")
        history.append(loss)
        with np.errstate(over="ignore", invalid="ignore"):
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
        if not all(np.isfinite(p).all() for p in params):
            raise NumericalError(f"non-finite parameters after iteration {it}")
        if target_accuracy is not None and frame_accuracy(model, x, y, mask) >= target_accuracy:
            break
    return model, history


def frame_accuracy(model: TcnModel, x, y, mask) -> float:
    probs = forward(model, x)
    pred = probs.argmax(axis=1)
    mask = np.asarray(mask, dtype=bool)
    return float((pred == y)[mask].mean())


def rescore(model: TcnModel, tubelet: Tubelet, stride: int = 25) -> Tubelet:
    """Copy of ``tubelet`` whose ``tcn_score`` is the window-averaged foreground probability."""
    windows = build_features(tubelet, model.arch.window, stride)
    probs = forward(model, np.stack([w.features for w in windows]))[:, 1, :]
    total = np.zeros(len(tubelet.boxes))
    count = np.zeros(len(tubelet.boxes))
    for w, p in zip(windows, probs):
        n = w.valid
        total[w.start:w.start + n] += p[:n]
        count[w.start:w.start + n] += 1
    out = copy_tubelet(tubelet)
    for tb, s in zip(out.boxes, total / count):
        tb.tcn_score = float(s)
    return out


# -- persistence -------------------------------------------------------------

def save_model(model: TcnModel, path) -> None:
    """Versioned JSON: architecture header then row-major weights at full precision."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "architecture": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.arch).items()},
        "seed": model.seed,
        "layers": [
            {"weight_shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_model(path) -> TcnModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} model")
    a = doc["architecture"]
    arch = TcnArchitecture(a["in_channels"], tuple(a["channels"]), tuple(a["kernels"]), a["window"])
    weights, biases = [], []
    for (wshape, bshape), layer in zip(arch.shapes(), doc["layers"]):
        if tuple(layer["weight_shape"]) != wshape:
            raise ValueError(f"{path}: weight shape {layer['weight_shape']} does not match architecture")
        weights.append(np.array(layer["weight"], dtype=np.float64).reshape(wshape))
        biases.append(np.array(layer["bias"], dtype=np.float64).reshape(bshape))
    return TcnModel(arch, weights, biases, doc.get("seed"))
