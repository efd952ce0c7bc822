"""Grid detector with a Gaussian box head and hand-written backprop.

Every G x G image cell is described by a fixed patch descriptor; the
descriptors of the cell and its eight neighbours feed a two-layer tanh
perceptron that emits, per cell::

    [objectness logit | K class logits | 4 box logits | 4 variance logits]

Boxes decode YOLO-style: the center is the cell origin plus a sigmoid offset
(so it never leaves the cell) and the extents are sigmoids of the image size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .detection import Box, Detection, GaussianBox
from .losses import (VAR_FLOOR, LossBreakdown, bce_with_logits, gaussian_box_loss,
                     one_hot, sigmoid)

CKPT_MAGIC = b"CONFMIX-CKPT 1\n"
PARAM_NAMES = ("W1", "b1", "W2", "b2")
N_HIST_BINS = 4
HIST_GATE = 0.01
# fixed input scaling so every descriptor group is O(1)
MEAN_OFFSET, STD_SCALE, GRAD_SCALE = 0.5, 8.0, 16.0


def descriptor_dim(channels: int) -> int:
    return 3 * channels + N_HIST_BINS


# ----------------------------------------------------------------- features

def patch_descriptors(image: np.ndarray, grid: int) -> np.ndarray:
    """Per-cell descriptor of shape ``(G, G, 3C + 4)``.

    Per channel: mean, standard deviation and mean gradient magnitude; then a
    4-bin unsigned gradient-orientation histogram of the luminance, expressed
    as shares of the cell's gradient energy.
    """
    h, w, c = image.shape
    if h % grid or w % grid:
        raise ValueError(f"image {w}x{h} is not divisible by grid {grid}")
    ch, cw = h // grid, w // grid

    def pool(x):  # (H, W, k) -> (G, G, k) cell means
        return x.reshape(grid, ch, grid, cw, -1).mean(axis=(1, 3))

    mean = pool(image)
    std = np.sqrt(np.maximum(pool(image * image) - mean * mean, 0.0))

    gy, gx = np.gradient(image, axis=(0, 1))
    chan_mag = pool(np.hypot(gx, gy))

    lum = image.mean(axis=2)
    ly, lx = np.gradient(lum)
    mag = np.hypot(lx, ly)
    theta = np.mod(np.arctan2(ly, lx), np.pi)
    bins = np.floor(theta / (np.pi / N_HIST_BINS) + 0.5).astype(int) % N_HIST_BINS
    hist = np.zeros((h, w, N_HIST_BINS))
    np.put_along_axis(hist, bins[:, :, None], mag[:, :, None], axis=2)
    hist = pool(hist)
    # orientation shares, softly gated off in flat cells
    hist = hist / (hist.sum(axis=2, keepdims=True) + HIST_GATE)
    return np.concatenate([mean, std, chan_mag, hist], axis=2)


def input_dim(channels: int, radius: int = 1) -> int:
    return (2 * radius + 1) ** 2 * descriptor_dim(channels)


def cell_features(image: np.ndarray, grid: int, radius: int = 1) -> np.ndarray:
    """Descriptors of each cell's ``(2r+1)^2`` neighbourhood, zero-padded: ``(G*G, input_dim)``."""
    desc = patch_descriptors(image, grid)
    c = image.shape[2]
    desc[:, :, :c] -= MEAN_OFFSET
    desc[:, :, c:2 * c] *= STD_SCALE
    desc[:, :, 2 * c:3 * c] *= GRAD_SCALE
    d = desc.shape[2]
    r, n = radius, 2 * radius + 1
    padded = np.zeros((grid + 2 * r, grid + 2 * r, d))
    padded[r:r + grid, r:r + grid] = desc
    cols = [padded[dy:dy + grid, dx:dx + grid] for dy in range(n) for dx in range(n)]
    return np.concatenate(cols, axis=2).reshape(grid * grid, n * n * d)


# ------------------------------------------------------------------- params

@dataclass
class ToyDetectorParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    grid: int = 8
    num_classes: int = 2
    radius: int = 1  # neighbourhood radius of the input features, in cells

    @property
    def hidden(self) -> int:
        return self.b1.size

    @property
    def out_dim(self) -> int:
        return 1 + self.num_classes + 8

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ToyDetectorParams":
        return ToyDetectorParams(*(a.copy() for a in self.arrays().values()),
                                 grid=self.grid, num_classes=self.num_classes, radius=self.radius)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays().items()}

    def equals(self, other: "ToyDetectorParams") -> bool:
        return (self.grid == other.grid and self.num_classes == other.num_classes and self.radius == other.radius
                and all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values())))


def init_params(rng: np.random.Generator, channels: int = 3, grid: int = 8, num_classes: int = 2,
                hidden: int = 32, obj_prior: float = 0.05, size_prior: float = 0.28,
                sigma_bias: float = -2.0, radius: int = 1) -> ToyDetectorParams:
    in_dim = input_dim(channels, radius)
    out_dim = 1 + num_classes + 8
    W1 = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, hidden))
    W2 = rng.normal(0.0, 0.01, size=(hidden, out_dim))
    b2 = np.zeros(out_dim)
    b2[0] = np.log(obj_prior / (1 - obj_prior))
    box = 1 + num_classes
    b2[box + 2:box + 4] = np.log(size_prior / (1 - size_prior))
    b2[box + 4:box + 8] = sigma_bias
    return ToyDetectorParams(W1, np.zeros(hidden), W2, b2, grid, num_classes, radius)


def zero_params(channels: int = 3, grid: int = 8, num_classes: int = 2, hidden: int = 32,
                radius: int = 1) -> ToyDetectorParams:
    in_dim = input_dim(channels, radius)
    out_dim = 1 + num_classes + 8
    return ToyDetectorParams(np.zeros((in_dim, hidden)), np.zeros(hidden),
                             np.zeros((hidden, out_dim)), np.zeros(out_dim), grid, num_classes, radius)


# ------------------------------------------------------------------ forward

@dataclass
class Prediction:
    """Raw per-cell outputs plus the activations backward needs."""

    grid: int
    obj: np.ndarray      # (G*G,)
    cls: np.ndarray      # (G*G, K) independent sigmoids
    mu: np.ndarray       # (G*G, 4) decoded cx, cy, w, h
    sigma: np.ndarray    # (G*G, 4) variances
    feats: np.ndarray = field(repr=False)
    hidden: np.ndarray = field(repr=False)
    out: np.ndarray = field(repr=False)

    @property
    def c_det(self) -> np.ndarray:
        return self.obj * self.cls.max(axis=1)

    @property
    def class_id(self) -> np.ndarray:
        return self.cls.argmax(axis=1)

    def __len__(self):
        return self.obj.size

    def detections(self, min_score: float = 0.0) -> list[Detection]:
        """Decoded detections for cells with ``c_det >= min_score``, in cell order."""
        c_det = self.c_det
        cls = self.class_id
        out = []
        for i in np.flatnonzero(c_det >= min_score):
            m = self.mu[i]
            box = Box(float(m[0]), float(m[1]), float(m[2]), float(m[3]))
            gbox = GaussianBox(box, tuple(float(s) for s in self.sigma[i]))
            out.append(Detection.create(gbox, int(cls[i]), float(c_det[i])))
        return out


def _cell_origins(grid: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return cols.astype(float), rows.astype(float)


def forward(params: ToyDetectorParams, image: Optional[np.ndarray] = None,
            feats: Optional[np.ndarray] = None) -> Prediction:
    """Run the head on ``image`` (or on precomputed :func:`cell_features`)."""
    g = params.grid
    if feats is None:
        if image is None:
            raise ValueError("need an image or its features")
        feats = cell_features(image, g, params.radius)
    if feats.shape != (g * g, params.W1.shape[0]):
        raise ValueError(f"feature shape {feats.shape} does not fit the detector")
    hidden = np.tanh(feats @ params.W1 + params.b1)
    out = hidden @ params.W2 + params.b2
    k = params.num_classes
    act = sigmoid(out)
    box = act[:, 1 + k:5 + k]
    col, row = _cell_origins(g)
    mu = np.stack([(col + box[:, 0]) / g, (row + box[:, 1]) / g, box[:, 2], box[:, 3]], axis=1)
    return Prediction(g, act[:, 0], act[:, 1:1 + k], mu, act[:, 5 + k:9 + k], feats, hidden, out)


# ------------------------------------------------------------------ targets

@dataclass
class CellTargets:
    obj: np.ndarray    # (G*G,) 0/1
    cls: np.ndarray    # (G*G,) class id or -1
    box: np.ndarray    # (G*G, 4)

    @property
    def matched(self) -> np.ndarray:
        return np.flatnonzero(self.obj > 0)


def cell_of(cx: float, cy: float, grid: int) -> int:
    """Row-major index of the cell holding a point; cell intervals are half-open."""
    col = min(int(np.floor(cx * grid)), grid - 1)
    row = min(int(np.floor(cy * grid)), grid - 1)
    return row * grid + col


def match_targets(targets: Sequence[tuple[Box, int]], grid: int) -> CellTargets:
    """Assign each target to its center cell; one target per cell, largest area wins."""
    n = grid * grid
    obj = np.zeros(n)
    cls = np.full(n, -1, dtype=int)
    box = np.zeros((n, 4))
    best_area = np.zeros(n)
    for b, c in targets:
        i = cell_of(b.cx, b.cy, grid)
        if obj[i] and b.area <= best_area[i]:
            continue
        obj[i], cls[i], best_area[i] = 1.0, c, b.area
        box[i] = b.as_tuple()
    return CellTargets(obj, cls, box)


# ----------------------------------------------------------------- backward

@dataclass(frozen=True)
class LossGains:
    box: float = 1.0
    obj: float = 1.0
    cls: float = 1.0


def detection_loss(params: ToyDetectorParams, pred: Prediction, targets: CellTargets,
                   gains: LossGains = LossGains(), raw_pdf: bool = False, var_floor: float = VAR_FLOOR):
    """Box + objectness + class loss and its gradient w.r.t. the raw outputs.

    Returns ``(LossBreakdown, dout)`` where ``dout`` has the shape of ``pred.out``.
    """
    k = params.num_classes
    g = params.grid
    dout = np.zeros_like(pred.out)

    l_obj, d_obj = bce_with_logits(pred.out[:, 0], targets.obj)
    dout[:, 0] = gains.obj * d_obj

    m = targets.matched
    l_cl = l_box = 0.0
    if m.size:
        l_cl, d_cls = bce_with_logits(pred.out[m, 1:1 + k], one_hot(targets.cls[m], k))
        dout[m, 1:1 + k] = gains.cls * d_cls

        l_box, d_mu, d_sig = gaussian_box_loss(pred.mu[m], pred.sigma[m], targets.box[m],
                                               raw_pdf=raw_pdf, var_floor=var_floor)
        act = sigmoid(pred.out[m, 1 + k:5 + k])
        d_box = d_mu * act * (1.0 - act)
        d_box[:, :2] /= g
        dout[m, 1 + k:5 + k] = gains.box * d_box
        sig = pred.sigma[m]
        dout[m, 5 + k:9 + k] = gains.box * d_sig * sig * (1.0 - sig)

    l_det = gains.box * l_box + gains.obj * l_obj + gains.cls * l_cl
    return LossBreakdown(l_box=l_box, l_obj=l_obj, l_cl=l_cl, l_det=l_det, l_total=l_det), dout


def backprop(params: ToyDetectorParams, pred: Prediction, dout: np.ndarray) -> dict[str, np.ndarray]:
    dW2 = pred.hidden.T @ dout
    db2 = dout.sum(axis=0)
    dz = (dout @ params.W2.T) * (1.0 - pred.hidden * pred.hidden)
    return {"W1": pred.feats.T @ dz, "b1": dz.sum(axis=0), "W2": dW2, "b2": db2}


def backward(params: ToyDetectorParams, image: Optional[np.ndarray], targets: Sequence[tuple[Box, int]] | CellTargets,
             gains: LossGains = LossGains(), raw_pdf: bool = False, feats: Optional[np.ndarray] = None,
             pred: Optional[Prediction] = None):
    """Loss breakdown and parameter gradients for one image and its (pseudo) targets."""
    if pred is None:
        pred = forward(params, image, feats)
    if not isinstance(targets, CellTargets):
        targets = match_targets(targets, params.grid)
    losses, dout = detection_loss(params, pred, targets, gains, raw_pdf)
    return losses, backprop(params, pred, dout)


class SGD:
    """Momentum SGD: ``v <- momentum * v + g``; ``theta <- theta - lr * v``."""

    def __init__(self, params: ToyDetectorParams, lr: float = 1e-2, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = params.zeros_like()

    def step(self, params: ToyDetectorParams, grads: dict[str, np.ndarray]) -> ToyDetectorParams:
        for name, arr in params.arrays().items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            arr -= self.lr * v
        return params


def sgd_step(params: ToyDetectorParams, grads: dict[str, np.ndarray], lr: float, momentum: float = 0.0,
             velocity: Optional[dict[str, np.ndarray]] = None):
    """Functional momentum update; returns ``(new_params, new_velocity)``."""
    new = params.copy()
    vel = {k: np.zeros_like(v) for k, v in params.arrays().items()} if velocity is None else velocity
    new_vel = {}
    for name, arr in new.arrays().items():
        new_vel[name] = momentum * vel[name] + grads[name]
        arr -= lr * new_vel[name]
    return new, new_vel


# --------------------------------------------------------------- checkpoint

def save_checkpoint(params: ToyDetectorParams, path) -> Path:
    """Magic line, JSON header with shapes, then raw little-endian float64 data."""
    path = Path(path)
    arrays = params.arrays()
    header = {
        "grid": params.grid,
        "num_classes": params.num_classes,
        "radius": params.radius,
        "arrays": [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in arrays.items()],
    }
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ToyDetectorParams:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    nl = data.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(data[len(CKPT_MAGIC):nl])
    pos = nl + 1
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=int))
        arrays[spec["name"]] = np.frombuffer(data, dtype=spec["dtype"], count=count,
                                             offset=pos).reshape(spec["shape"]).astype(float)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter data")
    return ToyDetectorParams(**arrays, grid=header["grid"], num_classes=header["num_classes"],
                             radius=header.get("radius", 1))
