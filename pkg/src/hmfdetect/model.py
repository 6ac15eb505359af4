"""Miniature convolutional binary classifier with three block families.

* ``plain``    - conv/relu stacks followed by 2x2 max-pooling (VGG-like);
* ``residual`` - projection conv, then pre-activation blocks ``x + F(x)``;
* ``dense``    - projection conv, then layers appending ``G(x)`` channels,
  closed by 2x2 average pooling.

All families end in global average pooling, a single dense unit and a
sigmoid.  Parameters live in one flat float64 vector; layers receive views.
Layer ``forward`` returns ``(output, cache)`` and ``backward`` consumes the
cache, so nothing is stored on the layer objects.
"""

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import CheckpointError, ConfigError, DivergenceError, LabelError, ShapeError
from .evaluation import auc_score
from .geodata import area_resample

log = logging.getLogger(__name__)

FAMILIES = ("plain", "residual", "dense")


# ---------------------------------------------------------------------------
# layers


class Layer:
    def param_shapes(self):
        return []

    def init_params(self, rng):
        return [np.zeros(s) for s in self.param_shapes()]

    def out_shape(self, shape):
        return shape


class Conv2D(Layer):
    def __init__(self, cin, cout, k=3, stride=1, pad=None):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad

    def param_shapes(self):
        return [(self.k, self.k, self.cin, self.cout), (self.cout,)]

    def init_params(self, rng):
        # fan-in scaled uniform (He), zero bias
        bound = np.sqrt(6.0 / (self.k * self.k * self.cin))
        return [rng.uniform(-bound, bound, size=self.param_shapes()[0]), np.zeros(self.cout)]

    def out_shape(self, shape):
        h, w, _ = shape
        return (
            kernels.conv_output_side(h, self.k, self.stride, self.pad),
            kernels.conv_output_side(w, self.k, self.stride, self.pad),
            self.cout,
        )

    def forward(self, x, params):
        w, b = params
        return kernels.conv2d_forward(x, w, b, self.stride, self.pad), x

    def backward(self, dy, params, x):
        dx, dw, db = kernels.conv2d_backward(x, params[0], dy, self.stride, self.pad)
        return dx, [dw, db]


class ReLU(Layer):
    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, params, mask):
        return dy * mask, []


class MaxPool(Layer):
    def __init__(self, k=2):
        self.k = k

    def out_shape(self, shape):
        h, w, c = shape
        return kernels.conv_output_side(h, self.k, self.k, 0), kernels.conv_output_side(w, self.k, self.k, 0), c

    def forward(self, x, params):
        out, arg = kernels.maxpool_forward(x, self.k)
        return out, (arg, x.shape)

    def backward(self, dy, params, cache):
        arg, shape = cache
        return kernels.maxpool_backward(dy, arg, shape, self.k), []


class AvgPool(MaxPool):
    def forward(self, x, params):
        n, h, w, c = x.shape
        k = self.k
        ho, wo = h // k, w // k
        out = x[:, : ho * k, : wo * k].reshape(n, ho, k, wo, k, c).mean(axis=(2, 4))
        return out, x.shape

    def backward(self, dy, params, shape):
        k = self.k
        dx = np.zeros(shape)
        ho, wo = dy.shape[1], dy.shape[2]
        dx[:, : ho * k, : wo * k] = np.repeat(np.repeat(dy, k, axis=1), k, axis=2) / (k * k)
        return dx, []


class GlobalAvgPool(Layer):
    def out_shape(self, shape):
        return (shape[2],)

    def forward(self, x, params):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, params, shape):
        n, h, w, c = shape
        return np.broadcast_to(dy[:, None, None, :] / (h * w), shape).copy(), []


class Dense(Layer):
    def __init__(self, din, dout):
        self.din, self.dout = din, dout

    def param_shapes(self):
        return [(self.din, self.dout), (self.dout,)]

    def init_params(self, rng):
        bound = np.sqrt(6.0 / self.din)
        return [rng.uniform(-bound, bound, size=(self.din, self.dout)), np.zeros(self.dout)]

    def out_shape(self, shape):
        return (self.dout,)

    def forward(self, x, params):
        w, b = params
        return x @ w + b, x

    def backward(self, dy, params, x):
        w, _ = params
        return dy @ w.T, [x.T @ dy, dy.sum(axis=0)]


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)
        self._counts = [len(layer.param_shapes()) for layer in self.layers]

    def param_shapes(self):
        return [s for layer in self.layers for s in layer.param_shapes()]

    def init_params(self, rng):
        return [p for layer in self.layers for p in layer.init_params(rng)]

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def _chunks(self, params):
        i = 0
        for n in self._counts:
            yield params[i : i + n]
            i += n

    def forward(self, x, params):
        caches = []
        for layer, p in zip(self.layers, self._chunks(params)):
            x, c = layer.forward(x, p)
            caches.append(c)
        return x, caches

    def backward(self, dy, params, caches):
        chunks = list(self._chunks(params))
        grads = []
        for layer, p, c in zip(reversed(self.layers), reversed(chunks), reversed(caches)):
            dy, g = layer.backward(dy, p, c)
            grads.append(g)
        return dy, [g for gs in reversed(grads) for g in gs]


class Residual(Sequential):
    """``x + relu -> conv -> relu -> conv``; zero conv weights give identity."""

    def __init__(self, channels, k=3):
        super().__init__([ReLU(), Conv2D(channels, channels, k), ReLU(), Conv2D(channels, channels, k)])

    def forward(self, x, params):
        h, caches = super().forward(x, params)
        return x + h, caches

    def backward(self, dy, params, caches):
        dx, grads = super().backward(dy, params, caches)
        return dx + dy, grads


class DenseConcat(Sequential):
    """``concat(x, conv(relu(x)))`` along channels (adds ``growth`` channels)."""

    def __init__(self, cin, growth, k=3):
        self.cin = cin
        super().__init__([ReLU(), Conv2D(cin, growth, k)])

    def out_shape(self, shape):
        h, w, c = super().out_shape(shape)
        return h, w, self.cin + c

    def forward(self, x, params):
        h, caches = super().forward(x, params)
        return np.concatenate([x, h], axis=-1), caches

    def backward(self, dy, params, caches):
        dx, grads = super().backward(np.ascontiguousarray(dy[..., self.cin :]), params, caches)
        return dx + dy[..., : self.cin], grads


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelSpec:
    block_family: str = "plain"
    stages: tuple = ((8, 1), (16, 1), (16, 1))
    input_side: int = 64
    growth_rate: int = 8

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(f), int(b)) for f, b in self.stages))
        if self.block_family not in FAMILIES:
            raise ConfigError(f"unknown block family {self.block_family!r}; choose from {FAMILIES}")
        if not self.stages:
            raise ConfigError("model needs at least one stage")
        if any(f < 1 or b < 0 for f, b in self.stages):
            raise ConfigError("stage filters must be >= 1 and block counts >= 0")
        if self.growth_rate < 1 or self.input_side < 1:
            raise ConfigError("growth_rate and input_side must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            block_family=d["block_family"],
            stages=tuple(tuple(s) for s in d["stages"]),
            input_side=int(d["input_side"]),
            growth_rate=int(d["growth_rate"]),
        )


def _build(spec):
    layers = []
    cin = 3
    for filters, blocks in spec.stages:
        if spec.block_family == "plain":
            for _ in range(max(blocks, 1)):
                layers += [Conv2D(cin, filters), ReLU()]
                cin = filters
            layers.append(MaxPool(2))
        elif spec.block_family == "residual":
            layers += [Conv2D(cin, filters), ReLU()]
            cin = filters
            layers += [Residual(cin) for _ in range(blocks)]
            layers.append(MaxPool(2))
        else:
            layers.append(Conv2D(cin, filters))
            cin = filters
            for _ in range(blocks):
                layers.append(DenseConcat(cin, spec.growth_rate))
                cin += spec.growth_rate
            layers.append(AvgPool(2))
    if spec.block_family != "plain":
        layers.append(ReLU())
    layers += [GlobalAvgPool(), Dense(cin, 1)]
    return Sequential(layers)


@lru_cache(maxsize=None)
def network(spec):
    return _build(spec)


def param_count(spec):
    return int(sum(np.prod(s) for s in network(spec).param_shapes()))


def unflatten(spec, flat):
    views = []
    i = 0
    for s in network(spec).param_shapes():
        n = int(np.prod(s))
        views.append(flat[i : i + n].reshape(s))
        i += n
    return views


def flatten(arrays):
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_auc: float


@dataclass(eq=False)
class TrainedModel:
    spec: ModelSpec
    params: np.ndarray
    history: list = field(default_factory=list)
    best_epoch: int = 0

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.spec),):
            raise ConfigError(
                f"parameter vector has {self.params.size} values, spec needs {param_count(self.spec)}"
            )

    def views(self):
        return unflatten(self.spec, self.params)

    @property
    def model_id(self):
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.params.astype("<f8").tobytes())
        return h.hexdigest()[:16]


def init_model(spec, seed=0):
    rng = np.random.default_rng(seed)
    return TrainedModel(spec, flatten(network(spec).init_params(rng)))


def _check_batch(spec, batch):
    batch = np.asarray(batch, dtype=np.float64)
    want = (spec.input_side, spec.input_side, 3)
    if batch.ndim != 4 or batch.shape[1:] != want:
        raise ShapeError(f"expected batch of shape (N, {want[0]}, {want[1]}, {want[2]}), got {batch.shape}")
    return batch


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logits(model, batch):
    batch = _check_batch(model.spec, batch)
    z, _ = network(model.spec).forward(batch - 0.5, model.views())
    return z[:, 0]


_LO = np.finfo(np.float64).tiny
_HI = np.nextafter(1.0, 0.0)


def forward(model, batch):
    """Scores in the open interval (0, 1), one per sample."""
    return np.clip(_sigmoid(logits(model, batch)), _LO, _HI)


def weighted_bce(z, y, pos_weight):
    """Mean weighted binary cross-entropy on logits and its gradient."""
    n = len(y)
    loss = np.sum(pos_weight * y * np.logaddexp(0.0, -z) + (1 - y) * np.logaddexp(0.0, z)) / n
    s = _sigmoid(z)
    dz = (pos_weight * y * (s - 1.0) + (1 - y) * s) / n
    return loss, dz


def backward(model, batch, labels, pos_weight=1.0):
    """Return ``(loss, gradient)`` with the gradient as a flat vector."""
    batch = _check_batch(model.spec, batch)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (batch.shape[0],) or not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be a length-N vector of 0/1")
    net = network(model.spec)
    params = model.views()
    z, caches = net.forward(batch - 0.5, params)
    loss, dz = weighted_bce(z[:, 0], y, pos_weight)
    _, grads = net.backward(dz[:, None], params, caches)
    return float(loss), flatten(grads)


def prepare_inputs(tiles, side):
    """Stack ImageTiles (or HxWx3 arrays) resampled to ``side`` pixels."""
    out = np.empty((len(tiles), side, side, 3))
    for i, t in enumerate(tiles):
        px = getattr(t, "pixels", t)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"tile {i} is not an RGB image (shape {px.shape})")
        out[i] = area_resample(px, side)
    return out


def predict_score(model, tile):
    return float(predict_scores(model, [tile])[0])


def predict_scores(model, tiles, batch_size=64):
    if len(tiles) == 0:
        return np.empty(0)
    out = []
    for i in range(0, len(tiles), batch_size):
        out.append(forward(model, prepare_inputs(tiles[i : i + batch_size], model.spec.input_side)))
    return np.concatenate(out)


def score_array(model, x, batch_size=64):
    return np.concatenate(
        [forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    ) if len(x) else np.empty(0)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    pos_weight: float | None = None  # None: negatives/positives of the train split
    optimizer: str = "momentum"
    momentum: float = 0.9

    def __post_init__(self):
        errs = []
        if not self.learning_rate >= 0:
            errs.append("learning_rate must be >= 0")
        if self.pos_weight is not None and not self.pos_weight > 0:
            errs.append("pos_weight must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            errs.append("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "momentum"):
            errs.append("optimizer must be 'sgd' or 'momentum'")
        if errs:
            raise ConfigError("; ".join(errs))


def train(x, y, split, spec, cfg, init=None):
    """Mini-batch SGD; returns the parameters of the best validation-AUC epoch.

    ``x`` is an (N, side, side, 3) array of resampled tiles, ``y`` the 0/1
    labels and ``split`` a :class:`~hmfdetect.dataset.DatasetSplit`.
    """
    tr = np.asarray(split.train, dtype=np.int64)
    va = np.asarray(split.val, dtype=np.int64)
    if len(tr) == 0 or len(va) == 0:
        raise ConfigError("train and validation splits must be non-empty")
    y = np.asarray(y, dtype=np.float64)
    pos_weight = cfg.pos_weight
    if pos_weight is None:
        n_pos = y[tr].sum()
        pos_weight = float((len(tr) - n_pos) / n_pos) if n_pos else 1.0
    model = init if init is not None else init_model(spec, cfg.seed)
    params = model.params.copy()
    velocity = np.zeros_like(params)
    mu = cfg.momentum if cfg.optimizer == "momentum" else 0.0
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    best = (-np.inf, 0, params.copy())
    work = TrainedModel(spec, params)
    for epoch in range(1, cfg.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss, grad = backward(work, x[idx], y[idx], pos_weight)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(epoch)
            velocity *= mu
            velocity -= cfg.learning_rate * grad
            params += velocity
            total += loss * len(idx)
        mean_loss = total / len(order)
        if not np.isfinite(mean_loss) or not np.all(np.isfinite(params)):
            raise DivergenceError(epoch)
        val_scores = score_array(work, x[va])
        val_auc = auc_score(val_scores, y[va]) if 0 < y[va].sum() < len(va) else float("nan")
        history.append(EpochRecord(epoch, mean_loss, val_auc))
        log.info("epoch %d loss %.4f val_auc %.4f", epoch, mean_loss, val_auc)
        key = val_auc if np.isfinite(val_auc) else -np.inf
        if best[1] == 0 or key > best[0]:
            best = (key, epoch, params.copy())
    return TrainedModel(spec, best[2], history, best_epoch=best[1])


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"HMFCKPT\x00"
_VERSION = 1


def checkpoint_bytes(model):
    header = {
        "spec": model.spec.to_dict(),
        "n_params": int(model.params.size),
        "best_epoch": model.best_epoch,
        "history": [[h.epoch, h.loss, h.val_auc] for h in model.history],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<II", _VERSION, len(hb)) + hb + model.params.astype("<f8").tobytes()


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data, str(path))


def checkpoint_from_bytes(data, name="<bytes>"):
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{name}: not a model checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != _VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    body = data[16 + hlen :]
    if len(body) != 8 * header["n_params"]:
        raise CheckpointError(f"{name}: truncated parameter block")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return TrainedModel(
        ModelSpec.from_dict(header["spec"]),
        params,
        [EpochRecord(int(e), float(l), float(a)) for e, l, a in header["history"]],
        best_epoch=int(header["best_epoch"]),
    )
