"""Small classifiers on top of the autodiff engine.

Four fixed architectures, each with a designated split point separating the
feature extractor from the classifier head:

- mlp2:          784 -> 128 -> 10
- cnn3-mnist:    3 conv blocks (8, 16, 32 ch, 3x3, relu, 2x2 pool) + dense 10
- cnn4-cifar:    4 conv blocks (16, 32, 64, 64) + dense 10
- resnet8-cifar: 8 conv layers with identity skips + dense 10 (stretch config)

Training is plain mini-batch SGD with momentum or Adam, fully deterministic
under a fixed seed.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "Model", "TrainConfig", "TrainingDiverged", "build_model", "losses",
    "loss", "input_gradient", "accuracy", "train_epoch", "train",
    "split", "reinit_head", "save_model", "load_model", "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"UPKT"
CHECKPOINT_VERSION = 1
DEFAULT_CLAMP = 30.0


class TrainingDiverged(RuntimeError):
    pass


# Layer tuples: ("conv", pname, cin, cout), ("relu",), ("pool",),
# ("flatten",), ("dense", pname, din, dout), ("res2", pname, ch).
# A "res2" layer is relu(conv_b(relu(conv_a(x))) + x) with an identity skip.

_ARCH = {
    "mlp2": {
        "input": (784,),
        "layers": [("dense", "fc1", 784, 128), ("relu",),
                   ("dense", "fc2", 128, 10)],
        "split": 2,          # extractor = fc1+relu, head = fc2
    },
    "cnn3-mnist": {
        "input": (1, 28, 28),
        "layers": [("conv", "c1", 1, 8), ("relu",), ("pool",),
                   ("conv", "c2", 8, 16), ("relu",), ("pool",),
                   ("conv", "c3", 16, 32), ("relu",), ("pool",),
                   ("flatten",), ("dense", "fc", 32 * 3 * 3, 10)],
        "split": 9,          # after the last pool; head = flatten + dense
    },
    "cnn4-cifar": {
        "input": (3, 32, 32),
        "layers": [("conv", "c1", 3, 16), ("relu",), ("pool",),
                   ("conv", "c2", 16, 32), ("relu",), ("pool",),
                   ("conv", "c3", 32, 64), ("relu",), ("pool",),
                   ("conv", "c4", 64, 64), ("relu",), ("pool",),
                   ("flatten",), ("dense", "fc", 64 * 2 * 2, 10)],
        "split": 12,
    },
    "resnet8-cifar": {
        "input": (3, 32, 32),
        "layers": [("conv", "c0", 3, 16), ("relu",), ("pool",),
                   ("res2", "r1", 16), ("pool",),
                   ("res2", "r2", 16), ("pool",),
                   ("res2", "r3", 16),
                   ("conv", "c7", 16, 32), ("relu",), ("pool",),
                   ("flatten",), ("dense", "fc", 32 * 2 * 2, 10)],
        "split": 11,
    },
}


def _layer_params(layer):
    kind = layer[0]
    if kind == "conv":
        _, name, cin, cout = layer
        return [(f"{name}.w", (cout, cin, 3, 3), cin * 9),
                (f"{name}.b", (cout,), cin * 9)]
    if kind == "dense":
        _, name, din, dout = layer
        return [(f"{name}.w", (din, dout), din),
                (f"{name}.b", (dout,), din)]
    if kind == "res2":
        _, name, ch = layer
        fan = ch * 9
        return [(f"{name}.wa", (ch, ch, 3, 3), fan), (f"{name}.ba", (ch,), fan),
                (f"{name}.wb", (ch, ch, 3, 3), fan), (f"{name}.bb", (ch,), fan)]
    return []


def _apply_layer(layer, h):
    kind = layer[0]
    if kind == "conv":
        _, name, _, _ = layer
        return ad.bias_add(ad.conv2d(h, ad.leaf(f"{name}.w")), ad.leaf(f"{name}.b"))
    if kind == "relu":
        return ad.relu(h)
    if kind == "pool":
        return ad.maxpool2(h)
    if kind == "dense":
        _, name, _, _ = layer
        return ad.bias_add(ad.matmul(h, ad.leaf(f"{name}.w")), ad.leaf(f"{name}.b"))
    if kind == "res2":
        _, name, _ = layer
        a = ad.relu(ad.bias_add(ad.conv2d(h, ad.leaf(f"{name}.wa")),
                                ad.leaf(f"{name}.ba")))
        b = ad.bias_add(ad.conv2d(a, ad.leaf(f"{name}.wb")), ad.leaf(f"{name}.bb"))
        return ad.relu(ad.add(b, h))
    raise ValueError(f"unknown layer {kind}")


class Model:
    """A classifier (or sub-model) over shared parameter arrays.

    A trained model is frozen by convention: evaluation paths never mutate
    `params`, so one instance can be shared across threads.  Sub-models made
    by `split` alias the same parameter dict.
    """

    def __init__(self, arch, layers, params, split_index, seed, input_shape):
        self.arch = arch
        self.layers = layers
        self.params = params
        self.split_index = split_index
        self.seed = seed
        self.input_shape = tuple(input_shape)
        self._graphs = {}

    @property
    def param_names(self):
        names = []
        for layer in self.layers:
            names.extend(n for n, _, _ in _layer_params(layer))
        return names

    def _flatten_layer_size(self):
        # flatten output width, inferred from the first dense layer after it
        for i, layer in enumerate(self.layers):
            if layer[0] == "flatten":
                return self.layers[i + 1][2]
        return None

    def _net(self):
        """Symbolic logits node from the 'x' leaf through all layers."""
        h = ad.leaf("x")
        flat = self._flatten_layer_size()
        for layer in self.layers:
            if layer[0] == "flatten":
                h = ad.reshape(h, (-1, flat))
            else:
                h = _apply_layer(layer, h)
        return h

    def _logits_graph(self):
        if "logits" not in self._graphs:
            self._graphs["logits"] = ad.Graph(self._net())
        return self._graphs["logits"]

    def _loss_graph(self, clamp_c):
        """(Graph of summed clamped losses, per-sample loss node for aux)."""
        key = ("loss", float(clamp_c))
        if key not in self._graphs:
            y = ad.leaf("y", differentiable=False)
            vec = ad.clamp(ad.softmax_xent(self._net(), y), 0.0, clamp_c)
            self._graphs[key] = (ad.Graph(ad.ssum(vec)), vec)
        return self._graphs[key]

    def _bindings(self, x, extra=None):
        b = dict(self.params)
        b["x"] = x
        if extra:
            b.update(extra)
        return b

    def forward(self, x):
        """Logits (or extractor features) for a batch; returns (N, out)."""
        x = _shape_batch(self, x)
        return self._logits_graph().forward(self._bindings(x))

    def features(self, x):
        out = self.forward(x)
        return out.reshape(out.shape[0], -1)

    @property
    def feature_dim(self):
        probe = np.zeros((1,) + self.input_shape)
        return self.features(probe).shape[1]


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 64
    epochs: int = 1
    optimizer: str = "sgd"          # "sgd" (momentum 0.9) or "adam"
    seed: int = 0
    clamp_c: float = DEFAULT_CLAMP
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.clamp_c <= 0:
            raise ValueError("clamp_c must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def build_model(arch, seed=0):
    """Fresh model with He-style uniform fan-in initialization."""
    if arch not in _ARCH:
        raise ValueError(f"unknown architecture {arch!r}")
    cfg = _ARCH[arch]
    params = {}
    ss = np.random.SeedSequence((seed, _arch_tag(arch)))
    children = iter(ss.spawn(256))
    for layer in cfg["layers"]:
        for name, shape, fan_in in _layer_params(layer):
            rng = np.random.default_rng(next(children))
            if len(shape) == 1:          # bias
                params[name] = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, size=shape)
    return Model(arch, list(cfg["layers"]), params, cfg["split"], seed,
                 cfg["input"])


def _arch_tag(arch):
    return int.from_bytes(arch.encode()[:8], "little")


def _shape_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    want = model.input_shape
    if x.shape[1:] != want and x.ndim >= 2:
        if int(np.prod(x.shape[1:])) == int(np.prod(want)):
            x = x.reshape((-1,) + want)
        else:
            raise ad.ShapeError(f"input shape {x.shape[1:]}, expected {want}")
    return x


def losses(model, x, y, clamp_c=DEFAULT_CLAMP):
    """Per-sample cross-entropy clamped to [0, clamp_c]; shape (N,)."""
    x = _shape_batch(model, x)
    graph, vec = model._loss_graph(clamp_c)
    _, _, (vals,) = graph.value_and_grad(
        model._bindings(x, {"y": np.asarray(y)}), [], aux=[vec])
    return vals


def loss(model, x, y, clamp_c=DEFAULT_CLAMP):
    """Loss of a single sample (x without batch axis, y an int label)."""
    return float(losses(model, np.asarray(x)[None], [int(y)], clamp_c)[0])


def losses_and_input_grad(model, x, y, clamp_c=DEFAULT_CLAMP):
    """Per-sample clamped losses and d(loss)/d(input), one pass.

    Per-sample gradients are exact because the summed objective decouples
    across the batch.  Where the clamp is active the gradient is zero.
    """
    x = _shape_batch(model, x)
    graph, vec = model._loss_graph(clamp_c)
    _, grads, (vals,) = graph.value_and_grad(
        model._bindings(x, {"y": np.asarray(y)}), ["x"], aux=[vec])
    return vals, grads["x"]


def input_gradient(model, x, y, clamp_c=DEFAULT_CLAMP):
    """d(loss)/d(input); accepts one sample (no batch axis) or a batch."""
    xb = np.asarray(x, dtype=np.float64)
    if xb.shape == model.input_shape:
        _, g = losses_and_input_grad(model, xb[None], [int(y)], clamp_c)
        return g[0]
    _, g = losses_and_input_grad(model, xb, y, clamp_c)
    return g


def param_gradients(model, x, y, clamp_c=DEFAULT_CLAMP):
    """(total loss, dict of parameter gradients) for one batch."""
    x = _shape_batch(model, x)
    graph, _ = model._loss_graph(clamp_c)
    total, grads = graph.value_and_grad(
        model._bindings(x, {"y": np.asarray(y)}), model.param_names)
    return float(total), grads


def accuracy(model, dataset):
    """Fraction of samples whose argmax logit matches the label; argmax ties
    break toward the lowest class index (numpy argmax convention)."""
    if len(dataset.labels) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    correct = 0
    for xb, yb in _eval_batches(dataset, 256):
        pred = model.forward(_shape_batch(model, xb)).argmax(axis=1)
        correct += int((pred == yb).sum())
    return correct / len(dataset.labels)


def _eval_batches(dataset, batch_size):
    n = len(dataset.labels)
    for s in range(0, n, batch_size):
        yield dataset.images[s:s + batch_size], dataset.labels[s:s + batch_size]


class OptimizerState:
    """Momentum / Adam buffers, persistent across epochs."""

    def __init__(self):
        self.vel = {}
        self.m = {}
        self.v = {}
        self.t = 0


def train_epoch(model, dataset, cfg, state=None, epoch=0, param_names=None):
    """One pass over the dataset; returns mean per-sample loss.

    Mutates model.params in place.  Shuffle order is a pure function of
    (cfg.seed, epoch) so interrupted runs replay identically.
    """
    if len(dataset.labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    if state is None:
        state = OptimizerState()
    if param_names is None:
        param_names = model.param_names
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7919, epoch)))
    order = rng.permutation(len(dataset.labels))
    total, count = 0.0, 0
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        xb = _shape_batch(model, dataset.images[idx])
        yb = dataset.labels[idx]
        graph, _ = model._loss_graph(cfg.clamp_c)
        try:
            batch_loss, grads = graph.value_and_grad(
                model._bindings(xb, {"y": yb}), param_names)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at epoch {epoch}") from exc
        if not np.isfinite(batch_loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        total += float(batch_loss)
        count += len(idx)
        scale = 1.0 / len(idx)
        if cfg.optimizer == "sgd":
            for name in param_names:
                g = grads[name] * scale
                v = state.vel.get(name)
                v = cfg.momentum * v + g if v is not None else g
                state.vel[name] = v
                model.params[name] = model.params[name] - cfg.lr * v
        else:
            state.t += 1
            b1, b2, eps = 0.9, 0.999, 1e-8
            for name in param_names:
                g = grads[name] * scale
                m = state.m.get(name, 0.0) * b1 + (1 - b1) * g
                v = state.v.get(name, 0.0) * b2 + (1 - b2) * g * g
                state.m[name], state.v[name] = m, v
                mhat = m / (1 - b1 ** state.t)
                vhat = v / (1 - b2 ** state.t)
                model.params[name] = model.params[name] - cfg.lr * mhat / (np.sqrt(vhat) + eps)
    return total / count


def train(model, dataset, cfg, on_epoch=None):
    """Full training run; on_epoch(epoch, mean_loss) after each epoch."""
    state = OptimizerState()
    history = []
    for epoch in range(cfg.epochs):
        mean_loss = train_epoch(model, dataset, cfg, state, epoch)
        history.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return history


# ---------------------------------------------------------------- split

def split(model):
    """(extractor, head) sub-models sharing the parent's parameter arrays."""
    k = model.split_index
    if not (0 <= k <= len(model.layers)):
        raise ValueError(f"invalid split index {k}")
    ext = Model(model.arch + "[ext]", model.layers[:k], model.params, 0,
                model.seed, model.input_shape)
    probe = np.zeros((1,) + model.input_shape)
    feat_shape = ext.forward(probe).shape[1:] if k > 0 else model.input_shape
    head = Model(model.arch + "[head]", model.layers[k:], model.params, 0,
                 model.seed, feat_shape)
    return ext, head


def reinit_head(model, seed):
    """Redraw the classifier head parameters; extractor untouched bit-exactly."""
    k = model.split_index
    head_layers = model.layers[k:]
    ss = np.random.SeedSequence((seed, _arch_tag(model.arch), 101))
    children = iter(ss.spawn(64))
    for layer in head_layers:
        for name, shape, fan_in in _layer_params(layer):
            rng = np.random.default_rng(next(children))
            if len(shape) == 1:          # bias
                model.params[name] = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / fan_in)
                model.params[name] = rng.uniform(-limit, limit, size=shape)
    model._graphs.clear()
    return model


# ---------------------------------------------------------------- checkpoints

def _write_str(f, s):
    raw = s.encode()
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f):
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode()


def save_model(model, path):
    """Versioned binary checkpoint: UPKT header + parameters in order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(f, model.arch)
        f.write(struct.pack("<Iq", model.split_index, model.seed))
        names = model.param_names
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = model.params[name]
            _write_str(f, name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = _read_str(f)
        split_index, seed = struct.unpack("<Iq", f.read(12))
        model = build_model(arch, seed=seed)
        model.split_index = split_index
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            name = _read_str(f)
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(8 * int(np.prod(shape))), dtype="<f8")
            model.params[name] = data.reshape(shape).copy()
    return model
