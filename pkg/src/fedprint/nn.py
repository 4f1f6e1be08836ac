"""Small numpy TDNN engine: spliced affine layers, statistics pooling, SGD.

A network is an ordered list of :class:`Layer`.  Frame-level layers splice
neighbouring frames (``context`` offsets, clamped at utterance edges) before
the affine transform.  An optional ``statspool`` layer turns each sequence
into one vector (mean and standard deviation over frames); every layer after
it works on one row per sequence.  Acoustic models have no pooling layer and
end in a per-frame softmax, the embedding extractor has one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .exceptions import (
    ConfigurationError,
    LayerRangeError,
    TrainingDivergenceError,
)

ACTIVATIONS = ("identity", "relu", "softmax", "statspool")
POOL_STD_FLOOR = 1e-12  # variance floor inside statistics pooling


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"
    context: tuple = (0,)

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(int(c) for c in self.context))
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("layer dimensions must be positive")
        ctx = self.context
        if 0 not in ctx or any(b <= a for a, b in zip(ctx, ctx[1:])):
            raise ConfigurationError(
                f"context {ctx} must be strictly increasing and contain 0")
        if any(abs(c) > 127 for c in ctx):
            raise ConfigurationError("context offsets must fit in a signed byte")
        if self.activation == "statspool":
            if ctx != (0,) or self.output_dim != 2 * self.input_dim:
                raise ConfigurationError(
                    "statspool layer needs context (0,) and output_dim == 2*input_dim")

    @property
    def frame_dim(self):
        """Width of one un-spliced input frame."""
        return self.input_dim // len(self.context)

    @property
    def has_params(self):
        return self.activation != "statspool"


def validate_topology(specs: Sequence[LayerSpec]) -> None:
    """Raise ConfigurationError unless ``specs`` chain into a valid network."""
    if not specs:
        raise ConfigurationError("a network needs at least one layer")
    pooled = False
    for i, spec in enumerate(specs):
        if spec.input_dim % len(spec.context):
            raise ConfigurationError(
                f"layer {i}: input_dim {spec.input_dim} not divisible by context size")
        if i > 0 and spec.input_dim != specs[i - 1].output_dim * len(spec.context):
            raise ConfigurationError(
                f"layer {i}: input_dim {spec.input_dim} != "
                f"{specs[i - 1].output_dim} x {len(spec.context)}")
        if spec.activation == "softmax" and i != len(specs) - 1:
            raise ConfigurationError("softmax is only allowed on the final layer")
        if spec.activation == "statspool":
            if pooled:
                raise ConfigurationError("at most one statistics pooling layer")
            if i == 0:
                raise ConfigurationError("statistics pooling cannot be the first layer")
            pooled = True
        elif pooled and spec.context != (0,):
            raise ConfigurationError("layers after pooling must use context (0,)")


@dataclass(frozen=True)
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class ModelParams:
    """Immutable network parameters plus lineage bookkeeping."""

    layers: tuple
    model_id: str
    parent_id: str | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        validate_topology([layer.spec for layer in layers])
        frozen = []
        for i, layer in enumerate(layers):
            s = layer.spec
            w = np.array(layer.weight, dtype=np.float64)
            b = np.array(layer.bias, dtype=np.float64)
            want_w = (s.output_dim, s.input_dim) if s.has_params else (0, 0)
            want_b = (s.output_dim,) if s.has_params else (0,)
            if w.shape != want_w or b.shape != want_b:
                raise ConfigurationError(
                    f"layer {i}: parameter shapes {w.shape}/{b.shape}, "
                    f"expected {want_w}/{want_b}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError(f"layer {i}: non-finite parameters")
            w.flags.writeable = False
            b.flags.writeable = False
            frozen.append(Layer(s, w, b))
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def specs(self):
        return [layer.spec for layer in self.layers]

    @property
    def input_dim(self):
        return self.layers[0].spec.frame_dim

    @property
    def output_dim(self):
        return self.layers[-1].spec.output_dim

    @property
    def n_hidden(self):
        """Number of hidden layers (every layer but the output one)."""
        return len(self.layers) - 1

    @property
    def pool_index(self):
        for i, spec in enumerate(self.specs):
            if spec.activation == "statspool":
                return i
        return None

    def same_topology(self, other: "ModelParams") -> bool:
        return self.specs == other.specs

    def parameter_vector(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weight.ravel())
            parts.append(layer.bias.ravel())
        return np.concatenate(parts)

    def content_hash(self) -> str:
        h = hashlib.sha1()
        for layer in self.layers:
            h.update(repr(layer.spec).encode())
            h.update(layer.weight.tobytes())
            h.update(layer.bias.tobytes())
        return h.hexdigest()[:16]

    def with_params(self, weights, biases, model_id=None, parent_id=None) -> "ModelParams":
        layers = [Layer(l.spec, w, b) for l, w, b in zip(self.layers, weights, biases)]
        out = ModelParams(tuple(layers), model_id or "", parent_id)
        if not model_id:
            out = replace(out, model_id="m-" + out.content_hash())
        return out

    def equal_params(self, other: "ModelParams") -> bool:
        if not self.same_topology(other):
            return False
        return all(np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
                   for a, b in zip(self.layers, other.layers))


@dataclass(frozen=True)
class ActivationTrace:
    layer_index: int
    frames: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")


def mlp_specs(input_dim, hidden, n_classes, contexts=None, activation="relu"):
    """Specs for a frame classifier: ``len(hidden)`` hidden layers then softmax.

    ``contexts`` gives one offset tuple per hidden layer (default ``(0,)``).
    """
    contexts = contexts or [(0,)] * len(hidden)
    if len(contexts) != len(hidden):
        raise ConfigurationError("need one context per hidden layer")
    specs, prev = [], input_dim
    for width, ctx in zip(hidden, contexts):
        specs.append(LayerSpec(prev * len(ctx), width, activation, tuple(ctx)))
        prev = width
    specs.append(LayerSpec(prev, n_classes, "softmax"))
    return specs


def init_model(specs: Sequence[LayerSpec], seed: int, model_id=None) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    validate_topology(specs)
    rng = np.random.default_rng(seed)
    layers = []
    for s in specs:
        if not s.has_params:
            layers.append(Layer(s, np.zeros((0, 0)), np.zeros(0)))
            continue
        a = np.sqrt(6.0 / (s.input_dim + s.output_dim))
        layers.append(Layer(s, rng.uniform(-a, a, (s.output_dim, s.input_dim)),
                            np.zeros(s.output_dim)))
    model = ModelParams(tuple(layers), model_id or "")
    if not model_id:
        model = replace(model, model_id="m-" + model.content_hash())
    return model


# --------------------------------------------------------------------------
# batched forward / backward over concatenated sequences


def splice_index(lengths, offsets) -> np.ndarray:
    """Row indices (N x |offsets|) into concatenated frames, edges clamped."""
    lengths = np.asarray(lengths, dtype=np.int64)
    starts = np.repeat(np.cumsum(lengths) - lengths, lengths)
    sizes = np.repeat(lengths, lengths)
    pos = np.arange(lengths.sum()) - starts
    idx = pos[:, None] + np.asarray(offsets, dtype=np.int64)[None, :]
    np.clip(idx, 0, (sizes - 1)[:, None], out=idx)
    return idx + starts[:, None]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softmax":
        return _softmax(z)
    return z


def _pool(h, lengths):
    starts = np.cumsum(lengths) - lengths
    n = np.asarray(lengths, dtype=np.float64)[:, None]
    mean = np.add.reduceat(h, starts, axis=0) / n
    dev = h - np.repeat(mean, lengths, axis=0)
    var = np.add.reduceat(dev * dev, starts, axis=0) / n
    std = np.sqrt(np.maximum(var, POOL_STD_FLOOR))
    return mean, std, dev, var


def _forward(model: ModelParams, X, lengths, stop=None):
    """Run layers ``0..stop-1`` (all by default) and keep what backprop needs."""
    lengths = np.asarray(lengths, dtype=np.int64)
    cache = []
    h = X
    for layer in model.layers[:stop]:
        s = layer.spec
        if s.activation == "statspool":
            mean, std, dev, var = _pool(h, lengths)
            cache.append({"pool": True, "lengths": lengths, "std": std, "dev": dev, "var": var})
            h = np.hstack([mean, std])
            lengths = np.ones(len(h), dtype=np.int64)
            continue
        if s.context == (0,):
            idx, xs = None, h
        else:
            idx = splice_index(lengths, s.context)
            xs = h[idx].reshape(len(h), -1)
        z = xs @ layer.weight.T + layer.bias
        a = _activate(s.activation, z)
        cache.append({"pool": False, "idx": idx, "xs": xs, "z": z, "a": a,
                      "rows": len(h)})
        h = a
    return h, cache


def _backward(model: ModelParams, cache, grad_top, top_is_logits):
    """Backpropagate ``grad_top``; return per-layer (dW, db) lists."""
    n = len(cache)
    dws, dbs = [None] * n, [None] * n
    g = grad_top
    for i in range(n - 1, -1, -1):
        layer, c = model.layers[i], cache[i]
        if c["pool"]:
            dws[i], dbs[i] = np.zeros((0, 0)), np.zeros(0)
            lengths = c["lengths"]
            w = g.shape[1] // 2
            dmean, dstd = g[:, :w], g[:, w:]
            live = (c["var"] > POOL_STD_FLOOR).astype(np.float64)
            coef = (dstd * live / c["std"]) / lengths[:, None]
            g = (np.repeat(dmean / lengths[:, None], lengths, axis=0)
                 + c["dev"] * np.repeat(coef, lengths, axis=0))
            continue
        act = layer.spec.activation
        if act == "relu":
            dz = g * (c["z"] > 0)
        elif act == "softmax" and not (i == n - 1 and top_is_logits):
            a = c["a"]
            dz = a * (g - np.sum(g * a, axis=1, keepdims=True))
        else:
            dz = g
        dws[i] = dz.T @ c["xs"]
        dbs[i] = dz.sum(axis=0)
        if i == 0:
            break
        dxs = dz @ layer.weight
        if c["idx"] is None:
            g = dxs
        else:
            k = len(layer.spec.context)
            g = np.zeros((c["rows"], dxs.shape[1] // k))
            np.add.at(g, c["idx"].ravel(), dxs.reshape(-1, g.shape[1]))
    return dws, dbs


def _as_batch(data):
    """Stack ``(frames, labels)`` pairs into one concatenated batch."""
    frames = [np.asarray(x, dtype=np.float64) for x, _ in data]
    lengths = np.array([len(x) for x in frames], dtype=np.int64)
    return np.vstack(frames), lengths, [y for _, y in data]


def _targets(model, ys, lengths):
    if model.pool_index is not None:
        return np.asarray([int(y) for y in ys], dtype=np.int64)
    return np.concatenate([np.asarray(y, dtype=np.int64).reshape(-1) for y in ys])


def loss_and_grads(model: ModelParams, X, y, lengths=None, loss="xent"):
    """Mean loss over output rows and its exact gradient.

    ``loss='xent'`` expects integer class targets and a softmax output layer;
    ``loss='mse'`` uses ``0.5 * ||output - y||^2`` averaged over rows.
    """
    X = np.asarray(X, dtype=np.float64)
    lengths = np.array([len(X)]) if lengths is None else np.asarray(lengths)
    out, cache = _forward(model, X, lengths)
    rows = len(out)
    if loss == "xent":
        y = np.asarray(y, dtype=np.int64)
        p = out[np.arange(rows), y]
        value = -np.mean(np.log(np.maximum(p, 1e-300)))
        if model.layers[-1].spec.activation == "softmax":
            g = out.copy()
            g[np.arange(rows), y] -= 1.0
            dws, dbs = _backward(model, cache, g / rows, top_is_logits=True)
        else:
            raise ConfigurationError("cross-entropy needs a softmax output layer")
    elif loss == "mse":
        diff = out - np.asarray(y, dtype=np.float64).reshape(out.shape)
        value = 0.5 * np.sum(diff * diff) / rows
        dws, dbs = _backward(model, cache, diff / rows, top_is_logits=False)
    else:
        raise ConfigurationError(f"unknown loss {loss!r}")
    return float(value), dws, dbs


def _check_input(model, X):
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"input frames have shape {X.shape}, model expects width {model.input_dim}")


def forward(model: ModelParams, utt, capture=None, pre_activation=False):
    """Per-frame outputs for one utterance, optionally capturing hidden layer ``capture``.

    ``utt`` is a T x D array or any object with a ``frames`` attribute.
    Hidden layers are numbered from 1.  Returns ``(outputs, trace)``.
    """
    X = np.asarray(getattr(utt, "frames", utt), dtype=np.float64)
    _check_input(model, X)
    if capture is not None and not 1 <= capture <= model.n_hidden:
        raise LayerRangeError(f"h={capture} outside 1..{model.n_hidden}")
    out, cache = _forward(model, X, [len(X)])
    trace = None
    if capture is not None:
        c = cache[capture - 1]
        if c["pool"]:
            raise LayerRangeError("cannot capture the pooling marker layer")
        frames = c["z"] if pre_activation else c["a"]
        trace = ActivationTrace(capture, frames)
    return out, trace


def hidden_activations(model: ModelParams, sequences, h, pre_activation=False):
    """Layer-``h`` outputs for many sequences at once, split per sequence.

    Only layers ``1..h`` are evaluated.  Layer ``h`` must sit before any
    pooling layer.
    """
    if not 1 <= h <= model.n_hidden:
        raise LayerRangeError(f"h={h} outside 1..{model.n_hidden}")
    pool = model.pool_index
    if pool is not None and h > pool:
        raise LayerRangeError("h must be a frame-level layer")
    frames = [np.asarray(getattr(s, "frames", s), dtype=np.float64) for s in sequences]
    X = np.vstack(frames)
    _check_input(model, X)
    lengths = [len(f) for f in frames]
    _, cache = _forward(model, X, lengths, stop=h)
    out = cache[-1]["z"] if pre_activation else cache[-1]["a"]
    return np.split(out, np.cumsum(lengths)[:-1])


def _chunked_outputs(model, data, chunk=256):
    """Final-layer outputs and targets, evaluated ``chunk`` sequences at a time."""
    outs, targets = [], []
    for start in range(0, len(data), chunk):
        X, lengths, ys = _as_batch(data[start:start + chunk])
        _check_input(model, X)
        out, _ = _forward(model, X, lengths)
        outs.append(out)
        if ys[0] is not None:
            targets.append(_targets(model, ys, lengths))
    return np.vstack(outs), (np.concatenate(targets) if targets else None)


def predict_proba(model: ModelParams, sequences):
    data = [(getattr(s, "frames", s), None) for s in sequences]
    return _chunked_outputs(model, data)[0]


def mean_loss(model: ModelParams, data) -> float:
    out, y = _chunked_outputs(model, _pairs(data))
    return float(-np.mean(np.log(np.maximum(out[np.arange(len(out)), y], 1e-300))))


def accuracy(model: ModelParams, data) -> float:
    out, y = _chunked_outputs(model, _pairs(data))
    return float(np.mean(np.argmax(out, axis=1) == y))


def _pairs(data):
    pairs = []
    for item in data:
        if hasattr(item, "frames"):
            if item.labels is None:
                raise ConfigurationError(f"utterance {item.utterance_id} has no labels")
            pairs.append((item.frames, item.labels))
        else:
            pairs.append(item)
    return pairs


def train_supervised(init: ModelParams, data, cfg: TrainConfig, model_id=None,
                     parent_id=None) -> ModelParams:
    """Mini-batch SGD on per-row cross-entropy.

    ``data`` holds ``(frames, labels)`` pairs (or labelled utterances).  For
    frame classifiers ``labels`` has one class per frame; for pooled networks
    it is one class per sequence.  Batches contain ``cfg.batch_size`` sequences.
    """
    data = _pairs(data)
    if not data:
        raise ConfigurationError("training data is empty")
    n_out = init.output_dim
    for x, y in data:
        x = np.asarray(x)
        _check_input(init, x)
        y = np.asarray(y)
        if np.any(y < 0) or np.any(y >= n_out):
            raise ConfigurationError(f"labels must lie in [0, {n_out})")
        if init.pool_index is None and y.shape != (len(x),):
            raise ConfigurationError("frame classifier needs one label per frame")
    weights = [l.weight.copy() for l in init.layers]
    biases = [l.bias.copy() for l in init.layers]
    if cfg.epochs == 0 or cfg.learning_rate == 0:
        return init.with_params(weights, biases, model_id, parent_id)

    rng = np.random.default_rng(cfg.seed)
    work = init.with_params(weights, biases, "work")
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            X, lengths, ys = _as_batch(batch)
            y = _targets(init, ys, lengths)
            loss, dws, dbs = loss_and_grads(work, X, y, lengths)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(epoch, loss)
            for w, b, dw, db in zip(weights, biases, dws, dbs):
                if w.size:
                    w -= lr * dw
                    b -= lr * db
            if not all(np.all(np.isfinite(w)) for w in weights):
                raise TrainingDivergenceError(epoch, float("nan"))
            work = _unsafe_rebind(work, weights, biases)
    return init.with_params(weights, biases, model_id, parent_id)


def _unsafe_rebind(model, weights, biases):
    # Training-loop view over the mutable buffers; never escapes this module.
    layers = tuple(Layer(l.spec, w, b) for l, w, b in zip(model.layers, weights, biases))
    obj = object.__new__(ModelParams)
    object.__setattr__(obj, "layers", layers)
    object.__setattr__(obj, "model_id", model.model_id)
    object.__setattr__(obj, "parent_id", model.parent_id)
    return obj


def fine_tune(global_model: ModelParams, client_data, cfg: TrainConfig,
              model_id=None) -> ModelParams:
    """Adapt every parameter of ``global_model`` to one client's data."""
    return train_supervised(global_model, client_data, cfg, model_id=model_id,
                            parent_id=global_model.model_id)


def grad_check(model: ModelParams, sample, eps=1e-6, n_checks=20, seed=0,
               loss="xent", grad_fn: Callable | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``n_checks`` parameters are drawn from every parameterised layer.  A custom
    ``grad_fn(model, X, y, lengths) -> (dws, dbs)`` can replace backprop.
    """
    X, y = sample[0], sample[1]
    lengths = sample[2] if len(sample) > 2 else None
    X = np.asarray(X, dtype=np.float64)
    if grad_fn is None:
        _, dws, dbs = loss_and_grads(model, X, y, lengths, loss)
    else:
        dws, dbs = grad_fn(model, X, y, lengths)
    rng = np.random.default_rng(seed)
    weights = [l.weight.copy() for l in model.layers]
    biases = [l.bias.copy() for l in model.layers]

    def value():
        m = _unsafe_rebind(model, weights, biases)
        return loss_and_grads(m, X, y, lengths, loss)[0]

    worst = 0.0
    for li, layer in enumerate(model.layers):
        if not layer.spec.has_params:
            continue
        for which, params, grads in (("w", weights, dws), ("b", biases, dbs)):
            arr = params[li]
            picks = rng.choice(arr.size, size=min(n_checks, arr.size), replace=False)
            for flat in picks:
                pos = np.unravel_index(flat, arr.shape)
                orig = arr[pos]
                arr[pos] = orig + eps
                up = value()
                arr[pos] = orig - eps
                down = value()
                arr[pos] = orig
                numeric = (up - down) / (2 * eps)
                analytic = grads[li][pos]
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
                worst = max(worst, err)
    return worst
