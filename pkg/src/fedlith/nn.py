"""Minimal differentiable model engine over feature tensors.

Models are flat float64 parameter vectors plus a layer list; gradients are
analytic backprop, optionally restricted to the global or local parameter
block. Everything here is a pure function of its inputs, so values can be
shared freely across client threads.

Layer vocabulary: conv2d (NHWC, valid/same padding), relu, maxpool (k=stride),
dense (flattens input), and two test-only heads used by the optimizer and
convergence tests: ``quadratic`` (loss 0.5*||w - target||^2) and
``linear_loss`` (loss coef . w). Models without a test head end in a 2-logit
softmax cross-entropy.
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np

from fedlith.errors import ConfigurationError, NumericError
from fedlith import kernels

BLOCKS = ("global", "local", "full")

_PARAM_LAYERS = ("conv2d", "dense", "quadratic", "linear_loss")
_LOSS_LAYERS = ("quadratic", "linear_loss")


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint global/local index sets covering [0, P)."""

    global_indices: np.ndarray
    local_indices: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.global_indices, dtype=np.int64)
        l = np.asarray(self.local_indices, dtype=np.int64)
        object.__setattr__(self, "global_indices", g)
        object.__setattr__(self, "local_indices", l)
        if np.intersect1d(g, l).size:
            raise ConfigurationError("global and local index sets overlap")
        total = g.size + l.size
        union = np.union1d(g, l)
        if union.size != total or (total and (union[0] != 0 or union[-1] != total - 1)):
            raise ConfigurationError("blocks must partition [0, P)")
        if np.any(np.diff(g) <= 0) or np.any(np.diff(l) <= 0):
            raise ConfigurationError("block index sets must be sorted ascending")

    @property
    def size(self) -> int:
        return self.global_indices.size + self.local_indices.size

    def indices(self, block: str) -> np.ndarray:
        if block == "global":
            return self.global_indices
        if block == "local":
            return self.local_indices
        if block == "full":
            return np.arange(self.size, dtype=np.int64)
        raise ConfigurationError(f"unknown block {block!r}")


@dataclass
class ParamVector:
    """Flat float64 parameter vector tied to a block partition."""

    values: np.ndarray
    partition: BlockPartition

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.partition.size:
            raise ConfigurationError(
                f"parameter vector length {self.values.size} does not match "
                f"partition size {self.partition.size}"
            )
        if not np.isfinite(self.values).all():
            raise NumericError("parameter vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.partition)


@dataclass
class Batch:
    """Stacked inputs (B, ...) and integer labels (B,).

    ``conv_cols`` is an optional precomputed patch tensor (B, OH*OW, kh*kw*C)
    for a model whose first layer is a valid-padding conv: it lets a training
    loop skip per-step patch extraction. When given, ``inputs`` may be None.
    """

    inputs: np.ndarray | None
    labels: np.ndarray
    conv_cols: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs is None:
            if self.conv_cols is None:
                raise ConfigurationError("batch needs inputs or precomputed patches")
            if len(self.conv_cols) != len(self.labels) or len(self.labels) < 1:
                raise ConfigurationError("batch patches and labels must align and be nonempty")
            return
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if len(self.inputs) != len(self.labels) or len(self.labels) < 1:
            raise ConfigurationError("batch inputs and labels must align and be nonempty")

    def __len__(self) -> int:
        return len(self.labels)


def _layer_param_count(layer: dict, in_shape) -> int:
    t = layer["type"]
    if t == "conv2d":
        kh, kw = layer["kernel"]
        return layer["filters"] * in_shape[2] * kh * kw + layer["filters"]
    if t == "dense":
        d = int(np.prod(in_shape))
        return d * layer["units"] + layer["units"]
    if t == "quadratic":
        return len(layer["target"])
    if t == "linear_loss":
        return len(layer["coef"])
    return 0


def _conv_out_shape(in_shape, layer):
    h, w, _ = in_shape
    kh, kw = layer["kernel"]
    s = layer.get("stride", 1)
    if layer.get("padding", "valid") == "same":
        ph, pw = kh - 1, kw - 1
        h, w = h + ph, w + pw
    oh = (h - kh) // s + 1
    ow = (w - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"conv layer {layer.get('name')} output collapses to zero size")
    return (oh, ow, layer["filters"])


class ModelSpec:
    """Layer list + input shape + global/local layer assignment.

    Serializes to a JSON document with fields ``layers``, ``input_shape`` and
    ``global_layers``. Parameterized layers need unique names; global_layers
    lists the names whose parameters form the global block.
    """

    def __init__(self, layers, input_shape, global_layers):
        self.layers = [dict(l) for l in layers]
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.global_layers = list(global_layers)
        self._validate_and_index()

    def _validate_and_index(self):
        names = []
        offset = 0
        self.slices = {}
        shape = self.input_shape
        self._shapes = [shape]
        self._has_loss_layers = any(l["type"] in _LOSS_LAYERS for l in self.layers)
        for i, layer in enumerate(self.layers):
            t = layer.get("type")
            if t not in ("conv2d", "relu", "maxpool", "dense") + _LOSS_LAYERS:
                raise ConfigurationError(f"layer {i}: unknown type {t!r}")
            if shape is None and t not in _LOSS_LAYERS:
                raise ConfigurationError(
                    f"layer {i}: {t} layer requires an input_shape"
                )
            if t in _PARAM_LAYERS:
                name = layer.get("name")
                if not name or name in names:
                    raise ConfigurationError(f"layer {i}: parameterized layers need unique names")
                names.append(name)
                n = _layer_param_count(layer, shape)
                self.slices[name] = slice(offset, offset + n)
                offset += n
            if t == "conv2d":
                if shape is None or len(shape) != 3:
                    raise ConfigurationError(f"layer {i}: conv2d needs an H*W*C input")
                shape = _conv_out_shape(shape, layer)
            elif t == "maxpool":
                k = layer.get("size", 2)
                if shape[0] % k or shape[1] % k:
                    raise ConfigurationError(f"layer {i}: maxpool size {k} does not divide {shape[:2]}")
                shape = (shape[0] // k, shape[1] // k, shape[2])
            elif t == "dense":
                shape = (layer["units"],)
            self._shapes.append(shape)
        self.param_count = offset
        if not self._has_loss_layers:
            if shape != (2,):
                raise ConfigurationError(
                    f"model must end in 2 logits for the softmax head, got {shape}"
                )
        unknown = [n for n in self.global_layers if n not in names]
        if unknown:
            raise ConfigurationError(f"global_layers references unknown layers {unknown}")
        g_idx, l_idx = [], []
        for name in names:
            sl = self.slices[name]
            (g_idx if name in self.global_layers else l_idx).append(
                np.arange(sl.start, sl.stop, dtype=np.int64)
            )
        self.partition = BlockPartition(
            np.concatenate(g_idx) if g_idx else np.empty(0, dtype=np.int64),
            np.concatenate(l_idx) if l_idx else np.empty(0, dtype=np.int64),
        )
        conv_names = [l.get("name") for l in self.layers if l["type"] == "conv2d"]
        self.first_conv = conv_names[0] if conv_names else None
        self._param_layer_idx = {
            l["name"]: i for i, l in enumerate(self.layers) if l["type"] in _PARAM_LAYERS
        }
        self._block_floor = {"full": 0}
        for block, sel in (("global", True), ("local", False)):
            idxs = [
                self._param_layer_idx[n]
                for n in self._param_layer_idx
                if (n in self.global_layers) == sel
            ]
            self._block_floor[block] = min(idxs) if idxs else len(self.layers)

    def first_conv_weights(self, values: np.ndarray) -> np.ndarray:
        """First conv layer weights viewed as (filters, channels, kh, kw)."""
        if self.first_conv is None:
            raise ConfigurationError("model has no conv layer")
        layer = next(l for l in self.layers if l.get("name") == self.first_conv)
        f = layer["filters"]
        kh, kw = layer["kernel"]
        c = self.input_shape[2]
        sl = self.slices[self.first_conv]
        return values[sl][: f * c * kh * kw].reshape(f, c, kh, kw)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        """He-init weights, zero biases; unit normal for test heads."""
        vals = np.zeros(self.param_count)
        shape = self.input_shape
        for layer in self.layers:
            t = layer["type"]
            if t == "conv2d":
                f, (kh, kw), c = layer["filters"], layer["kernel"], shape[2]
                sl = self.slices[layer["name"]]
                fan_in = c * kh * kw
                w = rng.standard_normal(f * fan_in) * math.sqrt(2.0 / fan_in)
                vals[sl.start:sl.start + f * fan_in] = w
                shape = _conv_out_shape(shape, layer)
            elif t == "dense":
                d = int(np.prod(shape))
                u = layer["units"]
                sl = self.slices[layer["name"]]
                vals[sl.start:sl.start + d * u] = rng.standard_normal(d * u) * math.sqrt(1.0 / d)
                shape = (u,)
            elif t == "maxpool":
                k = layer.get("size", 2)
                shape = (shape[0] // k, shape[1] // k, shape[2])
            elif t in _LOSS_LAYERS:
                sl = self.slices[layer["name"]]
                vals[sl] = rng.standard_normal(sl.stop - sl.start)
        return ParamVector(vals, self.partition)

    def flops_per_sample(self) -> dict:
        """Multiply-add count per forward sample, keyed by layer name."""
        out = {}
        shape = self.input_shape
        for layer in self.layers:
            t = layer["type"]
            if t == "conv2d":
                oshape = _conv_out_shape(shape, layer)
                kh, kw = layer["kernel"]
                out[layer["name"]] = oshape[0] * oshape[1] * layer["filters"] * shape[2] * kh * kw
                shape = oshape
            elif t == "maxpool":
                k = layer.get("size", 2)
                shape = (shape[0] // k, shape[1] // k, shape[2])
            elif t == "dense":
                out[layer["name"]] = int(np.prod(shape)) * layer["units"]
                shape = (layer["units"],)
        return out

    def to_json(self) -> str:
        doc = {
            "layers": self.layers,
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "global_layers": self.global_layers,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        doc = json.loads(text)
        return cls(doc["layers"], doc["input_shape"], doc["global_layers"])


def model_preset(name: str, channels: int = 32, grid: int = 12) -> ModelSpec:
    """Built-in architectures: 'desk' (single conv stage) and 'fig4'
    (two conv stages + two dense stages), plus 'linear' for convex tasks."""
    inp = (grid, grid, channels)
    if name == "desk":
        return ModelSpec(
            [
                {"type": "conv2d", "name": "conv1", "filters": 8, "kernel": [3, 3], "stride": 2},
                {"type": "relu"},
                {"type": "dense", "name": "out", "units": 2},
            ],
            inp,
            ["conv1"],
        )
    if name == "fig4":
        return ModelSpec(
            [
                {"type": "conv2d", "name": "conv1a", "filters": 16, "kernel": [3, 3], "stride": 1, "padding": "same"},
                {"type": "conv2d", "name": "conv1b", "filters": 16, "kernel": [3, 3], "stride": 1, "padding": "same"},
                {"type": "relu"},
                {"type": "maxpool", "size": 2},
                {"type": "conv2d", "name": "conv2a", "filters": 32, "kernel": [3, 3], "stride": 1, "padding": "same"},
                {"type": "conv2d", "name": "conv2b", "filters": 32, "kernel": [3, 3], "stride": 1, "padding": "same"},
                {"type": "relu"},
                {"type": "maxpool", "size": 2},
                {"type": "dense", "name": "fc1", "units": 64},
                {"type": "relu"},
                {"type": "dense", "name": "out", "units": 2},
            ],
            inp,
            ["conv1a", "conv1b", "conv2a", "conv2b", "fc1"],
        )
    if name == "linear":
        return ModelSpec(
            [{"type": "dense", "name": "out", "units": 2}],
            inp,
            ["out"],
        )
    raise ConfigurationError(f"unknown model preset {name!r}")


def quadratic_model(global_target, local_target=None) -> ModelSpec:
    """Test model with loss 0.5*||w_g - a||^2 (+ 0.5*||w_l - b||^2)."""
    layers = [{"type": "quadratic", "name": "qg", "target": list(global_target)}]
    if local_target is not None:
        layers.append({"type": "quadratic", "name": "ql", "target": list(local_target)})
    return ModelSpec(layers, None, ["qg"])


def _same_pad(x, kh, kw):
    ph0, pw0 = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (ph0, kh - 1 - ph0), (pw0, kw - 1 - pw0), (0, 0)))


def _check_finite(arr, layer_idx):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite intermediate at layer {layer_idx}")


def _forward_cache(model: ModelSpec, values: np.ndarray, batch: Batch):
    x = batch.inputs
    if x is not None and model.input_shape is not None \
            and x.shape[1:] != tuple(model.input_shape):
        raise ConfigurationError(
            f"batch shape {x.shape[1:]} does not match model input {model.input_shape}"
        )
    cache = []
    loss_acc = 0.0
    n_in = len(batch)
    for i, layer in enumerate(model.layers):
        t = layer["type"]
        if t == "conv2d":
            sl = model.slices[layer["name"]]
            f = layer["filters"]
            kh, kw = layer["kernel"]
            c = x.shape[3] if x is not None else model.input_shape[2]
            w = values[sl][: f * c * kh * kw].reshape(f, c, kh, kw)
            b = values[sl][f * c * kh * kw:]
            if i == 0 and batch.conv_cols is not None \
                    and layer.get("padding", "valid") == "valid":
                # precomputed patch rows: gather replaces extraction
                cols = batch.conv_cols.reshape(-1, kh * kw * c)
                y2 = cols @ kernels._weight_matrix(w)
                y2 += b
                oh, ow, _ = model._shapes[i + 1]
                in_shape = (n_in,) + tuple(model.input_shape)
                y = y2.reshape(n_in, oh, ow, f)
                cache.append((t, layer, in_shape, cols, w, in_shape))
            else:
                xp = _same_pad(x, kh, kw) if layer.get("padding", "valid") == "same" else x
                y, cols = kernels.conv2d_forward(xp, w, b, layer.get("stride", 1))
                cache.append((t, layer, xp.shape, cols, w, x.shape))
            x = y
        elif t == "relu":
            cache.append((t, layer, x > 0.0, None, None, None))
            x = np.maximum(x, 0.0)
        elif t == "maxpool":
            k = layer.get("size", 2)
            y, idx = kernels.maxpool_forward(x, k)
            cache.append((t, layer, idx, x.shape, None, None))
            x = y
        elif t == "dense":
            sl = model.slices[layer["name"]]
            u = layer["units"]
            in_shape = x.shape
            xf = x.reshape(len(batch), -1)
            d = xf.shape[1]
            w = values[sl][: d * u].reshape(d, u)
            b = values[sl][d * u:]
            cache.append((t, layer, xf, w, in_shape, None))
            x = xf @ w + b
        elif t == "quadratic":
            sl = model.slices[layer["name"]]
            diff = values[sl] - np.asarray(layer["target"], dtype=np.float64)
            loss_acc += 0.5 * float(diff @ diff)
            cache.append((t, layer, diff, None, None, None))
        elif t == "linear_loss":
            sl = model.slices[layer["name"]]
            coef = np.asarray(layer["coef"], dtype=np.float64)
            loss_acc += float(coef @ values[sl])
            cache.append((t, layer, coef, None, None, None))
        if t not in _LOSS_LAYERS:
            _check_finite(x, i)
    if model._has_loss_layers:
        logits = np.zeros((len(batch), 2))
        return loss_acc, logits, cache, None
    logits = x
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = -np.log(p[np.arange(len(batch)), batch.labels])
    loss = float(nll.mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite loss at softmax head")
    return loss, logits, cache, p


def _backward(model: ModelSpec, batch: Batch, cache, p, down_to: int = 0):
    grad = np.zeros(model.param_count)
    if model._has_loss_layers:
        # entry[2] is already the analytic gradient: (w - target) or coef
        for entry in cache:
            sl = model.slices[entry[1]["name"]]
            grad[sl] = entry[2]
        return grad
    n = len(batch)
    dy = p.copy()
    dy[np.arange(n), batch.labels] -= 1.0
    dy /= n
    for li in range(len(cache) - 1, down_to - 1, -1):
        t, layer = cache[li][0], cache[li][1]
        first = li == down_to
        if t == "dense":
            _, _, xf, w, in_shape, _ = cache[li]
            sl = model.slices[layer["name"]]
            d, u = w.shape
            grad[sl.start:sl.start + d * u] = (xf.T @ dy).ravel()
            grad[sl.start + d * u:sl.stop] = dy.sum(axis=0)
            if not first:
                dy = (dy @ w.T).reshape(in_shape)
        elif t == "relu":
            dy = dy * cache[li][2]
        elif t == "maxpool":
            _, _, idx, in_shape, _, _ = cache[li]
            dy = kernels.maxpool_backward(dy, idx, layer.get("size", 2), in_shape)
        elif t == "conv2d":
            _, _, xp_shape, cols, w, x_shape = cache[li]
            sl = model.slices[layer["name"]]
            dx, dw, db = kernels.conv2d_backward(
                dy, cols, xp_shape, w, layer.get("stride", 1), need_dx=not first
            )
            grad[sl.start:sl.start + dw.size] = dw.ravel()
            grad[sl.start + dw.size:sl.stop] = db
            if not first:
                if layer.get("padding", "valid") == "same":
                    kh, kw = layer["kernel"]
                    ph0, pw0 = (kh - 1) // 2, (kw - 1) // 2
                    h, w_ = x_shape[1], x_shape[2]
                    dx = dx[:, ph0:ph0 + h, pw0:pw0 + w_, :]
                dy = dx
    return grad


def forward(model: ModelSpec, params: ParamVector, batch: Batch):
    """Mean cross-entropy loss and per-sample logits."""
    loss, logits, _, _ = _forward_cache(model, params.values, batch)
    return loss, logits


def loss_and_gradient(model: ModelSpec, params: ParamVector, batch: Batch, block: str = "full"):
    """One combined forward/backward pass; gradient restricted to ``block``."""
    if block not in BLOCKS:
        raise ConfigurationError(f"block must be one of {BLOCKS}")
    loss, _, cache, p = _forward_cache(model, params.values, batch)
    # backprop can stop at the lowest layer owning parameters of the block
    g = _backward(model, batch, cache, p, down_to=model._block_floor[block])
    if block != "full":
        masked = np.zeros_like(g)
        idx = params.partition.indices(block)
        masked[idx] = g[idx]
        g = masked
    return loss, g


def gradient(model: ModelSpec, params: ParamVector, batch: Batch, block: str = "full") -> np.ndarray:
    """Analytic gradient of the batch loss; entries outside ``block`` are zero."""
    return loss_and_gradient(model, params, batch, block)[1]


def sgd_step(params: ParamVector, grad: np.ndarray, eta: float) -> ParamVector:
    """params - eta * grad. Entries with zero gradient are untouched."""
    if eta <= 0:
        raise ConfigurationError("learning rate must be positive")
    out = params.values - eta * grad
    if not np.isfinite(out).all():
        raise NumericError("non-finite parameters after sgd step")
    return ParamVector(out, params.partition)


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params: ParamVector, grad: np.ndarray, eta: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              indices=None):
    """Standard Adam with bias correction, restricted to ``indices`` when given.

    State entries outside the index set are untouched, so interleaved
    block-wise phases do not leak stale momentum into frozen blocks.
    """
    if eta <= 0:
        raise ConfigurationError("learning rate must be positive")
    if state.m.size != params.values.size:
        raise ConfigurationError("adam state size does not match parameters")
    t = state.t + 1
    out = params.values.copy()
    if indices is None:
        g = grad
        m = beta1 * state.m + (1 - beta1) * g
        v = beta2 * state.v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        out -= eta * mhat / (np.sqrt(vhat) + eps)
    else:
        g = grad[indices]
        m = state.m.copy()
        v = state.v.copy()
        m[indices] = beta1 * state.m[indices] + (1 - beta1) * g
        v[indices] = beta2 * state.v[indices] + (1 - beta2) * g * g
        mhat = m[indices] / (1 - beta1 ** t)
        vhat = v[indices] / (1 - beta2 ** t)
        out[indices] -= eta * mhat / (np.sqrt(vhat) + eps)
    if not np.isfinite(out).all():
        raise NumericError("non-finite parameters after adam step")
    return AdamState(m, v, t), ParamVector(out, params.partition)


def l2_penalty_gradient(params: ParamVector, lam: float) -> np.ndarray:
    """Decoupled weight-decay contribution lam * w."""
    if lam < 0:
        raise ConfigurationError("l2 strength must be nonnegative")
    return lam * params.values
