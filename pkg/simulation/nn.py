"""
Minimal convolutional network with hand-written forward and backward passes.

Parameters live in one flat float32 vector (FlatParams) described by a
segment table, so the federation layer can treat a model as a plain vector
and the aggregation rules can work on parameter deltas directly.

Tensors are numpy arrays laid out batch-first: images are (B, C, H, W),
vectors are (B, D).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from simulation.errors import LabError, ShapeError
from simulation.rng import RngStream

logger = logging.getLogger(__name__)

PARAM_DTYPE = np.float32


# ---------------------------------------------------------------------------
# Model description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    size: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


Layer = Union[Conv2D, MaxPool, ReLU, Flatten, Dense]

LAYER_TYPES = {
    "conv2d": Conv2D,
    "maxpool": MaxPool,
    "relu": ReLU,
    "flatten": Flatten,
    "dense": Dense,
}


def layer_from_dict(raw: Dict) -> Layer:
    """Build a layer from its JSON descriptor, e.g. {"type": "dense", "out_features": 10}."""
    kind = raw.get("type")
    if kind not in LAYER_TYPES:
        raise LabError(f"unknown layer type {kind!r}; expected one of {sorted(LAYER_TYPES)}")
    fields = {k: v for k, v in raw.items() if k != "type"}
    try:
        return LAYER_TYPES[kind](**fields)
    except TypeError as e:
        raise LabError(f"bad fields for {kind} layer: {e}") from e


def layer_to_dict(layer: Layer) -> Dict:
    kind = next(name for name, cls in LAYER_TYPES.items() if isinstance(layer, cls))
    return {"type": kind, **layer.__dict__}


@dataclass(frozen=True)
class ModelSpec:
    layers: Tuple[Layer, ...]
    input_shape: Tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = infer_shapes(self)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"model emits shape {shapes[-1]} but num_classes is {self.num_classes}"
            )


def default_cnn(input_shape: Sequence[int], num_classes: int) -> ModelSpec:
    """Two conv blocks followed by two dense layers."""
    return ModelSpec(
        layers=(
            Conv2D(16, 5, 5, 1), ReLU(), MaxPool(2),
            Conv2D(32, 5, 5, 1), ReLU(), MaxPool(2),
            Flatten(), Dense(128), ReLU(), Dense(num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def infer_shapes(model: ModelSpec) -> List[Tuple[int, ...]]:
    """Return [input_shape, out_0, out_1, ...]; raises ShapeError on any mismatch."""
    shape = tuple(model.input_shape)
    shapes = [shape]
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            if len(shape) != 3:
                raise ShapeError(f"layer {idx} (Conv2D) needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if layer.stride < 1 or layer.kernel_h > h or layer.kernel_w > w:
                raise ShapeError(f"layer {idx} (Conv2D) kernel/stride does not fit input {shape}")
            shape = (
                layer.out_channels,
                (h - layer.kernel_h) // layer.stride + 1,
                (w - layer.kernel_w) // layer.stride + 1,
            )
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ShapeError(f"layer {idx} (MaxPool) needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if layer.size < 1 or h < layer.size or w < layer.size:
                raise ShapeError(f"layer {idx} (MaxPool) size {layer.size} does not fit input {shape}")
            shape = (c, h // layer.size, w // layer.size)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ShapeError(f"layer {idx} (Dense) needs a flat input, got {shape}; add Flatten")
            shape = (layer.out_features,)
        elif not isinstance(layer, ReLU):
            raise LabError(f"layer {idx}: unsupported layer {layer!r}")
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    layer_index: int
    role: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def param_layout(model: ModelSpec) -> Tuple[Segment, ...]:
    shapes = infer_shapes(model)
    segments = []
    offset = 0
    for idx, layer in enumerate(model.layers):
        in_shape = shapes[idx]
        if isinstance(layer, Conv2D):
            tensors = [
                ("weight", (layer.out_channels, in_shape[0], layer.kernel_h, layer.kernel_w)),
                ("bias", (layer.out_channels,)),
            ]
        elif isinstance(layer, Dense):
            tensors = [("weight", (layer.out_features, in_shape[0])), ("bias", (layer.out_features,))]
        else:
            tensors = []
        for role, shape in tensors:
            seg = Segment(idx, role, shape, offset)
            segments.append(seg)
            offset += seg.size
    return tuple(segments)


@dataclass
class FlatParams:
    values: np.ndarray
    layout: Tuple[Segment, ...]

    def __post_init__(self):
        total = sum(seg.size for seg in self.layout)
        if self.values.ndim != 1 or total != self.values.shape[0]:
            raise ShapeError(f"layout covers {total} values but vector has shape {self.values.shape}")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), self.layout)


@dataclass
class FlatUpdate:
    """A parameter delta or gradient sharing its model's layout."""

    values: np.ndarray
    layout: Tuple[Segment, ...] = field(default=())

    def __len__(self) -> int:
        return int(self.values.shape[0])


def unflatten(params: FlatParams) -> Dict[Tuple[int, str], np.ndarray]:
    """Views into params.values keyed by (layer_index, role)."""
    return {
        (seg.layer_index, seg.role): params.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)
        for seg in params.layout
    }


def flatten(tensors: Dict[Tuple[int, str], np.ndarray], layout: Tuple[Segment, ...]) -> FlatParams:
    if not layout:
        return FlatParams(np.zeros(0, dtype=PARAM_DTYPE), layout)
    parts = [np.asarray(tensors[(seg.layer_index, seg.role)]).reshape(-1) for seg in layout]
    return FlatParams(np.concatenate(parts), layout)


def count_params(model: ModelSpec) -> int:
    return sum(seg.size for seg in param_layout(model))


def init_params(model: ModelSpec, stream: RngStream) -> FlatParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    layout = param_layout(model)
    rng = stream.generator()
    values = np.empty(sum(seg.size for seg in layout), dtype=PARAM_DTYPE)
    weights = {seg.layer_index: seg for seg in layout if seg.role == "weight"}
    for seg in layout:
        fan_in = int(np.prod(weights[seg.layer_index].shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        values[seg.offset:seg.offset + seg.size] = rng.uniform(-bound, bound, seg.size)
    return FlatParams(values, layout)


def zero_params(model: ModelSpec) -> FlatParams:
    layout = param_layout(model)
    return FlatParams(np.zeros(sum(seg.size for seg in layout), dtype=PARAM_DTYPE), layout)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Inputs with hard labels and, for distillation, teacher logits."""

    inputs: np.ndarray
    labels: np.ndarray
    soft_targets: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, positions: np.ndarray) -> "Batch":
        return Batch(
            inputs=self.inputs[positions],
            labels=self.labels[positions],
            soft_targets=None if self.soft_targets is None else self.soft_targets[positions],
            indices=None if self.indices is None else self.indices[positions],
        )

    def copy(self) -> "Batch":
        return Batch(
            inputs=self.inputs.copy(),
            labels=self.labels.copy(),
            soft_targets=None if self.soft_targets is None else self.soft_targets.copy(),
            indices=None if self.indices is None else self.indices.copy(),
        )


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    kd: float = 0.0

    @classmethod
    def from_alpha(cls, alpha: float) -> "LossWeights":
        return cls(ce=1.0 - alpha, kd=alpha)


def _check_inputs(model: ModelSpec, inputs: np.ndarray) -> None:
    if inputs.ndim != len(model.input_shape) + 1 or tuple(inputs.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"batch shape {tuple(inputs.shape)} does not match model input (B, {', '.join(map(str, model.input_shape))})"
        )
    if inputs.shape[0] < 1:
        raise ShapeError("batch must hold at least one example")


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------

def _conv_columns(x: np.ndarray, kh: int, kw: int, stride: int) -> Tuple[np.ndarray, int, int]:
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_forward(x, weight, bias, stride):
    o, _, kh, kw = weight.shape
    cols, ho, wo = _conv_columns(x, kh, kw, stride)
    out = cols @ weight.reshape(o, -1).T + bias
    out = out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, ho, wo)


def _conv_backward(dout, cache, weight, stride):
    x_shape, cols, ho, wo = cache
    o, c, kh, kw = weight.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ weight.reshape(o, -1)).reshape(x_shape[0], ho, wo, c, kh, kw)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx, dweight, dbias


def _pool_forward(x, size):
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    blocks = (
        x[:, :, :ho * size, :wo * size]
        .reshape(b, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, size * size)
    )
    # argmax picks the first maximum, so ties route gradient to one input
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_backward(dout, cache, size):
    x_shape, arg = cache
    b, c, ho, wo = dout.shape
    blocks = np.zeros((b, c, ho, wo, size * size), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    spread = (
        blocks.reshape(b, c, ho, wo, size, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho * size, wo * size)
    )
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :ho * size, :wo * size] = spread
    return dx


def _run_layers(model: ModelSpec, params: FlatParams, inputs: np.ndarray, keep: bool):
    _check_inputs(model, inputs)
    tensors = unflatten(params)
    x = np.asarray(inputs, dtype=params.values.dtype)
    caches = []
    activations = []
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            x, cache = _conv_forward(x, tensors[(idx, "weight")], tensors[(idx, "bias")], layer.stride)
        elif isinstance(layer, MaxPool):
            x, cache = _pool_forward(x, layer.size)
        elif isinstance(layer, ReLU):
            cache = x
            x = np.maximum(x, 0)
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            cache = x
            x = x @ tensors[(idx, "weight")].T + tensors[(idx, "bias")]
        if keep:
            caches.append(cache)
        activations.append(x)
    if not np.all(np.isfinite(x)):
        raise LabError("forward produced non-finite logits")
    return x, caches, activations


def forward(model: ModelSpec, params: FlatParams, inputs: np.ndarray) -> np.ndarray:
    """Raw logits, shape (B, num_classes)."""
    logits, _, _ = _run_layers(model, params, inputs, keep=False)
    return logits


def forward_activations(model: ModelSpec, params: FlatParams, inputs: np.ndarray) -> List[np.ndarray]:
    """Output of every layer, index-aligned with model.layers."""
    _, _, activations = _run_layers(model, params, inputs, keep=False)
    return activations


def _backward(model: ModelSpec, params: FlatParams, caches, dlogits: np.ndarray) -> np.ndarray:
    tensors = unflatten(params)
    grads = {}
    d = dlogits
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        cache = caches[idx]
        if isinstance(layer, Conv2D):
            weight = tensors[(idx, "weight")]
            d, grads[(idx, "weight")], grads[(idx, "bias")] = _conv_backward(d, cache, weight, layer.stride)
        elif isinstance(layer, MaxPool):
            d = _pool_backward(d, cache, layer.size)
        elif isinstance(layer, ReLU):
            d = d * (cache > 0)
        elif isinstance(layer, Flatten):
            d = d.reshape(cache)
        else:
            weight = tensors[(idx, "weight")]
            grads[(idx, "weight")] = d.T @ cache
            grads[(idx, "bias")] = d.sum(axis=0)
            d = d @ weight
    out = np.zeros_like(params.values)
    for seg in params.layout:
        out[seg.offset:seg.offset + seg.size] = grads[(seg.layer_index, seg.role)].reshape(-1)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabError(f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    return labels


def _check_logits(logits: np.ndarray, name: str = "logits") -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"{name} must be (B, N_class) with B >= 1, got {logits.shape}")
    return logits


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float = 1.0) -> float:
    """T^2 * mean KL(softmax(teacher/T) || softmax(student/T))."""
    if temperature <= 0:
        raise LabError(f"temperature must be positive, got {temperature}")
    student_logits = _check_logits(student_logits, "student logits")
    teacher_logits = _check_logits(teacher_logits, "teacher logits")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"student {student_logits.shape} vs teacher {teacher_logits.shape}")
    log_q = log_softmax(np.asarray(teacher_logits, dtype=np.float64) / temperature)
    log_p = log_softmax(np.asarray(student_logits, dtype=np.float64) / temperature)
    kl = np.maximum((np.exp(log_q) * (log_q - log_p)).sum(axis=1), 0.0)
    return float(temperature * temperature * kl.mean())


def grad_wrt_logits(logits: np.ndarray, label: int) -> np.ndarray:
    """dL_CE/dl_j = softmax(l)_j - onehot(label)_j for a single row."""
    logits = _check_logits(np.atleast_2d(logits))
    labels = _check_labels(np.array([label]), logits.shape[1])
    g = softmax(logits[:1])
    g[0, labels[0]] -= 1.0
    return g


def _weighted_loss(logits, batch: Batch, weights: LossWeights, temperature: float) -> float:
    loss = 0.0
    if weights.ce:
        loss += weights.ce * cross_entropy(logits, batch.labels)
    if weights.kd:
        loss += weights.kd * kd_loss(logits, batch.soft_targets, temperature)
    return loss


def _weighted_logit_grad(logits, batch: Batch, weights: LossWeights, temperature: float) -> np.ndarray:
    n = logits.shape[0]
    labels = _check_labels(batch.labels, logits.shape[1])
    d = np.zeros(logits.shape, dtype=np.float64)
    if weights.ce:
        ce = softmax(logits)
        ce[np.arange(n), labels] -= 1.0
        d += weights.ce * ce
    if weights.kd:
        p = softmax(np.asarray(logits, dtype=np.float64) / temperature)
        q = softmax(np.asarray(batch.soft_targets, dtype=np.float64) / temperature)
        d += weights.kd * temperature * (p - q)
    return d / n


def _check_targets(batch: Batch, weights: LossWeights, temperature: float) -> None:
    if weights.kd and batch.soft_targets is None:
        raise LabError("distillation weight is positive but the batch carries no soft targets")
    if weights.kd and temperature <= 0:
        raise LabError(f"temperature must be positive, got {temperature}")


def loss_value(model: ModelSpec, params: FlatParams, batch: Batch,
               weights: LossWeights, temperature: float = 1.0) -> float:
    """(ce) * CE + (kd) * KD on the batch."""
    _check_targets(batch, weights, temperature)
    return _weighted_loss(forward(model, params, batch.inputs), batch, weights, temperature)


def grad(model: ModelSpec, params: FlatParams, batch: Batch,
         weights: LossWeights, temperature: float = 1.0) -> FlatUpdate:
    """Analytic gradient of the weighted loss with respect to every parameter."""
    _check_targets(batch, weights, temperature)
    logits, caches, _ = _run_layers(model, params, batch.inputs, keep=True)
    dlogits = _weighted_logit_grad(logits, batch, weights, temperature).astype(params.values.dtype)
    return FlatUpdate(_backward(model, params, caches, dlogits), params.layout)


def finite_diff_grad(model: ModelSpec, params: FlatParams, batch: Batch, weights: LossWeights,
                     temperature: float = 1.0, step: float = 1e-5,
                     coordinates: Optional[Sequence[int]] = None) -> FlatUpdate:
    """
    Central-difference gradient (L(w + h e_i) - L(w - h e_i)) / 2h.

    Evaluated in float64. When `coordinates` is given only those entries are
    computed; the rest of the returned vector is zero.
    """
    if step <= 0:
        raise LabError(f"finite-difference step must be positive, got {step}")
    work = FlatParams(params.values.astype(np.float64), params.layout)
    out = np.zeros(len(work), dtype=np.float64)
    idx = range(len(work)) if coordinates is None else coordinates
    for i in idx:
        original = work.values[i]
        work.values[i] = original + step
        upper = loss_value(model, work, batch, weights, temperature)
        work.values[i] = original - step
        lower = loss_value(model, work, batch, weights, temperature)
        work.values[i] = original
        out[i] = (upper - lower) / (2.0 * step)
    return FlatUpdate(out, params.layout)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       coordinates: Optional[Sequence[int]] = None) -> float:
    """max_i |a_i - n_i| / (|n_i| + 1e-6); 0 for empty vectors."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if coordinates is not None:
        idx = np.asarray(list(coordinates), dtype=np.int64)
        a, n = a[idx], n[idx]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.abs(n) + 1e-6)))


def sgd_step(params: FlatParams, gradient: FlatUpdate, lr: float) -> FlatParams:
    if lr < 0:
        raise LabError(f"learning rate must be non-negative, got {lr}")
    if len(gradient) != len(params):
        raise ShapeError(f"gradient length {len(gradient)} != params length {len(params)}")
    step = (lr * gradient.values).astype(params.values.dtype, copy=False)
    return FlatParams(params.values - step, params.layout)
