"""
Model zoo: small differentiable networks, optimizers and the training loop.

A ``Classifier`` maps images to logits phi(x); confidences are g(x) = softmax(phi(x))
and the predicted class is f(x) = argmax_i g(x)(i), lowest index on ties.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Gradients, ShapeError, Tensor
from .utils import BenchError, chunked

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Tensor]


class ModelError(BenchError):
    """Raised for invalid model construction or usage."""
    pass


# --- layers ---

class Layer:
    """A parameterized (or parameter-free) op in a sequential network."""

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    def fan_in(self) -> int:
        return 1

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        raise NotImplementedError


@dataclass
class Dense(Layer):
    name: str
    in_features: int
    out_features: int

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {f"{self.name}.weight": (self.in_features, self.out_features),
                f"{self.name}.bias": (self.out_features,)}

    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        return ad.bias_add(ad.matmul(x, params[f"{self.name}.weight"]), params[f"{self.name}.bias"])


@dataclass
class Conv2d(Layer):
    name: str
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    padding: int = 1

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        k = self.kernel_size
        return {f"{self.name}.weight": (self.out_channels, self.in_channels, k, k),
                f"{self.name}.bias": (self.out_channels,)}

    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        out = ad.conv2d(x, params[f"{self.name}.weight"], padding=self.padding)
        return ad.bias_add(out, params[f"{self.name}.bias"])


class ReLU(Layer):
    def forward(self, x, params):
        return ad.relu(x)


class Sigmoid(Layer):
    def forward(self, x, params):
        return ad.sigmoid(x)


class MaxPool2d(Layer):
    def forward(self, x, params):
        return ad.max_pool2d(x)


class AvgPool2d(Layer):
    def forward(self, x, params):
        return ad.avg_pool2d(x)


class Upsample2d(Layer):
    def forward(self, x, params):
        return ad.upsample2d(x)


class Flatten(Layer):
    def forward(self, x, params):
        return ad.reshape(x, (x.shape[0], -1))


# --- architectures ---

def _flat_size(input_shape: Sequence[int]) -> int:
    return int(np.prod(input_shape))


def _linear_layers(input_shape: Tuple[int, ...], outputs: int, **_: Any) -> List[Layer]:
    return [Flatten(), Dense('fc', _flat_size(input_shape), outputs)]


def _mlp2_layers(input_shape: Tuple[int, ...], outputs: int, hidden: int = 64, **_: Any) -> List[Layer]:
    return [Flatten(), Dense('fc1', _flat_size(input_shape), hidden), ReLU(), Dense('fc2', hidden, outputs)]


def _cnn_s_layers(input_shape: Tuple[int, ...], outputs: int, **_: Any) -> List[Layer]:
    if len(input_shape) != 3:
        raise ModelError(f"cnn_s expects (C, H, W) input, got {input_shape}")
    channels, height, width = input_shape
    return [
        Conv2d('conv1', channels, 8), ReLU(), MaxPool2d(),
        Conv2d('conv2', 8, 16), ReLU(), MaxPool2d(),
        Flatten(), Dense('fc', 16 * (height // 4) * (width // 4), outputs),
    ]


def _ae_small_layers(input_shape: Tuple[int, ...], outputs: int, **_: Any) -> List[Layer]:
    if len(input_shape) != 3 or input_shape[1] % 4 or input_shape[2] % 4:
        raise ModelError(f"ae_small expects (C, H, W) input with H, W divisible by 4, got {input_shape}")
    channels = input_shape[0]
    return [
        Conv2d('enc1', channels, 8), ReLU(), AvgPool2d(),
        Conv2d('enc2', 8, 16), ReLU(), AvgPool2d(),
        Upsample2d(), Conv2d('dec1', 16, 8), ReLU(),
        Upsample2d(), Conv2d('dec2', 8, channels), Sigmoid(),
    ]


ARCHITECTURES: Dict[str, Callable[..., List[Layer]]] = {
    'linear': _linear_layers,
    'mlp2': _mlp2_layers,
    'cnn_s': _cnn_s_layers,
    'ae_small': _ae_small_layers,
}


def init_params(layers: Sequence[Layer], seed: int, zero_final: bool = False) -> Dict[str, Tensor]:
    """
    Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) initialisation from a seeded generator.

    Args:
        layers: Network layers in order
        seed: Generator seed
        zero_final: Zero the last parameterized layer (all-zero logits)
    """
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    param_layers = [layer for layer in layers if layer.param_shapes()]
    for layer in param_layers:
        bound = np.sqrt(1.0 / layer.fan_in())
        for name, shape in layer.param_shapes().items():
            values = rng.uniform(-bound, bound, size=shape)
            if zero_final and layer is param_layers[-1]:
                values = np.zeros(shape)
            params[name] = Tensor(values, requires_grad=True, name=name)
    return params


# --- networks ---

@dataclass
class Network:
    """Sequential network with named parameters."""
    arch: str
    input_shape: Tuple[int, ...]
    output_width: int
    layers: List[Layer]
    params: Dict[str, Tensor]
    arch_options: Dict[str, Any] = field(default_factory=dict)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        """
        Run a batch ``x`` of shape (N, *input_shape) through the layers.

        With ``train`` False the parameters enter as constants sharing the same
        arrays, so only input gradients are recorded.
        """
        if train:
            params: Mapping[str, Tensor] = self.params
        else:
            params = {name: Tensor(p.data) for name, p in self.params.items()}
        out = x
        for layer in self.layers:
            out = layer.forward(out, params)
        return out

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.shape for name, p in self.params.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


@dataclass
class Classifier(Network):
    label_names: List[str] = field(default_factory=list)
    background_names: List[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.output_width

    @property
    def num_in_classes(self) -> int:
        """Number of in-distribution classes (excludes background classes)."""
        return self.output_width - len(self.background_names)

    @property
    def background_indices(self) -> List[int]:
        return list(range(self.num_in_classes, self.output_width))


@dataclass
class Autoencoder(Network):
    pass


def build_network(arch: str, input_shape: Sequence[int], output_width: int, seed: int = 0,
                  zero_final: bool = False, **options: Any) -> Tuple[List[Layer], Dict[str, Tensor]]:
    if arch not in ARCHITECTURES:
        raise ModelError(f"Unknown architecture '{arch}'. Available: {sorted(ARCHITECTURES)}")
    layers = ARCHITECTURES[arch](tuple(input_shape), output_width, **options)
    return layers, init_params(layers, seed, zero_final=zero_final)


def build_classifier(arch: str, input_shape: Sequence[int], label_names: Sequence[str], seed: int = 0,
                     background_names: Sequence[str] = (), zero_final: bool = False,
                     **options: Any) -> Classifier:
    """
    Build a classifier whose outputs are ``label_names`` followed by ``background_names``.

    Args:
        arch: One of ``linear``, ``mlp2``, ``cnn_s``
        input_shape: Shape of a single input
        label_names: In-distribution class names
        seed: Initialisation seed
        background_names: Extra background classes, one per OOD source
        zero_final: Zero the output layer
    """
    names = list(label_names) + list(background_names)
    if not label_names:
        raise ModelError("A classifier needs at least one class")
    layers, params = build_network(arch, input_shape, len(names), seed, zero_final, **options)
    return Classifier(arch=arch, input_shape=tuple(input_shape), output_width=len(names), layers=layers,
                      params=params, arch_options=dict(options), label_names=names,
                      background_names=list(background_names))


def build_autoencoder(input_shape: Sequence[int], seed: int = 0, arch: str = 'ae_small') -> Autoencoder:
    layers, params = build_network(arch, input_shape, int(np.prod(input_shape)), seed)
    return Autoencoder(arch=arch, input_shape=tuple(input_shape), output_width=int(np.prod(input_shape)),
                       layers=layers, params=params)


def with_extra_classes(model: Classifier, background_names: Sequence[str], seed: int = 0) -> Classifier:
    """Fresh twin of ``model`` with one extra output per background source."""
    in_names = model.label_names[:model.num_in_classes]
    return build_classifier(model.arch, model.input_shape, in_names, seed=seed,
                            background_names=background_names, **model.arch_options)


# --- inference ---

def as_batch(model: Network, x: ArrayLike, op: str) -> Tuple[Tensor, bool]:
    t = ad.as_tensor(x)
    if t.shape == model.input_shape:
        return ad.reshape(t, (1,) + model.input_shape), True
    if t.ndim == len(model.input_shape) + 1 and t.shape[1:] == model.input_shape:
        return t, False
    raise ShapeError(op, t.shape, model.input_shape)


def logits(model: Classifier, x: ArrayLike, train: bool = False) -> Tensor:
    """
    phi(x) for a single input or a batch.

    Returns:
        (num_classes,) for a single input, (N, num_classes) for a batch
    """
    batch, single = as_batch(model, x, 'logits')
    out = model.forward(batch, train=train)
    if single:
        return ad.reshape(out, (model.num_classes,))
    return out


def confidences(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """g(x) for a single input or batch, computed without recording gradients."""
    batch, single = as_batch(model, images, 'confidences')
    data = batch.data
    parts = [ad._softmax(model.forward(Tensor(data[i:i + batch_size])).data)
             for i in range(0, len(data), batch_size)]
    probs = np.concatenate(parts, axis=0) if parts else np.zeros((0, model.num_classes))
    return probs[0] if single else probs


def predict(model: Classifier, x: ArrayLike) -> Tuple[int, float]:
    """
    (f(x), max_i g(x)(i)) for a single input; ties resolve to the lowest index.

    Examples:
        Logits [0.1, 2.0, -1.0] give class 1 with confidence ~0.825.
    """
    probs = confidences(model, ad.as_tensor(x).data)
    if probs.ndim != 1:
        raise ShapeError('predict', np.shape(probs), model.input_shape)
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def predict_batch(model: Classifier, images: np.ndarray, batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    probs = confidences(model, images, batch_size=batch_size)
    classes = np.argmax(probs, axis=-1)
    return classes, np.take_along_axis(probs, classes[:, None], axis=-1)[:, 0]


# --- optimizers ---

class Optimizer:
    """Per-array update rules keyed by parameter name."""

    def __init__(self, learning_rate: float):
        self.learning_rate = float(learning_rate)
        self.t = 0

    def delta(self, key: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, params: Mapping[str, Tensor], grads: Gradients) -> None:
        """Apply one in-place descent step to every parameter."""
        self.t += 1
        for name, param in params.items():
            param.data -= self.delta(name, grads[param])


class SGD(Optimizer):
    def delta(self, key, grad):
        return self.learning_rate * grad


class MomentumSGD(Optimizer):
    def __init__(self, learning_rate: float, momentum: float = 0.9):
        super().__init__(learning_rate)
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def delta(self, key, grad):
        v = self.momentum * self.velocity.get(key, np.zeros_like(grad)) + grad
        self.velocity[key] = v
        return self.learning_rate * v


class Adam(Optimizer):
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def delta(self, key, grad):
        m = self.beta1 * self.m.get(key, np.zeros_like(grad)) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(key, np.zeros_like(grad)) + (1 - self.beta2) * grad * grad
        self.m[key], self.v[key] = m, v
        t = max(self.t, 1)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = ('sgd', 'sgd-momentum', 'adam')


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = 'adam'
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == 'sgd':
        return SGD(cfg.learning_rate)
    if cfg.optimizer == 'sgd-momentum':
        return MomentumSGD(cfg.learning_rate)
    return Adam(cfg.learning_rate)


@dataclass
class TrainReport:
    initial_loss: float
    final_loss: float
    loss_curve: List[float] = field(default_factory=list)
    accuracy_curve: List[float] = field(default_factory=list)
    extra_curves: Dict[str, List[float]] = field(default_factory=dict)


BatchLoss = Callable[[np.ndarray], Tuple[Tensor, Dict[str, float]]]


def fit(model: Network, n_items: int, cfg: TrainConfig, batch_loss: BatchLoss,
        progress_callback: Optional[Callable[[str], None]] = None) -> List[Dict[str, float]]:
    """
    Shared minibatch loop for every training procedure in the bench.

    Args:
        model: Network whose parameters are updated in place
        n_items: Number of training items indexed by the batches
        cfg: Training configuration (epochs, batch size, optimizer, seed, shuffle)
        batch_loss: Maps batch indices to (scalar loss, per-batch metrics)
        progress_callback: Optional callback receiving one message per epoch

    Returns:
        One record per epoch with item-weighted means of 'loss' and every metric
    """
    if n_items < 1:
        raise ModelError("Cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg)
    history: List[Dict[str, float]] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_items) if cfg.shuffle else np.arange(n_items)
        sums: Dict[str, float] = defaultdict(float)
        for idx in chunked(order, cfg.batch_size):
            loss, metrics = batch_loss(idx)
            grads = ad.backward(loss)
            optimizer.step(model.params, grads)
            sums['loss'] += loss.item() * len(idx)
            for key, value in metrics.items():
                sums[key] += value * len(idx)
        record = {key: value / n_items for key, value in sums.items()}
        history.append(record)
        logger.info("epoch %d/%d loss=%.4f", epoch, cfg.epochs, record['loss'])
        if progress_callback:
            progress_callback(f"epoch {epoch}/{cfg.epochs} loss={record['loss']:.4f}")
    return history


def batch_accuracy(logit_data: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logit_data, axis=-1) == labels))


def dataset_loss(model: Classifier, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Mean cross-entropy over a labelled image array."""
    total = 0.0
    for start in range(0, len(images), batch_size):
        z = model.forward(Tensor(images[start:start + batch_size]))
        total += ad.cross_entropy(z, labels[start:start + batch_size]).item() * len(z.data)
    return total / len(images)


def check_labels(model: Classifier, labels: np.ndarray) -> None:
    if len(labels) and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ModelError(f"Labels must lie in [0, {model.num_classes}); found range "
                         f"[{labels.min()}, {labels.max()}]")


def train_classifier(model: Classifier, dataset: 'LabeledDataset', cfg: TrainConfig,
                     progress_callback: Optional[Callable[[str], None]] = None) -> TrainReport:
    """
    Minimise mean per-batch cross-entropy on ``dataset``.

    Labels are validated before any parameter update.
    """
    images, labels = dataset.images, dataset.labels
    check_labels(model, labels)
    initial = dataset_loss(model, images, labels)

    def batch_loss(idx):
        z = model.forward(Tensor(images[idx]), train=True)
        return ad.cross_entropy(z, labels[idx]), {'accuracy': batch_accuracy(z.data, labels[idx])}

    history = fit(model, len(images), cfg, batch_loss, progress_callback)
    return TrainReport(
        initial_loss=initial,
        final_loss=dataset_loss(model, images, labels),
        loss_curve=[h['loss'] for h in history],
        accuracy_curve=[100.0 * h['accuracy'] for h in history],
    )


@dataclass
class ModelEvaluation:
    accuracy: float
    mean_confidence: float
    confidence_undefined: bool = False


def evaluate_model(model: Classifier, dataset: 'LabeledDataset') -> ModelEvaluation:
    """
    Accuracy (percent) over all items and mean confidence over correctly classified items.

    With no correct item the mean confidence is reported as 0 and flagged undefined.
    """
    if len(dataset) == 0:
        raise ModelError("Cannot evaluate on an empty dataset")
    classes, conf = predict_batch(model, dataset.images)
    correct = classes == dataset.labels
    accuracy = 100.0 * float(np.mean(correct))
    if not correct.any():
        logger.warning("No correctly classified items; mean confidence undefined")
        return ModelEvaluation(accuracy, 0.0, True)
    return ModelEvaluation(accuracy, float(np.mean(conf[correct])))
