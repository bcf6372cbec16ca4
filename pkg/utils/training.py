"""
WDPN Training
=============

Minimal supervised training of a Wide and Deep PointNet: binary
cross-entropy on the logit, reverse-mode gradients written out by hand and
an Adam or SGD step.

Batch norm keeps running statistics only. On every batch the statistics
are first moved towards the batch's pre-normalization moments by an
exponential moving average, and the layer then acts as the resulting frozen
affine map. The gradients are therefore exact for the function that gets
exported and explained.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from utils.datagen import Dataset
from utils.errors import DomainError, TrainingDivergedError
from utils.nn_core import (BatchNormParams, DenseLayerParams, PointLayer,
                           WdpnModel, forward_batch)
from utils.settings import ArchitectureDefaults, TrainingDefaults, as_seed

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


# =============================================================================
# CONFIGURATION AND REPORT
# =============================================================================


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = TrainingDefaults.EPOCHS
    batch_size: int = TrainingDefaults.BATCH_SIZE
    learning_rate: float = TrainingDefaults.LEARNING_RATE
    optimizer: str = TrainingDefaults.OPTIMIZER
    betas: Tuple[float, float] = TrainingDefaults.ADAM_BETAS
    adam_epsilon: float = TrainingDefaults.ADAM_EPSILON
    seed: int = 0
    init_scale: Optional[float] = None
    hidden_widths: Tuple[int, ...] = ArchitectureDefaults.HIDDEN_WIDTHS
    validation_fraction: float = TrainingDefaults.VALIDATION_FRACTION
    momentum: float = ArchitectureDefaults.BATCHNORM_MOMENTUM
    log_every: int = TrainingDefaults.LOG_EVERY

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise DomainError("epochs, batch size and learning rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise DomainError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not 0 <= self.validation_fraction < 1:
            raise DomainError("validation fraction must lie in [0, 1)")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise DomainError("hidden widths must be positive")

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["betas"] = list(self.betas)
        payload["hidden_widths"] = list(self.hidden_widths)
        return payload


@dataclass
class TrainReport:
    epoch_losses: List[float]
    train_balanced_accuracy: float
    balanced_accuracy: float
    checksum: str
    seed: int
    n_train: int
    n_validation: int
    config: Dict[str, Any] = field(default_factory=dict)

    def epochs_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": np.arange(1, len(self.epoch_losses) + 1),
                             "loss": self.epoch_losses})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch_losses": self.epoch_losses,
            "train_balanced_accuracy": self.train_balanced_accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "parameter_checksum": self.checksum,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_validation": self.n_validation,
        }


# =============================================================================
# LOSS AND METRICS
# =============================================================================


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def bce_loss(logit: Any, label: Any) -> Any:
    """softplus(logit) - label * logit, the stable form of cross-entropy on sigmoid(logit)"""
    logit = np.asarray(logit, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    loss = softplus(logit) - label * logit
    return float(loss) if loss.ndim == 0 else loss


def balanced_accuracy(labels: np.ndarray, predictions: np.ndarray) -> float:
    """Mean per-class recall; 0.5 when only one class is present"""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    classes = np.unique(labels)
    if classes.shape[0] < 2:
        return 0.5
    recalls = [float(np.mean(predictions[labels == c] == c)) for c in classes]
    return float(np.mean(recalls))


# =============================================================================
# PARAMETERS
# =============================================================================


def init_model(n_points: int, n_tabular: int, seed: int,
               hidden_widths: Sequence[int] = ArchitectureDefaults.HIDDEN_WIDTHS,
               init_scale: Optional[float] = None,
               epsilon: float = ArchitectureDefaults.BATCHNORM_EPSILON) -> WdpnModel:
    """
    Seeded initial WDPN: uniform weights in [-s, s], s = 1/sqrt(in_dim) by default

    Every point layer is linear -> batch-norm -> ReLU; batch norm starts as
    the identity (gamma 1, beta 0, running mean 0, running variance 1).
    """
    rng = np.random.default_rng(as_seed(seed))

    def dense(in_dim: int, out_dim: int) -> DenseLayerParams:
        scale = init_scale if init_scale is not None else 1.0 / np.sqrt(in_dim)
        return DenseLayerParams(rng.uniform(-scale, scale, size=(in_dim, out_dim)),
                                rng.uniform(-scale, scale, size=out_dim))

    layers = []
    width = 3
    for out in hidden_widths:
        layers.append(PointLayer(dense(width, out), BatchNormParams.identity(out, epsilon), True))
        width = out
    return WdpnModel(tuple(layers), dense(width + n_tabular, 1), n_points, n_tabular)


def model_parameters(model: WdpnModel) -> Dict[str, np.ndarray]:
    """Trainable arrays by name; batch-norm running statistics are not included"""
    params: Dict[str, np.ndarray] = {}
    for index, layer in enumerate(model.point_mlp):
        params[f"point_mlp.{index}.W"] = layer.dense.weights.copy()
        params[f"point_mlp.{index}.b"] = layer.dense.bias.copy()
        if layer.batchnorm is not None:
            params[f"point_mlp.{index}.gamma"] = layer.batchnorm.gamma.copy()
            params[f"point_mlp.{index}.beta"] = layer.batchnorm.beta.copy()
    params["fusion.W"] = model.fusion.weights.copy()
    params["fusion.b"] = model.fusion.bias.copy()
    return params


def with_parameters(model: WdpnModel, params: Dict[str, np.ndarray],
                    running: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None) -> WdpnModel:
    """Rebuild a model from named arrays, optionally replacing running statistics"""
    layers = []
    for index, layer in enumerate(model.point_mlp):
        bn = layer.batchnorm
        if bn is not None:
            mean, var = (running or {}).get(index, (bn.running_mean, bn.running_var))
            bn = BatchNormParams(params[f"point_mlp.{index}.gamma"], params[f"point_mlp.{index}.beta"],
                                 mean, var, bn.epsilon)
        layers.append(PointLayer(
            DenseLayerParams(params[f"point_mlp.{index}.W"], params[f"point_mlp.{index}.b"]),
            bn, layer.activation))
    return WdpnModel(tuple(layers), DenseLayerParams(params["fusion.W"], params["fusion.b"]),
                     model.n_points, model.n_tabular)


# =============================================================================
# FORWARD / BACKWARD
# =============================================================================


@dataclass
class _LayerTrace:
    inputs: np.ndarray
    pre: np.ndarray
    normalized: np.ndarray
    inv_std: Optional[np.ndarray]


def _forward_trace(points: np.ndarray, tabular: np.ndarray, model: WdpnModel
                   ) -> Tuple[np.ndarray, List[_LayerTrace], np.ndarray, np.ndarray]:
    traces = []
    out = points
    for layer in model.point_mlp:
        pre = out @ layer.dense.weights + layer.dense.bias
        inv_std = None
        normalized = pre
        if layer.batchnorm is not None:
            bn = layer.batchnorm
            inv_std = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
            normalized = bn.gamma * (pre - bn.running_mean) * inv_std + bn.beta
        traces.append(_LayerTrace(out, pre, normalized, inv_std))
        out = np.maximum(normalized, 0.0) if layer.activation else normalized
    # argmax keeps the first maximum, so ties route to the lowest point index
    argmax = out.argmax(axis=1)
    latent = np.take_along_axis(out, argmax[:, None, :], axis=1)[:, 0, :]
    logits = np.concatenate([latent, tabular], axis=1) @ model.fusion.weights[:, 0] + model.fusion.bias[0]
    return logits, traces, latent, argmax


def _backward(model: WdpnModel, tabular: np.ndarray, traces: List[_LayerTrace], latent: np.ndarray,
              argmax: np.ndarray, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
    grads: Dict[str, np.ndarray] = {}
    fused = np.concatenate([latent, tabular], axis=1)
    grads["fusion.W"] = fused.T @ dlogits[:, None]
    grads["fusion.b"] = np.array([dlogits.sum()])

    dlatent = dlogits[:, None] * model.latent_weights[None, :]
    last = traces[-1].normalized
    dout = np.zeros_like(last)
    np.put_along_axis(dout, argmax[:, None, :], dlatent[:, None, :], axis=1)

    for index in range(len(model.point_mlp) - 1, -1, -1):
        layer, trace = model.point_mlp[index], traces[index]
        dnorm = dout * (trace.normalized > 0) if layer.activation else dout
        if layer.batchnorm is not None:
            bn = layer.batchnorm
            centered = (trace.pre - bn.running_mean) * trace.inv_std
            grads[f"point_mlp.{index}.gamma"] = np.sum(dnorm * centered, axis=(0, 1))
            grads[f"point_mlp.{index}.beta"] = np.sum(dnorm, axis=(0, 1))
            dpre = dnorm * bn.gamma * trace.inv_std
        else:
            dpre = dnorm
        width_in = trace.inputs.shape[-1]
        grads[f"point_mlp.{index}.W"] = trace.inputs.reshape(-1, width_in).T @ dpre.reshape(-1, dpre.shape[-1])
        grads[f"point_mlp.{index}.b"] = dpre.sum(axis=(0, 1))
        dout = dpre @ layer.dense.weights.T
    return grads


def batch_loss_and_gradients(points: np.ndarray, tabular: np.ndarray, labels: np.ndarray,
                             model: WdpnModel) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean BCE over a batch and its gradients for every trainable array"""
    points = np.asarray(points, dtype=np.float64)
    tabular = np.asarray(tabular, dtype=np.float64).reshape(points.shape[0], model.n_tabular)
    labels = np.asarray(labels, dtype=np.float64)
    logits, traces, latent, argmax = _forward_trace(points, tabular, model)
    loss = float(np.mean(bce_loss(logits, labels)))
    dlogits = (expit(logits) - labels) / labels.shape[0]
    return loss, _backward(model, tabular, traces, latent, argmax, dlogits)


def backward(z, label: int, model: WdpnModel) -> Dict[str, np.ndarray]:
    """
    Exact gradients of bce_loss(f(z), label) for one example

    Args:
        z: HeterogeneousInput matching the model
        label: 0 or 1
        model: Network with frozen batch-norm statistics

    Returns:
        Gradient arrays keyed like ``model_parameters``
    """
    _, grads = batch_loss_and_gradients(z.points[None], z.tabular[None], np.array([label]), model)
    return grads


# =============================================================================
# OPTIMIZERS
# =============================================================================


class _Adam:
    def __init__(self, config: TrainConfig, params: Dict[str, np.ndarray]):
        self.lr = config.learning_rate
        self.beta1, self.beta2 = config.betas
        self.eps = config.adam_epsilon
        self.first = {k: np.zeros_like(v) for k, v in params.items()}
        self.second = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name in sorted(params):
            g = grads[name].reshape(params[name].shape)
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * g
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * g * g
            m_hat = self.first[name] / correction1
            v_hat = self.second[name] / correction2
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _Sgd:
    def __init__(self, config: TrainConfig, params: Dict[str, np.ndarray]):
        self.lr = config.learning_rate

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name in sorted(params):
            params[name] = params[name] - self.lr * grads[name].reshape(params[name].shape)


# =============================================================================
# TRAINING LOOP
# =============================================================================


def _update_running_stats(model: WdpnModel, points: np.ndarray, params: Dict[str, np.ndarray],
                          running: Dict[int, Tuple[np.ndarray, np.ndarray]], momentum: float) -> WdpnModel:
    """EMA update of every layer's statistics from this batch, layer by layer"""
    out = points
    for index, layer in enumerate(model.point_mlp):
        pre = out @ params[f"point_mlp.{index}.W"] + params[f"point_mlp.{index}.b"]
        if layer.batchnorm is not None:
            flat = pre.reshape(-1, pre.shape[-1])
            mean, var = running[index]
            running[index] = (momentum * mean + (1.0 - momentum) * flat.mean(axis=0),
                              momentum * var + (1.0 - momentum) * flat.var(axis=0))
            bn = layer.batchnorm
            new_mean, new_var = running[index]
            pre = (params[f"point_mlp.{index}.gamma"] * (pre - new_mean) / np.sqrt(new_var + bn.epsilon)
                   + params[f"point_mlp.{index}.beta"])
        out = np.maximum(pre, 0.0) if layer.activation else pre
    return with_parameters(model, params, running)


def _split(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    if n_val == 0 or n_val >= n:
        return order, np.zeros(0, dtype=np.int64)
    return order[n_val:], order[:n_val]


def evaluate_accuracy(model: WdpnModel, points: np.ndarray, tabular: np.ndarray, labels: np.ndarray) -> float:
    if labels.shape[0] == 0:
        return float("nan")
    logits = forward_batch(points, tabular, model)
    return balanced_accuracy(labels, (logits > 0).astype(np.int64))


def train(dataset: Dataset, config: TrainConfig) -> Tuple[WdpnModel, TrainReport]:
    """
    Train a WDPN on a labeled dataset

    Args:
        dataset: Non-empty dataset
        config: Optimizer, schedule, architecture and seed

    Returns:
        (model with frozen batch-norm statistics, TrainReport)

    Raises:
        TrainingDivergedError: a batch loss became non-finite
    """
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    rng = np.random.default_rng(as_seed(config.seed))
    points, tabular, labels = dataset.points, dataset.tabular, dataset.labels
    train_idx, val_idx = _split(len(dataset), config.validation_fraction, rng)
    if val_idx.shape[0] == 0:
        logger.warning("No held-out split; balanced accuracy is measured on the training set")

    model = init_model(dataset.manifest.K, dataset.manifest.D, config.seed,
                       config.hidden_widths, config.init_scale)
    params = model_parameters(model)
    running = {i: (layer.batchnorm.running_mean.copy(), layer.batchnorm.running_var.copy())
               for i, layer in enumerate(model.point_mlp) if layer.batchnorm is not None}
    optimizer = _Adam(config, params) if config.optimizer == "adam" else _Sgd(config, params)

    epoch_losses: List[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        batch_losses, batch_sizes = [], []
        for start in range(0, order.shape[0], config.batch_size):
            batch = order[start:start + config.batch_size]
            model = _update_running_stats(model, points[batch], params, running, config.momentum)
            loss, grads = batch_loss_and_gradients(points[batch], tabular[batch], labels[batch], model)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch}, batch at {start}: loss is {loss}")
            optimizer.step(params, grads)
            batch_losses.append(loss)
            batch_sizes.append(batch.shape[0])
        epoch_losses.append(float(np.average(batch_losses, weights=batch_sizes)))
        if epoch % config.log_every == 0 or epoch == config.epochs:
            logger.info("Epoch %d/%d loss %.4f", epoch, config.epochs, epoch_losses[-1])

    model = with_parameters(model, params, running)
    train_acc = evaluate_accuracy(model, points[train_idx], tabular[train_idx], labels[train_idx])
    if val_idx.shape[0]:
        val_acc = evaluate_accuracy(model, points[val_idx], tabular[val_idx], labels[val_idx])
    else:
        val_acc = train_acc
    report = TrainReport(
        epoch_losses=epoch_losses, train_balanced_accuracy=train_acc, balanced_accuracy=val_acc,
        checksum=model.checksum(), seed=config.seed, n_train=int(train_idx.shape[0]),
        n_validation=int(val_idx.shape[0]), config=config.to_dict())
    logger.info("Training done: balanced accuracy %.3f (train %.3f)", val_acc, train_acc)
    return model, report
