"""
Wide and Deep PointNet Core
===========================

Deterministic layers and the Wide and Deep PointNet (WDPN) forward pass. Every
explainer treats this network as the black box f. A shared-weight point MLP
(linear -> batch-norm -> ReLU per layer) is max-pooled into a global
descriptor, which is concatenated with the tabular vector and fed to one
linear fusion unit producing a logit.

All attribution happens on the logit; ``sigmoid`` is only used for reporting.
"""

import json
import logging
import threading
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit

from utils.errors import DomainError, ModelFormatError, ShapeError
from utils.settings import ArchitectureDefaults, ExplainerDefaults, checksum

logger = logging.getLogger(__name__)


# =============================================================================
# INPUT TYPES
# =============================================================================


def as_point_cloud(points: Any) -> np.ndarray:
    """
    Validate and convert a point cloud to a float64 (K, 3) array

    Args:
        points: Sequence of coordinate triples

    Returns:
        Array of shape (K, 3)
    """
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ShapeError(f"point cloud must have shape (K, 3), got {cloud.shape}")
    if cloud.shape[0] < 1:
        raise DomainError("point cloud must contain at least one point")
    if not np.all(np.isfinite(cloud)):
        raise DomainError("point cloud contains non-finite coordinates")
    return cloud


def as_tabular(values: Any) -> np.ndarray:
    tabular = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(tabular)):
        raise DomainError("tabular vector contains non-finite values")
    return tabular


@dataclass(frozen=True, eq=False)
class HeterogeneousInput:
    """One example z = (P, x): a point cloud plus a tabular vector"""
    points: np.ndarray
    tabular: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", as_point_cloud(self.points))
        object.__setattr__(self, "tabular", as_tabular(self.tabular))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_tabular(self) -> int:
        return self.tabular.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        return {"points": self.points.tolist(), "tabular": self.tabular.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "HeterogeneousInput":
        return cls(points=payload["points"], tabular=payload.get("tabular", []))


# =============================================================================
# PARAMETERS
# =============================================================================


@dataclass(frozen=True, eq=False)
class DenseLayerParams:
    """Linear layer: out = b + x W with W of shape (in_dim, out_dim)"""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if weights.ndim != 2:
            raise ShapeError(f"weights must be a matrix, got shape {weights.shape}")
        if bias.shape[0] != weights.shape[1]:
            raise ShapeError(f"bias length {bias.shape[0]} does not match out_dim {weights.shape[1]}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise DomainError("dense layer parameters must be finite")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    """Inference-mode batch normalization with frozen running statistics"""
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = ArchitectureDefaults.BATCHNORM_EPSILON

    def __post_init__(self):
        arrays = {}
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arrays[name] = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arrays[name])
        widths = {a.shape[0] for a in arrays.values()}
        if len(widths) != 1:
            raise ShapeError("batch-norm parameter vectors must share one width")
        if np.any(arrays["running_var"] < 0) or self.epsilon < 0:
            raise DomainError("running variance and epsilon must be non-negative")
        if np.any(arrays["running_var"] + self.epsilon <= 0):
            raise DomainError("running variance plus epsilon must be positive")

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    def affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """Fold the frozen statistics into y = scale * x + shift"""
        scale = self.gamma / np.sqrt(self.running_var + self.epsilon)
        return scale, self.beta - scale * self.running_mean

    @classmethod
    def identity(cls, width: int, epsilon: float = ArchitectureDefaults.BATCHNORM_EPSILON) -> "BatchNormParams":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), epsilon)


@dataclass(frozen=True, eq=False)
class PointLayer:
    """One layer of the shared point MLP"""
    dense: DenseLayerParams
    batchnorm: Optional[BatchNormParams] = None
    activation: bool = True


@dataclass(frozen=True, eq=False)
class WdpnModel:
    """
    Wide and Deep PointNet parameters

    The point MLP maps 3 -> ... -> latent_dim per point with shared weights;
    the fusion layer maps (latent_dim + D) -> 1.
    """
    point_mlp: Tuple[PointLayer, ...]
    fusion: DenseLayerParams
    n_points: int
    n_tabular: int

    def __post_init__(self):
        layers = tuple(self.point_mlp)
        object.__setattr__(self, "point_mlp", layers)
        if not layers:
            raise ShapeError("point MLP needs at least one layer")
        width = 3
        for index, layer in enumerate(layers):
            if layer.dense.in_dim != width:
                raise ShapeError(f"point layer {index} expects {layer.dense.in_dim} inputs, chain provides {width}")
            if layer.batchnorm is not None and layer.batchnorm.width != layer.dense.out_dim:
                raise ShapeError(f"batch-norm width mismatch in point layer {index}")
            width = layer.dense.out_dim
        if self.fusion.in_dim != width + self.n_tabular or self.fusion.out_dim != 1:
            raise ShapeError(
                f"fusion layer must map {width + self.n_tabular} -> 1, got "
                f"{self.fusion.in_dim} -> {self.fusion.out_dim}")
        if self.n_points < 1 or self.n_tabular < 0:
            raise DomainError("model needs K >= 1 and D >= 0")

    @property
    def latent_dim(self) -> int:
        return self.point_mlp[-1].dense.out_dim

    @property
    def n_features(self) -> int:
        return self.n_points + self.n_tabular

    @property
    def latent_weights(self) -> np.ndarray:
        return self.fusion.weights[:self.latent_dim, 0]

    @property
    def tabular_weights(self) -> np.ndarray:
        return self.fusion.weights[self.latent_dim:, 0]

    def masked_logits(self, z: HeterogeneousInput, z_baseline: HeterogeneousInput,
                      masks: np.ndarray, counter: Optional["EvalCounter"] = None) -> np.ndarray:
        return masked_forward(z, z_baseline, masks, self, counter)

    def checksum(self) -> str:
        return checksum(model_to_dict(self))


class BlackBoxModel(Protocol):
    """What an explainer needs from a model: dimensions and masked logits"""
    n_points: int
    n_tabular: int

    def masked_logits(self, z: HeterogeneousInput, z_baseline: HeterogeneousInput,
                      masks: np.ndarray, counter: Optional["EvalCounter"] = None) -> np.ndarray:
        ...


class SummedModel:
    """
    Logit-sum of several models over one feature space: sum_m c_m f_m(z)

    One evaluation of the sum counts as one network evaluation.
    """

    def __init__(self, models: Sequence[BlackBoxModel], coefficients: Sequence[float]):
        if len(models) != len(coefficients) or not models:
            raise ShapeError("need one coefficient per model")
        dims = {(m.n_points, m.n_tabular) for m in models}
        if len(dims) != 1:
            raise ShapeError("summed models must share their feature space")
        self.models = list(models)
        self.coefficients = [float(c) for c in coefficients]
        self.n_points, self.n_tabular = dims.pop()

    def masked_logits(self, z: HeterogeneousInput, z_baseline: HeterogeneousInput,
                      masks: np.ndarray, counter: Optional["EvalCounter"] = None) -> np.ndarray:
        total = np.zeros(np.asarray(masks).shape[0])
        for model, coefficient in zip(self.models, self.coefficients):
            total = total + coefficient * model.masked_logits(z, z_baseline, masks, None)
        if counter is not None:
            counter.increment(total.shape[0])
        return total


# =============================================================================
# EVALUATION COUNTER
# =============================================================================


class EvalCounter:
    """
    Thread-safe count of full network forward passes
    """

    def __init__(self):
        self._count = 0
        self.lock = threading.Lock()

    def increment(self, n: int = 1) -> None:
        if n < 0:
            raise DomainError("evaluation counter can only grow")
        with self.lock:
            self._count += int(n)

    def merge(self, other: "EvalCounter") -> None:
        """Fold a worker-local counter into this one"""
        self.increment(other.count)

    @property
    def count(self) -> int:
        with self.lock:
            return self._count


# =============================================================================
# LAYERS
# =============================================================================


def linear_forward(x: np.ndarray, params: DenseLayerParams) -> np.ndarray:
    """
    Dense layer on the last axis: out_m = b_m + sum_l x_l W_lm

    Args:
        x: Array of shape (..., in_dim)
        params: Layer parameters

    Returns:
        Array of shape (..., out_dim)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"linear layer expects {params.in_dim} inputs, got {x.shape[-1]}")
    return x @ params.weights + params.bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def batchnorm_infer(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """y = gamma (x - running_mean) / sqrt(running_var + eps) + beta"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.width:
        raise ShapeError(f"batch-norm expects {params.width} channels, got {x.shape[-1]}")
    return params.gamma * (x - params.running_mean) / np.sqrt(params.running_var + params.epsilon) + params.beta


def point_layer_forward(x: np.ndarray, layer: PointLayer) -> np.ndarray:
    out = linear_forward(x, layer.dense)
    if layer.batchnorm is not None:
        out = batchnorm_infer(out, layer.batchnorm)
    if layer.activation:
        out = relu_forward(out)
    return out


def point_embeddings(points: np.ndarray, model: WdpnModel) -> np.ndarray:
    """Shared point MLP applied to every point: (..., K, 3) -> (..., K, latent)"""
    out = np.asarray(points, dtype=np.float64)
    for layer in model.point_mlp:
        out = point_layer_forward(out, layer)
    return out


def pointnet_encode(cloud: np.ndarray, model: WdpnModel) -> np.ndarray:
    """
    Global descriptor of a point cloud: shared MLP then channelwise max

    Args:
        cloud: Points of shape (K', 3) with 1 <= K'
        model: Network parameters

    Returns:
        Descriptor of shape (latent_dim,)
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[0] == 0:
        raise DomainError("cannot encode an empty point cloud")
    return point_embeddings(as_point_cloud(cloud), model).max(axis=0)


def fusion_forward(latent: np.ndarray, tabular: np.ndarray, model: WdpnModel) -> np.ndarray:
    fused = np.concatenate([latent, tabular], axis=-1)
    return linear_forward(fused, model.fusion)[..., 0]


def sigmoid(logit: Any) -> Any:
    """Predicted probability, for reporting only"""
    return expit(logit)


def _check_input(z: HeterogeneousInput, model: BlackBoxModel) -> None:
    if z.n_points != model.n_points or z.n_tabular != model.n_tabular:
        raise ShapeError(
            f"input has (K={z.n_points}, D={z.n_tabular}), model expects "
            f"(K={model.n_points}, D={model.n_tabular})")


def forward_batch(points: np.ndarray, tabular: np.ndarray, model: WdpnModel,
                  counter: Optional[EvalCounter] = None) -> np.ndarray:
    """
    Logits for a batch of inputs

    Args:
        points: Array of shape (N, K, 3)
        tabular: Array of shape (N, D)
        model: Network parameters
        counter: Optional counter, incremented by N

    Returns:
        Logits of shape (N,)
    """
    points = np.asarray(points, dtype=np.float64)
    tabular = np.asarray(tabular, dtype=np.float64).reshape(points.shape[0], model.n_tabular)
    if points.ndim != 3 or points.shape[1:] != (model.n_points, 3):
        raise ShapeError(f"expected points of shape (N, {model.n_points}, 3), got {points.shape}")
    latent = point_embeddings(points, model).max(axis=1)
    logits = fusion_forward(latent, tabular, model)
    if counter is not None:
        counter.increment(points.shape[0])
    return logits


def wdpn_forward(z: HeterogeneousInput, model: WdpnModel,
                 counter: Optional[EvalCounter] = None) -> float:
    """
    Logit of one input: fusion([pointnet_encode(P); x])

    Args:
        z: Input matching the model's (K, D)
        model: Network parameters
        counter: Optional counter, incremented by one

    Returns:
        Pre-sigmoid logit
    """
    _check_input(z, model)
    logit = fusion_forward(pointnet_encode(z.points, model), z.tabular, model)
    if counter is not None:
        counter.increment(1)
    return float(logit)


def masked_forward(z: HeterogeneousInput, z_baseline: HeterogeneousInput, masks: np.ndarray,
                   model: WdpnModel, counter: Optional[EvalCounter] = None,
                   chunk_size: int = ExplainerDefaults.COALITION_CHUNK) -> np.ndarray:
    """
    Logits of many masked copies of z

    Row r of ``masks`` keeps feature j from z where True and takes it from the
    baseline where False (points first, then tabular columns). The point MLP
    acts on each point on its own, so both versions of every point are
    embedded once and each coalition only costs a max and the fusion layer.
    Every row counts as one network evaluation.

    Args:
        z: Input being explained
        z_baseline: Baseline input with the same shape
        masks: Boolean array of shape (N, K + D)
        model: Network parameters
        counter: Optional counter, incremented by N
        chunk_size: Rows per batch; fixed so results never depend on threading

    Returns:
        Logits of shape (N,)
    """
    _check_input(z, model)
    _check_input(z_baseline, model)
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 2 or masks.shape[1] != model.n_features:
        raise ShapeError(f"masks must have shape (N, {model.n_features}), got {masks.shape}")
    k = model.n_points
    embedded = point_embeddings(z.points, model)
    embedded_baseline = point_embeddings(z_baseline.points, model)
    logits = np.empty(masks.shape[0])
    for start in range(0, masks.shape[0], chunk_size):
        block = masks[start:start + chunk_size]
        latent = np.where(block[:, :k, None], embedded[None], embedded_baseline[None]).max(axis=1)
        tabular = np.where(block[:, k:], z.tabular[None], z_baseline.tabular[None])
        logits[start:start + block.shape[0]] = fusion_forward(latent, tabular, model)
    if counter is not None:
        counter.increment(masks.shape[0])
    return logits


# =============================================================================
# SERIALIZATION
# =============================================================================


def model_to_dict(model: WdpnModel) -> Dict[str, Any]:
    layers: List[Dict[str, Any]] = []
    for layer in model.point_mlp:
        entry: Dict[str, Any] = {
            "W": layer.dense.weights.tolist(),
            "b": layer.dense.bias.tolist(),
            "activation": bool(layer.activation),
            "batchnorm": None,
        }
        if layer.batchnorm is not None:
            bn = layer.batchnorm
            entry["batchnorm"] = {
                "gamma": bn.gamma.tolist(),
                "beta": bn.beta.tolist(),
                "running_mean": bn.running_mean.tolist(),
                "running_var": bn.running_var.tolist(),
                "epsilon": float(bn.epsilon),
            }
        layers.append(entry)
    return {
        "format_version": ArchitectureDefaults.MODEL_FORMAT_VERSION,
        "K": model.n_points,
        "D": model.n_tabular,
        "point_mlp": layers,
        "fusion": {"W": model.fusion.weights.tolist(), "b": model.fusion.bias.tolist()},
    }


def model_from_dict(payload: Dict[str, Any]) -> WdpnModel:
    """
    Rebuild a model from its JSON document

    Raises:
        ModelFormatError: Missing fields, wrong version or inconsistent shapes
    """
    version = payload.get("format_version")
    if version != ArchitectureDefaults.MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {version!r}")
    try:
        layers = []
        for entry in payload["point_mlp"]:
            bn = entry.get("batchnorm")
            layers.append(PointLayer(
                dense=DenseLayerParams(entry["W"], entry["b"]),
                batchnorm=None if bn is None else BatchNormParams(
                    bn["gamma"], bn["beta"], bn["running_mean"], bn["running_var"], float(bn["epsilon"])),
                activation=bool(entry.get("activation", True)),
            ))
        return WdpnModel(
            point_mlp=tuple(layers),
            fusion=DenseLayerParams(payload["fusion"]["W"], payload["fusion"]["b"]),
            n_points=int(payload["K"]),
            n_tabular=int(payload["D"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc


def save_model(model: WdpnModel, path: str) -> str:
    """Write the model JSON and return its checksum"""
    document = model_to_dict(model)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=1)
        handle.write("\n")
    return checksum(document)


def load_model(path: str) -> WdpnModel:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    model = model_from_dict(payload)
    logger.debug("Loaded model K=%d D=%d latent=%d from %s",
                 model.n_points, model.n_tabular, model.latent_dim, path)
    return model
