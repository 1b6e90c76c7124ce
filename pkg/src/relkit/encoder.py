"""Self-attention encoder over an image's instance set.

Instances are an unordered set: there is no sequence positional encoding, and
spatial information enters only through the box-geometry embedding. Blocks
are post-norm residual (LayerNorm after the residual add) with a ReLU
feed-forward of four times the model width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    col_slice,
    concat,
    constant,
    div,
    gather_rows,
    init_param,
    matmul,
    mean_of,
    mul,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    sqrt,
    sub,
    tensor_mean,
    transpose,
)
from .data import InstanceSet
from .errors import DimensionError, ValidationError


@dataclass
class IRTConfig:
    depth: int = 2
    heads: int = 2
    model_dim: int = 32
    label_embed_dim: int = 16
    box_embed_dim: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("encoder depth must be at least 1")
        if self.model_dim % self.heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} must be divisible by heads {self.heads}")


def box_geometry(boxes: np.ndarray, image_width: float, image_height: float) -> np.ndarray:
    """Scale-invariant 8-vector per box: corners, center, and size, all
    normalized by the image dimensions."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DimensionError(f"boxes must be [n, 4], got {boxes.shape}")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    if np.any(x1 >= x2) or np.any(y1 >= y2):
        raise ValidationError("degenerate box (x1 >= x2 or y1 >= y2)")
    w, h = image_width, image_height
    return np.stack([
        x1 / w, y1 / h, x2 / w, y2 / h,
        (x1 + x2) / (2 * w), (y1 + y2) / (2 * h),
        (x2 - x1) / w, (y2 - y1) / h,
    ], axis=1)


def embed_labels(labels, w_emb: Tensor) -> Tensor:
    """Probability-weighted class embedding: L @ W."""
    labels = as_tensor(labels)
    return matmul(labels, w_emb)


def embed_boxes(boxes: np.ndarray, image_size: tuple[float, float], w_box: Tensor) -> Tensor:
    """Project the fixed geometry vectors; only the projection is learned."""
    geom = box_geometry(boxes, image_size[0], image_size[1])
    return matmul(constant(geom), w_box)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = tensor_mean(x, axis=1, keepdims=True)
    centered = sub(x, mu)
    var = tensor_mean(mul(centered, centered), axis=1, keepdims=True)
    normed = div(centered, sqrt(add(var, constant(eps))))
    return add(mul(normed, gamma), beta)


class InstanceRelationEncoder:
    """Stacked multi-head self-attention over instance rows.

    Input per instance is [features, label embedding, box embedding],
    projected to the model width.
    """

    def __init__(self, feature_dim: int, n_classes: int, config: IRTConfig, rng: np.random.Generator):
        self.config = config
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        d = config.model_dim
        in_dim = feature_dim + config.label_embed_dim + config.box_embed_dim
        self.w_label = init_param(rng, (n_classes, config.label_embed_dim))
        self.w_box = init_param(rng, (8, config.box_embed_dim))
        self.w_in = init_param(rng, (in_dim, d))
        self.b_in = init_param(rng, (d,), fan_in=in_dim)
        self.layers = []
        for _ in range(config.depth):
            self.layers.append({
                "wq": init_param(rng, (d, d)),
                "wk": init_param(rng, (d, d)),
                "wv": init_param(rng, (d, d)),
                "wo": init_param(rng, (d, d)),
                "ln1_g": Tensor(np.ones(d), requires_grad=True),
                "ln1_b": Tensor(np.zeros(d), requires_grad=True),
                "w_ff1": init_param(rng, (d, 4 * d)),
                "b_ff1": init_param(rng, (4 * d,), fan_in=d),
                "w_ff2": init_param(rng, (4 * d, d)),
                "b_ff2": init_param(rng, (d,), fan_in=4 * d),
                "ln2_g": Tensor(np.ones(d), requires_grad=True),
                "ln2_b": Tensor(np.zeros(d), requires_grad=True),
            })

    def params(self, prefix: str = "irt") -> dict[str, Tensor]:
        out = {
            f"{prefix}.w_label": self.w_label,
            f"{prefix}.w_box": self.w_box,
            f"{prefix}.w_in": self.w_in,
            f"{prefix}.b_in": self.b_in,
        }
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.items():
                out[f"{prefix}.layer{i}.{name}"] = tensor
        return out

    def encode(self, instances: InstanceSet, labels_override=None, collect_attention: bool = False):
        """Context features [n, model_dim]; optionally also the per-layer,
        per-head attention matrices."""
        n = len(instances)
        labels = instances.labels if labels_override is None else labels_override
        if labels.shape[0] != n or instances.features.shape[0] != n:
            raise DimensionError("labels/features row count must match the instance count")
        if instances.features.shape[1] != self.feature_dim:
            raise DimensionError(
                f"feature dim {instances.features.shape[1]}, encoder expects {self.feature_dim}")
        if n == 0:
            empty = constant(np.zeros((0, self.config.model_dim)))
            return (empty, []) if collect_attention else empty

        e_label = embed_labels(constant(labels), self.w_label)
        e_box = embed_boxes(instances.boxes, (instances.image_width, instances.image_height), self.w_box)
        x = concat([constant(instances.features), e_label, e_box], axis=1)
        x = add(matmul(x, self.w_in), self.b_in)

        d = self.config.model_dim
        dk = d // self.config.heads
        scale = constant(1.0 / math.sqrt(dk))
        attention_maps = []
        for layer in self.layers:
            q = matmul(x, layer["wq"])
            k = matmul(x, layer["wk"])
            v = matmul(x, layer["wv"])
            head_outputs = []
            for h in range(self.config.heads):
                lo, hi = h * dk, (h + 1) * dk
                qh, kh, vh = col_slice(q, lo, hi), col_slice(k, lo, hi), col_slice(v, lo, hi)
                weights = softmax(mul(matmul(qh, transpose(kh)), scale), axis=-1)
                if collect_attention:
                    attention_maps.append(weights.data.copy())
                head_outputs.append(matmul(weights, vh))
            attended = matmul(concat(head_outputs, axis=1), layer["wo"])
            x = layer_norm(add(x, attended), layer["ln1_g"], layer["ln1_b"])
            hidden = relu(add(matmul(x, layer["w_ff1"]), layer["b_ff1"]))
            ff = add(matmul(hidden, layer["w_ff2"]), layer["b_ff2"])
            x = layer_norm(add(x, ff), layer["ln2_g"], layer["ln2_b"])
        if collect_attention:
            return x, attention_maps
        return x


class LabelRefiner:
    """Second, independently parameterized encoder that predicts instance
    classes; drives the setup where ground-truth classes are withheld.

    Its label input is the uninformative uniform distribution, so predictions
    rest on appearance features and geometry alone.
    """

    def __init__(self, feature_dim: int, n_classes: int, config: IRTConfig, rng: np.random.Generator):
        self.encoder = InstanceRelationEncoder(feature_dim, n_classes, config, rng)
        self.n_classes = n_classes
        self.w_cls = init_param(rng, (config.model_dim, n_classes))
        self.b_cls = init_param(rng, (n_classes,), fan_in=config.model_dim)

    def params(self, prefix: str = "refiner") -> dict[str, Tensor]:
        out = self.encoder.params(prefix=f"{prefix}.encoder")
        out[f"{prefix}.w_cls"] = self.w_cls
        out[f"{prefix}.b_cls"] = self.b_cls
        return out

    def logits(self, instances: InstanceSet) -> Tensor:
        n = len(instances)
        uniform = np.full((n, self.n_classes), 1.0 / self.n_classes)
        context = self.encoder.encode(instances, labels_override=uniform)
        return add(matmul(context, self.w_cls), self.b_cls)

    def loss(self, instances: InstanceSet) -> Tensor:
        if instances.gt_classes is None:
            raise ValidationError("label refinement needs ground-truth classes")
        logits = self.logits(instances)
        terms = [
            softmax_cross_entropy(reshape(gather_rows(logits, [i]), (self.n_classes,)), int(cls))
            for i, cls in enumerate(instances.gt_classes)
        ]
        return mean_of(terms)

    def predict(self, instances: InstanceSet) -> tuple[np.ndarray, np.ndarray]:
        """(predicted class ids, softmax probabilities) without recording."""
        logits = self.logits(instances).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        return logits.argmax(axis=1), probs
