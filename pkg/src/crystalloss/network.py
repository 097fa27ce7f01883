"""Small feed-forward embedding network and the mini-batch SGD loop.

The network stands in for whatever backbone produces the embedding; all
the interesting math lives in the heads.  Training is single-threaded and
fully deterministic given the config seed (fixed init, fixed shuffle
order, fixed summation order through numpy reductions).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch, DivergedLoss, InsufficientSamples, NearZeroNorm
from .heads import (
    CrystalHead,
    SoftmaxHead,
    alpha_lower_bound,
    apply_gradients,
    glorot_uniform,
    head_backward,
    head_logits,
)
from .linalg import EPS_NORM
from .validation import as_labels, as_matrix

__all__ = [
    "Layer",
    "MlpModel",
    "TrainConfig",
    "TrainHistory",
    "GradCheckReport",
    "build_head",
    "train",
    "grad_check_model",
    "extract_features",
    "angular_spread",
]

HEAD_KINDS = ("softmax", "crystal_fixed", "crystal_trainable")

# Alpha used by crystal_fixed when the config leaves it unset.
DEFAULT_ALPHA = 50.0


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str  # "relu" | "identity"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = as_matrix(self.weight, name="layer weight")
        if self.bias.shape != (self.weight.shape[1],):
            raise DimensionMismatch("layer bias length must equal fan_out")


class MlpModel:
    """Stack of dense layers; the last layer is the embedding output and is
    always identity-activated (features may be negative; any normalization
    happens in the head)."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DimensionMismatch(
                    f"layer output {prev.weight.shape[1]} does not chain into "
                    f"layer input {nxt.weight.shape[0]}"
                )
        if layers[-1].activation != "identity":
            raise ValueError("final layer activation must be identity")
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @classmethod
    def initialize(cls, layer_sizes: list[int], rng: np.random.Generator) -> "MlpModel":
        """Glorot-uniform weights, zero biases; relu on all hidden layers."""
        if len(layer_sizes) < 2:
            raise ValueError("layer_sizes needs input and output dims")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes, layer_sizes[1:])):
            act = "identity" if i == len(layer_sizes) - 2 else "relu"
            layers.append(
                Layer(glorot_uniform(fan_in, fan_out, rng), np.zeros(fan_out), act)
            )
        return cls(layers)

    def forward(self, X: np.ndarray):
        """Returns (features, cache) where cache holds per-layer inputs and
        pre-activations for the backward pass."""
        a = X
        cache = []
        for layer in self.layers:
            z = a @ layer.weight + layer.bias
            cache.append((a, z))
            a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return a, cache

    def features(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, cache, grad_features: np.ndarray):
        """Per-layer (grad_weight, grad_bias) for a given feature gradient."""
        grads = [None] * len(self.layers)
        g = grad_features
        for i in range(len(self.layers) - 1, -1, -1):
            a_in, z = cache[i]
            if self.layers[i].activation == "relu":
                g = g * (z > 0.0)
            grads[i] = (a_in.T @ g, g.sum(axis=0))
            g = g @ self.layers[i].weight.T
        return grads


@dataclass
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 0.1
    lr_drop_steps: tuple[int, ...] = ()
    lr_drop_factor: float = 0.1
    max_iters: int = 500
    seed: int = 0
    head_kind: str = "crystal_fixed"
    alpha: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be in (0, 1]")
        steps = tuple(int(s) for s in self.lr_drop_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lr_drop_steps must be strictly increasing")
        self.lr_drop_steps = steps
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)  # one per iteration
    accuracies: list[float] = field(default_factory=list)  # one per epoch
    alphas: list[float] = field(default_factory=list)  # per iteration, crystal only
    final_alpha: float = 0.0


@dataclass
class GradCheckReport:
    """Max relative error of backprop vs central finite differences, per
    parameter block."""

    blocks: dict[str, float]
    eps: float
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max(self.blocks.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def build_head(config: TrainConfig, num_classes: int, feature_dim: int,
               rng: np.random.Generator):
    """Construct the head a config asks for.

    crystal_trainable defaults alpha to the scale lower bound at p=0.9; the
    bound is undefined below 3 classes, so C < 3 requires an explicit alpha.
    """
    if config.head_kind == "softmax":
        return SoftmaxHead.initialize(num_classes, feature_dim, rng)
    if config.alpha is not None:
        alpha = float(config.alpha)
    elif config.head_kind == "crystal_fixed":
        alpha = DEFAULT_ALPHA
    else:
        alpha = alpha_lower_bound(num_classes, 0.9)  # raises for C < 3
    return CrystalHead.initialize(
        num_classes,
        feature_dim,
        alpha=alpha,
        rng=rng,
        alpha_trainable=config.head_kind == "crystal_trainable",
    )


def _lr_at(config: TrainConfig, iteration: int) -> float:
    drops = sum(1 for s in config.lr_drop_steps if iteration >= s)
    return config.base_lr * config.lr_drop_factor**drops


def _accuracy(model: MlpModel, head, X: np.ndarray, y: np.ndarray) -> float:
    logits = head_logits(head, model.features(X))
    return float((logits.argmax(axis=1) == y).mean())


def train(model: MlpModel, head, dataset, config: TrainConfig, eval_set=None):
    """Mini-batch SGD on ``dataset = (X, y)`` through the given head.

    Deterministic given ``config.seed`` (which drives only the shuffle
    stream; model/head arrive already initialized).  Each epoch draws one
    permutation and walks it in consecutive batches; the trailing partial
    batch is kept.  Aborts with :class:`DivergedLoss` if the loss goes
    non-finite.

    Returns ``(model, head, history)``; the model is updated in place, the
    head is a new value.
    """
    X, y = dataset
    X = as_matrix(X, name="X")
    y = as_labels(y, num_classes=head.num_classes)
    if X.shape[0] == 0:
        raise ValueError("dataset must be nonempty")
    if y.size != X.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} samples but {y.size} labels")
    if eval_set is None:
        eval_X, eval_y = X, y
    else:
        eval_X = as_matrix(eval_set[0], name="eval X")
        eval_y = as_labels(eval_set[1], num_classes=head.num_classes)

    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    track_alpha = isinstance(head, CrystalHead)
    n = X.shape[0]
    it = 0
    while it < config.max_iters:
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if it >= config.max_iters:
                break
            idx = perm[start : start + config.batch_size]
            feats, cache = model.forward(X[idx])
            result = head_backward(head, feats, y[idx])
            if not np.isfinite(result.loss):
                raise DivergedLoss(it)
            lr = _lr_at(config, it)
            head = apply_gradients(head, result, lr)
            for layer, (gw, gb) in zip(model.layers, model.backward(cache, result.grad_features)):
                layer.weight -= lr * gw
                layer.bias -= lr * gb
            history.losses.append(result.loss)
            if track_alpha:
                history.alphas.append(head.alpha)
            it += 1
        history.accuracies.append(_accuracy(model, head, eval_X, eval_y))
    history.final_alpha = head.alpha if track_alpha else 0.0
    return model, head, history


def _param_blocks(model: MlpModel, head):
    for i, layer in enumerate(model.layers):
        yield f"layer{i}.weight", layer.weight
        yield f"layer{i}.bias", layer.bias
    yield "head.weight", head.weights
    yield "head.bias", head.bias


def _rel_error(a: float, n: float) -> float:
    # Below 1e-3 the comparison is effectively absolute, so central-difference
    # rounding noise (~1e-9 on O(1) losses) cannot drown exact gradients.
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def grad_check_model(model: MlpModel, head, batch, eps: float = 1e-6,
                     tol: float = 1e-5, max_scalars: int | None = None,
                     seed: int = 0) -> GradCheckReport:
    """Central finite differences over every scalar parameter vs backprop.

    For large models pass ``max_scalars`` (>= 200 scalars are then sampled
    across blocks).  Crystal heads get an ``head.alpha`` entry in the report
    whether or not alpha is trainable.  Report-only: never raises on
    mismatch.
    """
    Xb, yb = batch
    Xb = as_matrix(Xb, name="batch X")
    if Xb.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    yb = as_labels(yb, num_classes=head.num_classes)

    def loss_at(h) -> float:
        return head_backward(h, model.features(Xb), yb).loss

    feats, cache = model.forward(Xb)
    result = head_backward(head, feats, yb)
    model_grads = model.backward(cache, result.grad_features)
    analytic = {}
    for i, (gw, gb) in enumerate(model_grads):
        analytic[f"layer{i}.weight"] = gw
        analytic[f"layer{i}.bias"] = gb
    analytic["head.weight"] = result.grad_weights
    analytic["head.bias"] = result.grad_bias

    blocks = list(_param_blocks(model, head))
    total = sum(arr.size for _, arr in blocks)
    rng = np.random.default_rng(seed)
    budget = None
    if max_scalars is not None and total > max_scalars:
        budget = max(200, max_scalars)

    report: dict[str, float] = {}
    for name, arr in blocks:
        flat = arr.reshape(-1)
        indices = np.arange(flat.size)
        if budget is not None:
            take = max(1, int(round(budget * flat.size / total)))
            if take < flat.size:
                indices = rng.choice(flat.size, size=take, replace=False)
        worst = 0.0
        grad_flat = analytic[name].reshape(-1)
        for j in indices:
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_at(head)
            flat[j] = orig - eps
            lm = loss_at(head)
            flat[j] = orig
            worst = max(worst, _rel_error(grad_flat[j], (lp - lm) / (2 * eps)))
        report[name] = worst

    if isinstance(head, CrystalHead):
        lp = loss_at(dataclasses.replace(head, alpha=head.alpha + eps))
        lm = loss_at(dataclasses.replace(head, alpha=head.alpha - eps))
        report["head.alpha"] = _rel_error(result.grad_alpha, (lp - lm) / (2 * eps))
    return GradCheckReport(blocks=report, eps=eps, tol=tol)


def extract_features(model: MlpModel, samples) -> np.ndarray:
    """Raw penultimate features, one row per sample, order preserved.

    NOT normalized; normalization belongs to the similarity scorer.
    """
    X = as_matrix(samples, name="samples")
    if X.shape[1] != model.input_dim:
        raise DimensionMismatch(
            f"samples have dimension {X.shape[1]}, model expects {model.input_dim}"
        )
    return model.features(X)


def angular_spread(features, labels) -> tuple[float, float]:
    """(intra, inter) mean cosine distances.

    intra: mean over classes of the mean pairwise (1 - cosine) within the
    class; inter: mean (1 - cosine) over all cross-class pairs.
    """
    F = as_matrix(features, name="features")
    y = np.asarray(labels)
    if y.shape != (F.shape[0],):
        raise DimensionMismatch("labels must match feature rows")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise InsufficientSamples("need at least 2 classes")
    if counts.min() < 2:
        raise InsufficientSamples("need at least 2 samples per class")
    norms = np.linalg.norm(F, axis=1)
    if np.any(norms <= EPS_NORM):
        raise NearZeroNorm("a feature row has near-zero norm")
    U = F / norms[:, None]
    cos = np.clip(U @ U.T, -1.0, 1.0)
    dist = 1.0 - cos

    per_class = []
    for c in classes:
        idx = np.flatnonzero(y == c)
        sub = dist[np.ix_(idx, idx)]
        iu = np.triu_indices(idx.size, k=1)
        per_class.append(float(sub[iu].mean()))
    intra = float(np.mean(per_class))

    diff = y[:, None] != y[None, :]
    iu = np.triu_indices(y.size, k=1)
    mask = diff[iu]
    inter = float(dist[iu][mask].mean())
    return intra, inter
