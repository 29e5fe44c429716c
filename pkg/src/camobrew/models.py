"""Model families, losses, trainers, and differentiation contracts.

Four differentiable families over a flat parameter vector theta:

  linear-binary-linear-loss   f(x) = w.z + b,  loss = -y f       (y in {-1,+1})
  linear-binary-hinge         f(x) = w.z + b,  loss = max(0, 1 - y f)
  linear-softmax-crossentropy scores = W z + b, loss = -log softmax_y
  mlp1-softmax-crossentropy   one hidden layer (tanh or relu), softmax head

where z = preprocess(x) is the declared front transform applied inside the
model, so all input-space derivatives are taken in raw feature units.

Besides plain parameter gradients, brewing needs the mixed second-order
quantity grad_x <w, grad_theta loss> for an arbitrary parameter-space
vector w. That is derived analytically per family here (no autodiff) and
is checked against finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .augment import AugmentationPolicy, flip_permutation
from .data import Dataset, preprocess, preprocess_batch, preprocess_vjp, ROLE_CLEAN
from .errors import ConfigError, DataError, ModelError, TrainingDivergedError

FAMILY_LINEAR = "linear-binary-linear-loss"
FAMILY_HINGE = "linear-binary-hinge"
FAMILY_SOFTMAX = "linear-softmax-crossentropy"
FAMILY_MLP1 = "mlp1-softmax-crossentropy"
VALID_FAMILIES = (FAMILY_LINEAR, FAMILY_HINGE, FAMILY_SOFTMAX, FAMILY_MLP1)
BINARY_FAMILIES = (FAMILY_LINEAR, FAMILY_HINGE)


@dataclass(frozen=True)
class ModelSpec:
    """Family descriptor. `preprocessing` must match the dataset's."""

    family: str
    input_dim: int
    num_classes: int = 2
    hidden_width: Optional[int] = None
    activation: Optional[str] = None
    preprocessing: str = "none"

    def __post_init__(self):
        if self.family not in VALID_FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.family in BINARY_FAMILIES and self.num_classes != 2:
            raise ConfigError(f"{self.family} requires num_classes == 2")
        if self.family == FAMILY_MLP1:
            if self.hidden_width is None or self.hidden_width < 1:
                raise ConfigError("mlp1 requires hidden_width >= 1")
            if self.activation not in ("tanh", "relu"):
                raise ConfigError("mlp1 activation must be 'tanh' or 'relu'")
        elif self.hidden_width is not None or self.activation is not None:
            raise ConfigError("hidden_width/activation only apply to mlp1")

    @property
    def is_binary(self) -> bool:
        return self.family in BINARY_FAMILIES

    def param_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        d, k = self.input_dim, self.num_classes
        if self.is_binary:
            return [("w", (d,)), ("b", (1,))]
        if self.family == FAMILY_SOFTMAX:
            return [("W", (k, d)), ("b", (k,))]
        m = self.hidden_width
        return [("W1", (m, d)), ("b1", (m,)), ("W2", (k, m)), ("b2", (k,))]

    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_layout())

    def spec_id(self) -> str:
        parts = [self.family, f"d{self.input_dim}", f"k{self.num_classes}"]
        if self.family == FAMILY_MLP1:
            parts.append(f"m{self.hidden_width}-{self.activation}")
        parts.append(self.preprocessing)
        return "/".join(parts)


@dataclass
class ModelParams:
    """Flat parameter vector plus its layout."""

    theta: np.ndarray
    shape_descriptor: list[tuple[str, tuple[int, ...]]]
    final_train_loss: Optional[float] = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expected = sum(int(np.prod(s)) for _, s in self.shape_descriptor)
        if self.theta.shape != (expected,):
            raise ModelError(
                f"parameter vector has length {self.theta.shape}, layout needs {expected}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ModelError("parameter vector contains non-finite entries")

    def view(self, name: str) -> np.ndarray:
        offset = 0
        for n, shape in self.shape_descriptor:
            size = int(np.prod(shape))
            if n == name:
                return self.theta[offset : offset + size].reshape(shape)
            offset += size
        raise ModelError(f"no parameter block named {name!r}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.theta.copy(), list(self.shape_descriptor), self.final_train_loss)


def zeros_params(spec: ModelSpec) -> ModelParams:
    return ModelParams(np.zeros(spec.num_params()), spec.param_layout())


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Seeded initialization: weights ~ N(0, 1/fan_in), biases zero."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    blocks = []
    for name, shape in spec.param_layout():
        if name.startswith("b"):
            blocks.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = shape[-1]
            blocks.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=int(np.prod(shape))))
    return ModelParams(np.concatenate(blocks), spec.param_layout())


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise ModelError(f"input has shape {x.shape}, expected ({spec.input_dim},)")
    return x


def _check_label(spec: ModelSpec, y: int) -> int:
    y = int(y)
    if spec.is_binary:
        if y not in (-1, 1):
            raise ModelError(f"binary label must be -1 or +1, got {y}")
    elif not (0 <= y < spec.num_classes):
        raise ModelError(f"label {y} out of range for K={spec.num_classes}")
    return y


def _activation(name: str, u: np.ndarray) -> np.ndarray:
    return np.tanh(u) if name == "tanh" else np.maximum(u, 0.0)


def _activation_deriv(name: str, u: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(u)
        return 1.0 - t * t
    return (u > 0.0).astype(np.float64)


def _activation_second_deriv(name: str, u: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(u)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(u)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def _log_softmax_loss(scores: np.ndarray, y: int) -> float:
    m = scores.max()
    log_z = m + math.log(np.exp(scores - m).sum())
    return float(log_z - scores[y])


def forward(spec: ModelSpec, params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Score vector: length 1 (signed) for binary families, length K otherwise."""
    x = _check_input(spec, x)
    z = preprocess(x, spec.preprocessing)
    if spec.is_binary:
        return np.array([float(np.dot(params.view("w"), z) + params.view("b")[0])])
    if spec.family == FAMILY_SOFTMAX:
        return params.view("W") @ z + params.view("b")
    u = params.view("W1") @ z + params.view("b1")
    h = _activation(spec.activation, u)
    return params.view("W2") @ h + params.view("b2")


def loss(spec: ModelSpec, params: ModelParams, x: np.ndarray, y: int) -> float:
    y = _check_label(spec, y)
    scores = forward(spec, params, x)
    if not np.all(np.isfinite(scores)):
        raise ModelError("non-finite score", layer="scores")
    if spec.family == FAMILY_LINEAR:
        return float(-y * scores[0])
    if spec.family == FAMILY_HINGE:
        return float(max(0.0, 1.0 - y * scores[0]))
    value = _log_softmax_loss(scores, y)
    if not math.isfinite(value):
        raise ModelError("non-finite loss", layer="softmax")
    return value


def grad_params(spec: ModelSpec, params: ModelParams, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of the per-example loss with respect to theta (flat)."""
    y = _check_label(spec, y)
    x = _check_input(spec, x)
    z = preprocess(x, spec.preprocessing)
    if spec.is_binary:
        f = float(np.dot(params.view("w"), z) + params.view("b")[0])
        if spec.family == FAMILY_HINGE and y * f >= 1.0:
            return np.zeros_like(params.theta)
        return np.concatenate([-y * z, [-float(y)]])
    if spec.family == FAMILY_SOFTMAX:
        scores = params.view("W") @ z + params.view("b")
        p = _softmax(scores)
        e = p.copy()
        e[y] -= 1.0
        return np.concatenate([np.outer(e, z).ravel(), e])
    w1, b1 = params.view("W1"), params.view("b1")
    w2, b2 = params.view("W2"), params.view("b2")
    u = w1 @ z + b1
    h = _activation(spec.activation, u)
    p = _softmax(w2 @ h + b2)
    e = p.copy()
    e[y] -= 1.0
    delta = (w2.T @ e) * _activation_deriv(spec.activation, u)
    return np.concatenate([np.outer(delta, z).ravel(), delta, np.outer(e, h).ravel(), e])


def mixed_vjp(
    spec: ModelSpec, params: ModelParams, x: np.ndarray, y: int, w: np.ndarray
) -> np.ndarray:
    """grad_x of <w, grad_theta loss(f(x, theta), y)> in raw feature space.

    The inner product is differentiated analytically in the preprocessed
    coordinate z and pulled back through the preprocessing Jacobian.

    Derivation sketch for mlp1 (u = W1 z + b1, h = act(u), p = softmax of
    W2 h + b2, e = p - onehot(y), J = diag(p) - p p^T): splitting w into
    blocks (A1, c1, A2, c2) matching (W1, b1, W2, b2), the scalar is

        S = e^T A2 h + c2^T e + delta^T (A1 z) + c1^T delta,
        delta = (W2^T e) * act'(u).

    Collecting differentials with dh = act'(u) * W1 dz gives

        dS/dz = W1^T kappa + A1^T (v * act'(u)),
        v     = W2^T e
        alpha = W2^T J (A2 h + c2) + A2^T e
        gamma = W2^T J W2 (act'(u) * (A1 z + c1))
        rho   = v * act''(u) * (A1 z + c1)
        kappa = act'(u) * (alpha + gamma) + rho.

    The linear-softmax case is the same with the hidden layer removed, and
    the binary-linear case reduces to -y * w_weights (zeroed beyond the
    hinge margin).
    """
    y = _check_label(spec, y)
    x = _check_input(spec, x)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != params.theta.shape:
        raise ModelError(f"cotangent has shape {w.shape}, expected {params.theta.shape}")
    z = preprocess(x, spec.preprocessing)

    if spec.is_binary:
        if spec.family == FAMILY_HINGE:
            f = float(np.dot(params.view("w"), z) + params.view("b")[0])
            if y * f >= 1.0:
                return np.zeros(spec.input_dim)
        grad_z = -y * w[: spec.input_dim]
        return preprocess_vjp(x, grad_z, spec.preprocessing)

    if spec.family == FAMILY_SOFTMAX:
        d, k = spec.input_dim, spec.num_classes
        weight_mat = params.view("W")
        w_mat = w[: k * d].reshape(k, d)
        w_bias = w[k * d :]
        p = _softmax(weight_mat @ z + params.view("b"))
        e = p.copy()
        e[y] -= 1.0
        a = w_mat @ z + w_bias
        j_a = p * (a - np.dot(p, a))
        grad_z = weight_mat.T @ j_a + w_mat.T @ e
        return preprocess_vjp(x, grad_z, spec.preprocessing)

    d, k, m = spec.input_dim, spec.num_classes, spec.hidden_width
    w1, b1 = params.view("W1"), params.view("b1")
    w2, b2 = params.view("W2"), params.view("b2")
    off = 0
    a1 = w[off : off + m * d].reshape(m, d); off += m * d
    c1 = w[off : off + m]; off += m
    a2 = w[off : off + k * m].reshape(k, m); off += k * m
    c2 = w[off : off + k]

    u = w1 @ z + b1
    act_d = _activation_deriv(spec.activation, u)
    act_dd = _activation_second_deriv(spec.activation, u)
    h = _activation(spec.activation, u)
    p = _softmax(w2 @ h + b2)
    e = p.copy()
    e[y] -= 1.0

    def apply_j(vec: np.ndarray) -> np.ndarray:
        return p * vec - p * np.dot(p, vec)

    v = w2.T @ e
    q_plus_c1 = a1 @ z + c1
    alpha = w2.T @ apply_j(a2 @ h + c2) + a2.T @ e
    gamma = w2.T @ apply_j(w2 @ (act_d * q_plus_c1))
    rho = v * act_dd * q_plus_c1
    kappa = act_d * (alpha + gamma) + rho
    grad_z = w1.T @ kappa + a1.T @ (v * act_d)
    return preprocess_vjp(x, grad_z, spec.preprocessing)


def predict(spec: ModelSpec, params: ModelParams, x: np.ndarray) -> int:
    """Class label: sign for binary (0 breaks to +1), argmax otherwise."""
    scores = forward(spec, params, x)
    if spec.is_binary:
        return 1 if scores[0] >= 0.0 else -1
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    """Victim training configuration.

    `optimizer` is "full-batch-gd" (lr, steps, optional stop_tol and
    momentum) or "sgd" (lr, momentum, batch_size, epochs). Weight decay is
    applied to weight matrices only. `loss_reduction` selects mean or sum
    aggregation of per-example losses. Identical config + identical dataset
    order produce bit-identical parameters.
    """

    optimizer: str = "full-batch-gd"
    lr: float = 0.1
    steps: int = 200
    epochs: int = 1
    batch_size: int = 32
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    shuffle_each_epoch: bool = True
    loss_reduction: str = "mean"
    stop_tol: Optional[float] = None
    augmentation: Optional[AugmentationPolicy] = None

    def __post_init__(self):
        if self.optimizer not in ("full-batch-gd", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.optimizer == "full-batch-gd" and self.steps < 1:
            raise ConfigError("full-batch-gd needs steps >= 1")
        if self.optimizer == "sgd":
            if self.epochs < 1:
                raise ConfigError("sgd needs epochs >= 1")
            if self.batch_size < 1:
                raise ConfigError("sgd needs batch_size >= 1")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")


def _encode_labels(spec: ModelSpec, labels: np.ndarray) -> np.ndarray:
    if spec.is_binary:
        bad = ~np.isin(labels, (-1, 1))
        if np.any(bad):
            raise DataError("binary training labels must be -1/+1")
        return labels.astype(np.float64)
    if np.any((labels < 0) | (labels >= spec.num_classes)):
        raise DataError("label out of range for model")
    return labels


def _batch_scores(spec: ModelSpec, params: ModelParams, Z: np.ndarray):
    """Scores for preprocessed rows; returns extras needed by backward."""
    if spec.is_binary:
        return Z @ params.view("w") + params.view("b")[0], None
    if spec.family == FAMILY_SOFTMAX:
        return Z @ params.view("W").T + params.view("b"), None
    u = Z @ params.view("W1").T + params.view("b1")
    h = _activation(spec.activation, u)
    return h @ params.view("W2").T + params.view("b2"), (u, h)


def _batch_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def batch_loss_and_grad(
    spec: ModelSpec,
    params: ModelParams,
    Z: np.ndarray,
    labels: np.ndarray,
    reduction: str = "mean",
    weight_decay: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Aggregated loss and flat gradient over preprocessed rows `Z`.

    Weight decay contributes (wd/2)||weights||^2 to the objective and
    wd * weights to the gradient (biases excluded).
    """
    n = Z.shape[0]
    scale = 1.0 / n if reduction == "mean" else 1.0
    scores, extras = _batch_scores(spec, params, Z)

    if spec.is_binary:
        y = labels
        margins = y * scores
        if spec.family == FAMILY_LINEAR:
            data_loss = float(np.sum(-margins)) * scale
            coeff = -y * scale
        else:
            active = margins < 1.0
            data_loss = float(np.sum(np.maximum(0.0, 1.0 - margins))) * scale
            coeff = np.where(active, -y, 0.0) * scale
        grad_w = coeff @ Z
        grad_b = float(np.sum(coeff))
        grad = np.concatenate([grad_w, [grad_b]])
        weights = params.view("w")
        if weight_decay:
            data_loss += 0.5 * weight_decay * float(np.dot(weights, weights))
            grad[: spec.input_dim] += weight_decay * weights
        return data_loss, grad

    idx = np.arange(n)
    probs = _batch_softmax(scores)
    log_probs = scores - (
        scores.max(axis=1, keepdims=True)
        + np.log(np.exp(scores - scores.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True))
    )
    data_loss = float(np.sum(-log_probs[idx, labels])) * scale
    err = probs.copy()
    err[idx, labels] -= 1.0
    err *= scale

    if spec.family == FAMILY_SOFTMAX:
        grad_w_mat = err.T @ Z
        grad_b = err.sum(axis=0)
        grad = np.concatenate([grad_w_mat.ravel(), grad_b])
        if weight_decay:
            wmat = params.view("W")
            data_loss += 0.5 * weight_decay * float(np.sum(wmat * wmat))
            grad[: wmat.size] += weight_decay * wmat.ravel()
        return data_loss, grad

    u, h = extras
    w2 = params.view("W2")
    grad_w2 = err.T @ h
    grad_b2 = err.sum(axis=0)
    hidden_err = (err @ w2) * _activation_deriv(spec.activation, u)
    grad_w1 = hidden_err.T @ Z
    grad_b1 = hidden_err.sum(axis=0)
    grad = np.concatenate([grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2])
    if weight_decay:
        w1 = params.view("W1")
        data_loss += 0.5 * weight_decay * (float(np.sum(w1 * w1)) + float(np.sum(w2 * w2)))
        grad[: w1.size] += weight_decay * w1.ravel()
        off = w1.size + w1.shape[0]
        grad[off : off + w2.size] += weight_decay * w2.ravel()
    return data_loss, grad


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig) -> ModelParams:
    """Train from a seeded initialization; deterministic given (spec, data order, config)."""
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if dataset.dim != spec.input_dim:
        raise ModelError(f"dataset dim {dataset.dim} != model input dim {spec.input_dim}")
    if dataset.preprocessing != spec.preprocessing:
        raise ConfigError(
            f"dataset preprocessing {dataset.preprocessing!r} does not match "
            f"model preprocessing {spec.preprocessing!r}"
        )
    labels = _encode_labels(spec, dataset.labels_array)
    Z = preprocess_batch(dataset.features_matrix, spec.preprocessing)
    params = init_params(spec, config.seed)

    aug_perm = None
    if config.augmentation is not None and config.augmentation.active:
        # hflip is a coordinate permutation, so it commutes with both
        # supported preprocessors and may be applied to cached rows.
        if dataset.image_shape is None:
            raise DataError("flip augmentation requires image-shaped features")
        aug_perm = flip_permutation(dataset.image_shape)

    def epoch_view(epoch: int) -> np.ndarray:
        if aug_perm is None:
            return Z
        mask = config.augmentation.draw_mask(config.seed, epoch, Z.shape[0])
        if not mask.any():
            return Z
        out = Z.copy()
        out[mask] = out[mask][:, aug_perm]
        return out

    if config.optimizer == "full-batch-gd":
        prev_loss = None
        for step in range(config.steps):
            loss_value, grad = batch_loss_and_grad(
                spec, params, epoch_view(step), labels,
                reduction=config.loss_reduction, weight_decay=config.weight_decay,
            )
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(f"non-finite loss at step {step}", step=step)
            params.theta -= config.lr * grad
            if (
                config.stop_tol is not None
                and prev_loss is not None
                and abs(prev_loss - loss_value) < config.stop_tol
            ):
                prev_loss = loss_value
                break
            prev_loss = loss_value
        params.final_train_loss = prev_loss
        return params

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0x5D])))
    velocity = np.zeros_like(params.theta)
    n = len(dataset)
    last_loss = None
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle_each_epoch else np.arange(n)
        Z_epoch = epoch_view(epoch)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            loss_value, grad = batch_loss_and_grad(
                spec, params, Z_epoch[batch], labels[batch],
                reduction=config.loss_reduction, weight_decay=config.weight_decay,
            )
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", step=epoch)
            velocity = config.momentum * velocity + grad
            params.theta -= config.lr * velocity
            last_loss = loss_value
    params.final_train_loss = last_loss
    return params


def predict_batch(spec: ModelSpec, params: ModelParams, X: np.ndarray) -> np.ndarray:
    Z = preprocess_batch(X, spec.preprocessing)
    scores, _ = _batch_scores(spec, params, Z)
    if spec.is_binary:
        return np.where(scores >= 0.0, 1, -1)
    return np.argmax(scores, axis=1)


def validation_accuracy(spec: ModelSpec, params: ModelParams, dataset: Dataset) -> float:
    """Exact fraction of correct predictions over a held-out dataset."""
    if len(dataset) == 0:
        raise DataError("validation dataset is empty")
    if any(ex.role != ROLE_CLEAN for ex in dataset):
        raise DataError("validation dataset must contain only clean-tagged examples")
    preds = predict_batch(spec, params, dataset.features_matrix)
    return float(np.mean(preds == dataset.labels_array))


def dataset_loss(
    spec: ModelSpec, params: ModelParams, dataset: Dataset, reduction: str = "mean"
) -> float:
    labels = _encode_labels(spec, dataset.labels_array)
    Z = preprocess_batch(dataset.features_matrix, spec.preprocessing)
    value, _ = batch_loss_and_grad(spec, params, Z, labels, reduction=reduction)
    return value
