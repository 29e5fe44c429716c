import numpy as np
import pytest

from camobrew import ModelParams, ModelSpec, grad_params, loss
from camobrew.data import preprocess
from camobrew.io import SynthBlobsConfig, synth_blobs


def fd_grad_theta(spec, params, x, y, step=1e-5):
    """Central finite differences of the loss in theta."""
    grad = np.zeros_like(params.theta)
    for i in range(len(params.theta)):
        up = params.theta.copy()
        up[i] += step
        down = params.theta.copy()
        down[i] -= step
        grad[i] = (
            loss(spec, ModelParams(up, spec.param_layout()), x, y)
            - loss(spec, ModelParams(down, spec.param_layout()), x, y)
        ) / (2 * step)
    return grad


def fd_mixed(spec, params, x, y, w, step=1e-5):
    """Central finite differences of <w, grad_theta loss> in x."""
    grad = np.zeros_like(x)
    for i in range(len(x)):
        up = x.copy()
        up[i] += step
        down = x.copy()
        down[i] -= step
        grad[i] = (
            np.dot(w, grad_params(spec, params, up, y))
            - np.dot(w, grad_params(spec, params, down, y))
        ) / (2 * step)
    return grad


def rel_l2(a, b, floor=1e-9):
    denom = max(np.linalg.norm(b), floor)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


def away_from_kinks(spec, params, x, y, margin=1e-2):
    """FD oracles are invalid near hinge margins and relu kinks."""
    z = preprocess(x, spec.preprocessing)
    if spec.family == "linear-binary-hinge":
        f = float(np.dot(params.view("w"), z) + params.view("b")[0])
        return abs(y * f - 1.0) > margin
    if spec.family == "mlp1-softmax-crossentropy" and spec.activation == "relu":
        u = params.view("W1") @ z + params.view("b1")
        return float(np.min(np.abs(u))) > margin
    return True


def random_case(spec, rng):
    theta = rng.normal(size=spec.num_params())
    params = ModelParams(theta, spec.param_layout())
    x = rng.normal(size=spec.input_dim)
    if spec.preprocessing == "l2-normalize":
        x = x + np.sign(x) * 0.1  # keep away from the origin
    if spec.is_binary:
        y = int(rng.choice([-1, 1]))
    else:
        y = int(rng.integers(spec.num_classes))
    return params, x, y


@pytest.fixture(scope="session")
def binary_blobs():
    return synth_blobs(
        SynthBlobsConfig(
            dim=8, classes=2, train_per_class=100, val_per_class=30,
            cluster_std=2.5, center_scale=1.0, seed=5,
        )
    )


@pytest.fixture(scope="session")
def separable_blobs():
    return synth_blobs(
        SynthBlobsConfig(
            dim=4, classes=2, train_per_class=40, val_per_class=15,
            cluster_std=0.3, center_scale=6.0, seed=3,
        )
    )


ALL_SPECS = [
    ModelSpec("linear-binary-linear-loss", 7, preprocessing="none"),
    ModelSpec("linear-binary-linear-loss", 7, preprocessing="l2-normalize"),
    ModelSpec("linear-binary-hinge", 7, preprocessing="none"),
    ModelSpec("linear-binary-hinge", 7, preprocessing="scale-to-[0,1]"),
    ModelSpec("linear-softmax-crossentropy", 7, 4, preprocessing="none"),
    ModelSpec("linear-softmax-crossentropy", 7, 4, preprocessing="l2-normalize"),
    ModelSpec(
        "mlp1-softmax-crossentropy", 7, 3,
        hidden_width=5, activation="tanh", preprocessing="l2-normalize",
    ),
    ModelSpec(
        "mlp1-softmax-crossentropy", 7, 3,
        hidden_width=5, activation="relu", preprocessing="none",
    ),
]
