"""Toy victim classifiers: training, probabilities, and input gradients.

Two deliberately different architectures — "a" (256→128→64→6, relu) as the
white-box victim and feature extractor, "b" (256→96→96→96→6, tanh) as the
transfer target — plus an adversarially trained variant produced by
single-step sign-gradient augmentation.  Inputs are never clipped here:
callers may legitimately present values slightly outside [−1, 1] and the
gradient field must stay undistorted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .data import IMG_H, IMG_W, N_CLASSES, Dataset
from .errors import ContractViolationError, NumericError
from .tensor import (
    MLP,
    Layer,
    Tape,
    Tensor,
    adam_init,
    adam_step,
    backward_grad,
    clear_grads,
    forward_eval,
    gather_rows,
    log_softmax,
    mlp_init,
    mul,
    tsum,
)

INPUT_DIM = IMG_H * IMG_W

ARCH_SIZES = {"a": [INPUT_DIM, 128, 64, N_CLASSES], "b": [INPUT_DIM, 96, 96, 96, N_CLASSES]}
ARCH_ACTIVATION = {"a": "relu", "b": "tanh"}
FEATURE_DIM = {"a": 64, "b": 96}
_ARCH_CODE = {"a": 0.0, "b": 1.0}


@dataclass
class VictimClassifier:
    arch: str
    net: MLP
    train_seed: int

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIM[self.arch]


@dataclass
class AccuracyReport:
    train_accuracy: float
    test_accuracy: float
    perturbed_accuracy: float | None = None  # test accuracy under the training-time attack


@dataclass
class VictimTrainConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-3


def _check_arch(arch: str) -> None:
    if arch not in ARCH_SIZES:
        raise ContractViolationError(f"unknown architecture {arch!r}; expected one of {sorted(ARCH_SIZES)}")


def _as_flat_batch(x: np.ndarray, width: int = INPUT_DIM) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if width == INPUT_DIM and x.ndim == 2 and x.shape == (IMG_H, IMG_W):
        return x.reshape(1, INPUT_DIM)
    if x.ndim == 1 and x.shape[0] == width:
        return x.reshape(1, width)
    if x.ndim == 3 and x.shape[1] * x.shape[2] == width:
        return x.reshape(x.shape[0], width)
    if x.ndim == 2 and x.shape[1] == width:
        return x
    raise ContractViolationError(f"image batch shape {x.shape} incompatible with input width {width}")


def _input_width(clf: VictimClassifier) -> int:
    return int(clf.net.layers[0].w.data.shape[0])


def logits(clf: VictimClassifier, x: np.ndarray) -> np.ndarray:
    """Plain-numpy logits for a batch; no gradient recording."""
    h = _as_flat_batch(x, _input_width(clf))
    for layer in clf.net.layers:
        h = h @ layer.w.data + layer.b.data
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
        elif layer.activation == "tanh":
            h = np.tanh(h)
    return h


def log_probs(clf: VictimClassifier, x: np.ndarray) -> np.ndarray:
    z = logits(clf, x)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def probs(clf: VictimClassifier, x: np.ndarray) -> np.ndarray:
    return np.exp(log_probs(clf, x))


def classify(clf: VictimClassifier, x: np.ndarray) -> np.ndarray:
    return log_probs(clf, x).argmax(axis=1)


def accuracy(clf: VictimClassifier, ds: Dataset) -> float:
    return float((classify(clf, ds.images) == ds.labels).mean())


def log_prob(clf: VictimClassifier, x: np.ndarray, y: int) -> float:
    """log p(y | x) for one image."""
    if not 0 <= y < N_CLASSES:
        raise ContractViolationError(f"label {y} outside 0..{N_CLASSES - 1}")
    batch = _as_flat_batch(x, _input_width(clf))
    if batch.shape[0] != 1:
        raise ContractViolationError("log_prob takes a single image")
    return float(log_probs(clf, batch)[0, y])


def features(clf: VictimClassifier, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations used as metric features."""
    h = _as_flat_batch(x, _input_width(clf))
    for layer in clf.net.layers[:-1]:
        h = h @ layer.w.data + layer.b.data
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
        elif layer.activation == "tanh":
            h = np.tanh(h)
    return h


def input_log_prob_grad(clf: VictimClassifier, x: np.ndarray, y: int) -> np.ndarray:
    """∇_x log p(y | x), exact reverse-mode, parameters left untouched."""
    if not 0 <= y < N_CLASSES:
        raise ContractViolationError(f"label {y} outside 0..{N_CLASSES - 1}")
    batch = _as_flat_batch(x, _input_width(clf))
    if batch.shape[0] != 1:
        raise ContractViolationError("input_log_prob_grad takes a single image")
    xt = Tensor(batch, requires_grad=True)
    mask = np.zeros((1, N_CLASSES))
    mask[0, y] = 1.0
    with Tape() as tape:
        lp = log_softmax(forward_eval(clf.net, xt))
        value = tsum(mul(lp, Tensor(mask)))
    backward_grad(tape, value)
    grad = xt.grad.reshape(np.asarray(x).shape).copy()
    clear_grads(clf.net.parameters())
    if not np.isfinite(grad).all():
        raise NumericError("non-finite input gradient")
    return grad


def _input_nll_grad_batch(net: MLP, x_flat: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """∇_x of summed cross-entropy for a batch, for sign-gradient augmentation."""
    xt = Tensor(x_flat, requires_grad=True)
    mask = np.zeros((x_flat.shape[0], N_CLASSES))
    mask[np.arange(x_flat.shape[0]), labels] = 1.0
    with Tape() as tape:
        lp = log_softmax(forward_eval(net, xt))
        loss = mul(tsum(mul(lp, Tensor(mask))), -1.0)
    backward_grad(tape, loss)
    grad = xt.grad.copy()
    clear_grads(net.parameters())
    return grad


def _sign_attack(clf: VictimClassifier, images: np.ndarray, labels: np.ndarray, eps: float) -> np.ndarray:
    flat = _as_flat_batch(images)
    grad = _input_nll_grad_batch(clf.net, flat, labels)
    return flat + eps * np.sign(grad)


def _train_loop(
    train: Dataset,
    test: Dataset,
    arch: str,
    config: VictimTrainConfig,
    rng: np.random.Generator,
    attack_eps: float,
) -> tuple[VictimClassifier, AccuracyReport]:
    _check_arch(arch)
    if train.n == 0 or test.n == 0:
        raise ContractViolationError("train and test splits must be nonempty")
    if config.steps < 1:
        raise ContractViolationError("steps must be >= 1")
    if attack_eps < 0:
        raise ContractViolationError("attack_eps must be >= 0")

    seed_probe = rng.integers(0, 2**24)  # recorded with the model for provenance
    net = mlp_init(ARCH_SIZES[arch], ARCH_ACTIVATION[arch], rng)
    clf = VictimClassifier(arch=arch, net=net, train_seed=int(seed_probe))
    params = net.parameters()
    opt = adam_init(params, lr=config.lr)
    flat = train.images.reshape(train.n, INPUT_DIM)

    for step in range(config.steps):
        idx = rng.integers(0, train.n, size=config.batch)
        xb = flat[idx]
        yb = train.labels[idx]
        if attack_eps > 0:
            xb = _sign_attack(clf, xb, yb, attack_eps)
        mask = np.zeros((config.batch, N_CLASSES))
        mask[np.arange(config.batch), yb] = 1.0
        clear_grads(params)
        with Tape() as tape:
            lp = log_softmax(forward_eval(net, Tensor(xb)))
            loss = mul(tsum(mul(lp, Tensor(mask))), -1.0 / config.batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"classifier loss diverged at step {step}")
        backward_grad(tape, loss)
        adam_step(opt, params, [p.grad for p in params])

    report = AccuracyReport(
        train_accuracy=accuracy(clf, train),
        test_accuracy=accuracy(clf, test),
    )
    if attack_eps > 0:
        perturbed = _sign_attack(clf, test.images, test.labels, attack_eps)
        report.perturbed_accuracy = float((classify(clf, perturbed) == test.labels).mean())
    return clf, report


def train_classifier(
    train: Dataset,
    test: Dataset,
    arch: str,
    config: VictimTrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[VictimClassifier, AccuracyReport]:
    """Cross-entropy training on clean images."""
    if rng is None:
        raise ContractViolationError("train_classifier needs an rng")
    return _train_loop(train, test, arch, config or VictimTrainConfig(), rng, attack_eps=0.0)


def adv_train_classifier(
    train: Dataset,
    test: Dataset,
    arch: str,
    attack_eps: float = 0.06,
    config: VictimTrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[VictimClassifier, AccuracyReport]:
    """Training on single-step sign-gradient perturbed batches.

    With attack_eps = 0 this is exactly ``train_classifier``: the perturbation
    branch is skipped, so the RNG stream and every update coincide.
    """
    if rng is None:
        raise ContractViolationError("adv_train_classifier needs an rng")
    return _train_loop(train, test, arch, config or VictimTrainConfig(), rng, attack_eps=attack_eps)


# ---------------------------------------------------------------------------
# persistence


def save_victim(path, clf: VictimClassifier) -> None:
    tensors: dict[str, np.ndarray] = {
        "arch": np.float64(_ARCH_CODE[clf.arch]),
        "train_seed": np.float64(clf.train_seed),
    }
    for i, layer in enumerate(clf.net.layers):
        tensors[f"w{i}"] = layer.w.data
        tensors[f"b{i}"] = layer.b.data
    checkpoint.save_tensors(path, tensors)


def load_victim(path) -> VictimClassifier:
    t = checkpoint.load_tensors(path)
    if "arch" not in t:
        raise ContractViolationError("victim checkpoint missing architecture tag")
    code = float(t["arch"])
    by_code = {v: k for k, v in _ARCH_CODE.items()}
    if code not in by_code:
        raise ContractViolationError(f"unknown architecture code {code}")
    arch = by_code[code]
    sizes = ARCH_SIZES[arch]
    act = ARCH_ACTIVATION[arch]
    layers = []
    for i in range(len(sizes) - 1):
        if f"w{i}" not in t or f"b{i}" not in t:
            raise ContractViolationError(f"victim checkpoint missing layer {i}")
        w, b = t[f"w{i}"], t[f"b{i}"]
        if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
            raise ContractViolationError(f"layer {i} shape {w.shape} inconsistent with architecture {arch!r}")
        is_last = i == len(sizes) - 2
        layers.append(Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), "none" if is_last else act))
    return VictimClassifier(arch=arch, net=MLP(layers), train_seed=int(t.get("train_seed", 0.0)))
