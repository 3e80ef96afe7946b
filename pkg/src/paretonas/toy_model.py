"""Small dense classifier with hand-written gradients, realized from a
genotype, plus the gradient-based attacks evaluated against it.

The realization maps each genotype layer to a dense layer: capsule layers
squash their units in groups of the genotype's capsule dimension, other
hidden layers use ReLU, and the closing layer maps to class logits under
softmax. Skip connections become additive shortcuts with identity
projection (zero-pad or truncate). Everything runs in float64 numpy so the
analytic gradients can be held to a tight finite-difference tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import evaluator as ev
from .genotype import Genotype

# Hidden widths are capped so desk-scale training stays instant even for
# 64-channel x 64-capsule genotype layers.
MAX_WIDTH = 256

DEFAULT_PGD_ITERS = 10
_SEED_STRIDE = 1_000_003  # offsets separating init/train/attack rng streams


class ShapeMismatchError(ValueError):
    """Input dimensionality does not match the model."""


class NumericalDivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class ToyLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str  # relu | squash | softmax
    capsule_dim: int = 1

    def copy(self) -> ToyLayer:
        return ToyLayer(self.weights.copy(), self.bias.copy(),
                        self.activation, self.capsule_dim)


@dataclass
class ToyModel:
    layers: list[ToyLayer]
    skip_connections: tuple[tuple[int, int], ...]
    input_dim: int
    num_classes: int

    def copy(self) -> ToyModel:
        return ToyModel([l.copy() for l in self.layers], self.skip_connections,
                        self.input_dim, self.num_classes)


def realize(g: Genotype, input_dim: int, seed: int) -> ToyModel:
    """Build a dense stand-in for the genotype's architecture.

    Hidden width is out_channels x out_capsules capped at MAX_WIDTH (capsule
    layers keep their group structure intact under the cap); the final
    genotype layer becomes the softmax head over its class count.
    """
    rng = np.random.default_rng(seed)
    layers: list[ToyLayer] = []
    in_dim = input_dim
    num_classes = g.layers[-1].out_channels
    for i, d in enumerate(g.layers):
        if i == len(g.layers) - 1:
            width, activation, caps = num_classes, "softmax", 1
        elif d.layer_type.is_capsule:
            caps = d.out_capsules
            n_groups = min(d.out_channels, max(1, MAX_WIDTH // caps))
            width, activation = n_groups * caps, "squash"
        else:
            width, activation, caps = min(d.out_channels, MAX_WIDTH), "relu", 1
        scale = math.sqrt(2.0 / in_dim)
        layers.append(ToyLayer(
            weights=rng.normal(0.0, scale, size=(in_dim, width)),
            bias=np.zeros(width),
            activation=activation,
            capsule_dim=caps,
        ))
        in_dim = width
    return ToyModel(layers=layers, skip_connections=g.skip_connections,
                    input_dim=input_dim, num_classes=num_classes)


# -- activations ------------------------------------------------------------


def squash(x: np.ndarray) -> np.ndarray:
    """Scale a vector (or batch of row vectors) to norm |x|^2/(1+|x|)^2.

    Written as x * |x|/(1+|x|)^2, which needs no division by |x| and is
    exactly zero at the origin.
    """
    arr = np.asarray(x, dtype=float)
    r = np.linalg.norm(arr, axis=-1, keepdims=True)
    return arr * (r / (1.0 + r) ** 2)


def _squash_grouped(z: np.ndarray, caps: int) -> tuple[np.ndarray, np.ndarray]:
    n, width = z.shape
    grouped = z.reshape(n, width // caps, caps)
    r = np.linalg.norm(grouped, axis=2, keepdims=True)
    out = grouped * (r / (1.0 + r) ** 2)
    return out.reshape(n, width), r


def _squash_backward(upstream: np.ndarray, z: np.ndarray, r: np.ndarray,
                     caps: int) -> np.ndarray:
    # y = g(r) z with g(r) = r/(1+r)^2, so J = g I + (g'(r)/r) z z^T where
    # g'(r) = (1-r)/(1+r)^3. The Jacobian vanishes at the origin.
    n, width = z.shape
    zg = z.reshape(n, width // caps, caps)
    ug = upstream.reshape(n, width // caps, caps)
    g = r / (1.0 + r) ** 2
    gp = (1.0 - r) / (1.0 + r) ** 3
    dot = np.sum(zg * ug, axis=2, keepdims=True)
    safe_r = np.where(r > 1e-12, r, 1.0)
    radial = np.where(r > 1e-12, gp * dot / safe_r, 0.0)
    return (g * ug + radial * zg).reshape(n, width)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _project(v: np.ndarray, width: int) -> np.ndarray:
    """Identity projection: truncate or zero-pad rows to the target width."""
    if v.shape[1] == width:
        return v
    if v.shape[1] > width:
        return v[:, :width]
    out = np.zeros((v.shape[0], width))
    out[:, :v.shape[1]] = v
    return out


def _project_back(u: np.ndarray, width: int) -> np.ndarray:
    """Adjoint of :func:`_project` for the given source width."""
    return _project(u, width)


# -- forward / backward -----------------------------------------------------


def _check_input(m: ToyModel, x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != m.input_dim:
        raise ShapeMismatchError(
            f"expected inputs of width {m.input_dim}, got shape {arr.shape}")
    return arr


def _forward_trace(m: ToyModel, x: np.ndarray):
    """Forward pass keeping the tensors the backward pass needs."""
    incoming: dict[int, list[int]] = {}
    for s, d in m.skip_connections:
        incoming.setdefault(d, []).append(s)

    outputs: list[np.ndarray] = []
    layer_inputs: list[np.ndarray] = []
    pre_acts: list[np.ndarray] = []
    norms: list[np.ndarray | None] = []
    h = x
    for l, layer in enumerate(m.layers):
        inp = h
        for s in incoming.get(l, ()):
            inp = inp + _project(outputs[s], inp.shape[1])
        z = inp @ layer.weights + layer.bias
        if layer.activation == "relu":
            out, r = np.maximum(z, 0.0), None
        elif layer.activation == "squash":
            out, r = _squash_grouped(z, layer.capsule_dim)
        else:
            out, r = _softmax(z), None
        layer_inputs.append(inp)
        pre_acts.append(z)
        norms.append(r)
        outputs.append(out)
        h = out
    return outputs, layer_inputs, pre_acts, norms


def forward(m: ToyModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per example."""
    arr = _check_input(m, x)
    outputs, _, _, _ = _forward_trace(m, arr)
    return outputs[-1]


def loss_and_grads(m: ToyModel, x: np.ndarray, t: np.ndarray):
    """Mean cross-entropy plus gradients for every parameter and the input."""
    arr = _check_input(m, x)
    labels = np.asarray(t, dtype=int).reshape(-1)
    if labels.shape[0] != arr.shape[0]:
        raise ShapeMismatchError("one label per input row required")

    outputs, layer_inputs, pre_acts, norms = _forward_trace(m, arr)
    n = arr.shape[0]
    probs = outputs[-1]
    picked = probs[np.arange(n), labels]
    with np.errstate(divide="ignore"):
        loss = float(-np.mean(np.log(picked)))

    last = len(m.layers) - 1
    out_grads: list[np.ndarray | None] = [None] * len(m.layers)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0

    param_grads: list[tuple[np.ndarray, np.ndarray]] = []
    dx = np.zeros_like(arr)
    for l in range(last, -1, -1):
        layer = m.layers[l]
        if l == last:
            dz = (probs - onehot) / n  # softmax and mean CE combined
        else:
            du = out_grads[l]
            if du is None:
                du = np.zeros_like(outputs[l])
            if layer.activation == "relu":
                dz = du * (pre_acts[l] > 0)
            else:
                dz = _squash_backward(du, pre_acts[l], norms[l],
                                      layer.capsule_dim)
        param_grads.append((layer_inputs[l].T @ dz, dz.sum(axis=0)))
        d_inp = dz @ layer.weights.T
        if l == 0:
            dx += d_inp
        else:
            prev = out_grads[l - 1]
            out_grads[l - 1] = d_inp if prev is None else prev + d_inp
        for s, d in m.skip_connections:
            if d == l:
                back = _project_back(d_inp, outputs[s].shape[1])
                prev = out_grads[s]
                out_grads[s] = back if prev is None else prev + back
    param_grads.reverse()
    return loss, param_grads, dx


def predict(m: ToyModel, x: np.ndarray) -> np.ndarray:
    return forward(m, x).argmax(axis=1)


def accuracy(m: ToyModel, x: np.ndarray, t: np.ndarray) -> float:
    return float(np.mean(predict(m, x) == np.asarray(t)))


# -- data and training ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def make_blobs_dataset(classes: int = 10, dim: int = 16, train_size: int = 2000,
                       test_size: int = 500, seed: int = 0) -> SyntheticDataset:
    """Balanced Gaussian blobs clamped into the unit box so perturbation
    budgets speak the same units as image pixels."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.25, 0.75, size=(classes, dim))
    total = train_size + test_size
    labels = rng.permutation(np.arange(total) % classes)
    points = np.clip(means[labels] + rng.normal(0.0, 0.08, size=(total, dim)),
                     0.0, 1.0)
    return SyntheticDataset(
        x_train=points[:train_size], y_train=labels[:train_size],
        x_test=points[train_size:], y_test=labels[train_size:],
        num_classes=classes)


def train(m: ToyModel, data: SyntheticDataset, epochs: int, lr: float,
          seed: int, batch_size: int = 32) -> tuple[ToyModel, list[float]]:
    """Plain minibatch SGD; returns a trained copy and per-epoch mean loss."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    model = m.copy()
    rng = np.random.default_rng(seed)
    n = data.x_train.shape[0]
    history: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads, _ = loss_and_grads(model, data.x_train[idx],
                                            data.y_train[idx])
            if not math.isfinite(loss):
                raise NumericalDivergenceError(f"loss became {loss}")
            for layer, (dw, db) in zip(model.layers, grads):
                layer.weights -= lr * dw
                layer.bias -= lr * db
            batch_losses.append(loss)
        history.append(float(np.mean(batch_losses)))
    return model, history


# -- attacks ----------------------------------------------------------------


def pgd_attack(m: ToyModel, x: np.ndarray, t: np.ndarray, epsilon: float,
               alpha: float | None = None, iters: int = DEFAULT_PGD_ITERS,
               seed: int = 0, random_start: bool = False,
               trace: bool = False):
    """Iterated sign-gradient ascent on the loss, projected after every step
    into the L-inf ball around the originals intersected with the unit box.

    alpha defaults to epsilon/4. With trace=True also returns the loss at
    each iterate (length iters + 1).
    """
    arr = _check_input(m, x)
    labels = np.asarray(t, dtype=int).reshape(-1)
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    step = epsilon / 4.0 if alpha is None else alpha

    adv = arr.copy()
    if random_start and epsilon > 0:
        rng = np.random.default_rng(seed)
        adv = np.clip(arr + rng.uniform(-epsilon, epsilon, size=arr.shape),
                      0.0, 1.0)
        adv = np.clip(adv, arr - epsilon, arr + epsilon)

    losses: list[float] = []
    for _ in range(iters):
        loss, _, gx = loss_and_grads(m, adv, labels)
        losses.append(loss)
        if epsilon == 0:
            continue
        adv = adv + step * np.sign(gx)
        adv = np.clip(adv, arr - epsilon, arr + epsilon)
        adv = np.clip(adv, 0.0, 1.0)
    final_loss, _, _ = loss_and_grads(m, adv, labels)
    losses.append(final_loss)
    if trace:
        return adv, losses
    return adv


def fgsm(m: ToyModel, x: np.ndarray, t: np.ndarray, epsilon: float,
         seed: int = 0) -> np.ndarray:
    """Single-step variant: one iteration with the full budget as the step."""
    return pgd_attack(m, x, t, epsilon, alpha=epsilon, iters=1, seed=seed)


# -- evaluator backend ------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    classes: int = 10
    dim: int = 16
    train_size: int = 2000
    test_size: int = 500
    lr: float = 0.05
    batch_size: int = 32
    dataset_seed: int = 0
    pgd_iters: int = DEFAULT_PGD_ITERS


class ToyEvaluator(ev.Evaluator):
    """Evaluation contract backed by real training and real attacks on the
    synthetic dataset. One dataset instance is shared by all requests so
    every candidate answers the same problem."""

    def __init__(self, config: ToyConfig | None = None) -> None:
        self.config = config or ToyConfig()
        cfg = self.config
        self.dataset = make_blobs_dataset(
            classes=cfg.classes, dim=cfg.dim, train_size=cfg.train_size,
            test_size=cfg.test_size, seed=cfg.dataset_seed)

    def evaluate(self, req: ev.EvaluationRequest) -> ev.EvaluationResult:
        cfg = self.config
        g = req.genotype
        if g.layers[-1].out_channels != cfg.classes:
            raise ShapeMismatchError(
                f"genotype ends in {g.layers[-1].out_channels} classes, "
                f"dataset has {cfg.classes}")
        model = realize(g, input_dim=cfg.dim, seed=req.seed)
        trained, _ = train(model, self.dataset, epochs=req.train_epochs,
                           lr=cfg.lr, seed=req.seed + _SEED_STRIDE,
                           batch_size=cfg.batch_size)
        data = self.dataset
        clean = accuracy(trained, data.x_test, data.y_test)
        advs = []
        for i, eps in enumerate(req.epsilons):
            if eps == 0.0:
                advs.append(clean)
                continue
            x_adv = pgd_attack(trained, data.x_test, data.y_test, eps,
                               iters=cfg.pgd_iters,
                               seed=req.seed + 2 * _SEED_STRIDE + i)
            advs.append(accuracy(trained, x_adv, data.y_test))
        return ev.EvaluationResult(id=req.id, clean_accuracy=clean,
                                   adversarial_accuracies=tuple(advs),
                                   status=ev.EvalStatus.OK)
