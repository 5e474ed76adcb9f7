"""Dense numeric core: a two-block MLP and the losses used for osmosis training.

The model is split into a feature extractor (a stack of affine+ReLU layers,
the "theta" block) and a linear classifier head (the "phi" block). The split
exists because the training loop updates the two blocks on different
timescales: theta moves once per batch, phi once per domain transition.

All functions here are pure: models are immutable values and updates return
new models, so concurrent use needs no locking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Layer = tuple[np.ndarray, np.ndarray]  # (weights: in x out, bias: out)

# Probabilities are clamped to this floor inside log/KL so saturated logits
# cannot produce -Inf.
PROB_FLOOR = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _freeze_layer(layer: Layer) -> Layer:
    w, b = layer
    return _frozen(w), _frozen(b)


@dataclass(frozen=True)
class LrSchedule:
    """Decaying step size: rate(t) = gamma0 / (1 + epsilon * t)."""

    gamma0: float
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ValueError(f"gamma0 must be > 0, got {self.gamma0}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


def schedule_rate(schedule: LrSchedule, t: int) -> float:
    """Step size at step index t (t >= 0); positive and non-increasing in t."""
    if t < 0:
        raise ValueError(f"step index must be >= 0, got {t}")
    return schedule.gamma0 / (1.0 + schedule.epsilon * t)


@dataclass(frozen=True)
class MlpModel:
    """Immutable MLP parameters: ReLU feature extractor plus linear head.

    ``theta_layers`` may be empty, in which case the model is a bare linear
    classifier (the convex configuration used by the stability diagnostics).
    """

    theta_layers: tuple[Layer, ...]
    phi_layer: Layer

    def __post_init__(self):
        object.__setattr__(
            self, "theta_layers", tuple(_freeze_layer(l) for l in self.theta_layers)
        )
        object.__setattr__(self, "phi_layer", _freeze_layer(self.phi_layer))
        dims = [w.shape for w, _ in self.theta_layers] + [self.phi_layer[0].shape]
        for (w, b) in list(self.theta_layers) + [self.phi_layer]:
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise ShapeError(f"layer weights {w.shape} and bias {b.shape} disagree")
        for a, b in zip(dims, dims[1:]):
            if a[1] != b[0]:
                raise ShapeError(f"layer output dim {a[1]} does not feed layer input dim {b[0]}")

    @property
    def in_dim(self) -> int:
        first = self.theta_layers[0] if self.theta_layers else self.phi_layer
        return first[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.phi_layer[0].shape[1]


def init_mlp(in_dim: int, hidden: Sequence[int], n_classes: int, seed: int) -> MlpModel:
    """Seeded Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden]

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    theta = tuple(
        (glorot(a, b), np.zeros(b)) for a, b in zip(sizes, sizes[1:])
    )
    phi = (glorot(sizes[-1], n_classes), np.zeros(n_classes))
    return MlpModel(theta, phi)


def _forward_cached(model: MlpModel, X: np.ndarray):
    """Returns (logits, hiddens, preacts). hiddens[0] is X itself."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"input must be 2-D, got shape {X.shape}")
    if X.shape[1] != model.in_dim:
        raise ShapeError(
            f"input has {X.shape[1]} columns but the model expects {model.in_dim}"
        )
    hiddens = [X]
    preacts = []
    h = X
    for w, b in model.theta_layers:
        a = h @ w + b
        preacts.append(a)
        h = np.maximum(a, 0.0)
        hiddens.append(h)
    wp, bp = model.phi_layer
    logits = h @ wp + bp
    return logits, hiddens, preacts


def forward(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Unnormalized class scores, one row per input row."""
    logits, _, _ = _forward_cached(model, X)
    if not np.all(np.isfinite(logits)):
        raise NumericError("forward pass produced non-finite logits")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LogitLoss(NamedTuple):
    """A scalar loss and its gradient with respect to the logits."""

    value: float
    dlogits: np.ndarray


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> LogitLoss:
    """Mean cross-entropy -log softmax(z)[label] and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    p = softmax(logits)
    value = float(-np.log(np.maximum(p[np.arange(n), labels], PROB_FLOOR)).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return LogitLoss(value, grad / n)


def margin_loss(logits: np.ndarray) -> LogitLoss:
    """Hinge on the gap between the top logit and the runner-up.

    Per row: max(0, 1 - (z_top - z_second)), averaged over rows. The
    subgradient at the hinge kink (gap exactly 1) is 0; argmax ties break
    toward the lowest class index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    if k < 2:
        raise ValueError(f"margin loss needs at least 2 classes, got {k}")
    top = logits.argmax(axis=1)
    rows = np.arange(n)
    masked = logits.copy()
    masked[rows, top] = -np.inf
    second = masked.argmax(axis=1)
    gap = logits[rows, top] - logits[rows, second]
    active = gap < 1.0
    value = float(np.where(active, 1.0 - gap, 0.0).mean())
    grad = np.zeros_like(logits)
    grad[rows[active], top[active]] = -1.0 / n
    grad[rows[active], second[active]] = 1.0 / n
    return LogitLoss(value, grad)


def kl_to_reference(logits_new: np.ndarray, logits_ref: np.ndarray) -> LogitLoss:
    """Mean KL(softmax(new) || softmax(ref)); no gradient flows to the reference."""
    logits_new = np.asarray(logits_new, dtype=np.float64)
    logits_ref = np.asarray(logits_ref, dtype=np.float64)
    if logits_new.shape != logits_ref.shape:
        raise ShapeError(
            f"logit shapes differ: {logits_new.shape} vs {logits_ref.shape}"
        )
    n, _ = logits_new.shape
    p = softmax(logits_new)
    q = softmax(logits_ref)
    log_ratio = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    per_row = (p * log_ratio).sum(axis=1)
    value = float(per_row.mean())
    # d/dz_j of KL(p(z)||q) = p_j * (log_ratio_j - KL_row)
    grad = p * (log_ratio - per_row[:, None]) / n
    return LogitLoss(value, grad)


@dataclass
class LossBundle:
    """A loss value with parameter-space gradients matching a model's shapes."""

    value: float
    grads_theta: tuple[Layer, ...]
    grads_phi: Layer

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericError(f"loss value is not finite: {self.value}")

    def __add__(self, other: "LossBundle") -> "LossBundle":
        theta = tuple(
            (wa + wb, ba + bb)
            for (wa, ba), (wb, bb) in zip(self.grads_theta, other.grads_theta)
        )
        phi = (self.grads_phi[0] + other.grads_phi[0],
               self.grads_phi[1] + other.grads_phi[1])
        return LossBundle(self.value + other.value, theta, phi)


def zero_bundle(model: MlpModel, value: float = 0.0) -> LossBundle:
    theta = tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in model.theta_layers)
    wp, bp = model.phi_layer
    return LossBundle(value, theta, (np.zeros_like(wp), np.zeros_like(bp)))


def backprop(model: MlpModel, X: np.ndarray, dlogits: np.ndarray,
             value: float = 0.0) -> LossBundle:
    """Parameter gradients of a scalar whose logit gradient is ``dlogits``."""
    logits, hiddens, preacts = _forward_cached(model, X)
    if dlogits.shape != logits.shape:
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match "
                         f"logits shape {logits.shape}")
    wp, _ = model.phi_layer
    gwp = hiddens[-1].T @ dlogits
    gbp = dlogits.sum(axis=0)
    dh = dlogits @ wp.T
    grads_theta = [None] * len(model.theta_layers)
    for i in range(len(model.theta_layers) - 1, -1, -1):
        w, _ = model.theta_layers[i]
        da = dh * (preacts[i] > 0)
        grads_theta[i] = (hiddens[i].T @ da, da.sum(axis=0))
        dh = da @ w.T
    return LossBundle(value, tuple(grads_theta), (gwp, gbp))


def input_gradients(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Per-class input gradients, shape (k, n, d): one backward pass per class."""
    logits, _, preacts = _forward_cached(model, X)
    n, k = logits.shape
    wp, _ = model.phi_layer
    out = np.empty((k, n, model.in_dim))
    for c in range(k):
        dh = np.broadcast_to(wp.T[c], (n, wp.shape[0])).copy()
        for i in range(len(model.theta_layers) - 1, -1, -1):
            w, _ = model.theta_layers[i]
            dh = (dh * (preacts[i] > 0)) @ w.T
        out[c] = dh
    return out


def _jacobian_sqnorm_value(model: MlpModel, X: np.ndarray) -> float:
    grads = input_gradients(model, X)
    n = X.shape[0]
    return float((grads ** 2).sum() / n)


def _hidden_jacobian_gram_mean(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Mean over samples of K K^T, where K is the last-hidden/input Jacobian.

    The Jacobian-squared-norm penalty is exactly quadratic in the head
    weights with this Gram matrix as its kernel, which gives the head
    gradient in closed form.
    """
    _, _, preacts = _forward_cached(model, X)
    n = X.shape[0]
    if not model.theta_layers:
        return np.eye(model.in_dim)
    w0 = model.theta_layers[0][0]
    s0 = w0.T @ w0
    h_last = model.theta_layers[-1][0].shape[1]
    acc = np.zeros((h_last, h_last))
    for i in range(n):
        m = (preacts[0][i] > 0).astype(np.float64)
        g = s0 * np.outer(m, m)
        for l in range(1, len(model.theta_layers)):
            w = model.theta_layers[l][0]
            m = (preacts[l][i] > 0).astype(np.float64)
            g = (w.T @ g @ w) * np.outer(m, m)
        acc += g
    return acc / n


def input_jacobian_sqnorm(model: MlpModel, X: np.ndarray, *,
                          theta_grads: bool = True, fd_step: float = 1e-4) -> LossBundle:
    """Mean squared Frobenius norm of the logit-input Jacobian, with gradients.

    The value is exact (one backward pass per class, so keep k modest). The
    head gradient is exact in closed form: with the ReLU masks fixed the
    penalty is quadratic in the head weights. Feature-extractor gradients,
    when requested, use central finite differences over the theta parameters
    and are only intended for small models; the osmosis loop never needs
    them because the penalty only ever moves the head.
    """
    X = np.asarray(X, dtype=np.float64)
    k = model.n_classes
    if k > 32:
        raise ValueError(f"exact per-class backward passes need k <= 32, got {k}")
    value = _jacobian_sqnorm_value(model, X)
    gram = _hidden_jacobian_gram_mean(model, X)
    wp, bp = model.phi_layer
    grads_phi = (2.0 * gram @ wp, np.zeros_like(bp))
    if theta_grads and model.theta_layers:
        flat = flatten_theta(model)
        g = np.empty_like(flat)
        for j in range(flat.size):
            bumped = flat.copy()
            bumped[j] += fd_step
            up = _jacobian_sqnorm_value(with_theta(model, bumped), X)
            bumped[j] -= 2 * fd_step
            down = _jacobian_sqnorm_value(with_theta(model, bumped), X)
            g[j] = (up - down) / (2 * fd_step)
        grads_theta = _split_theta(model, g)
    else:
        grads_theta = tuple(
            (np.zeros_like(w), np.zeros_like(b)) for w, b in model.theta_layers
        )
    return LossBundle(value, grads_theta, grads_phi)


def sgd_step(model: MlpModel, grads: LossBundle, rate: float,
             which: str = "both") -> MlpModel:
    """One gradient step p <- p - rate * dp on the selected parameter block.

    The unselected block is carried over untouched (the very same arrays),
    so block isolation is exact.
    """
    if which not in ("theta", "phi", "both"):
        raise ValueError(f"which must be theta, phi or both, got {which!r}")
    if rate < 0:
        raise ValueError(f"rate must be >= 0, got {rate}")
    for i, (gw, gb) in enumerate(grads.grads_theta):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in theta layer {i}")
    if not (np.all(np.isfinite(grads.grads_phi[0])) and np.all(np.isfinite(grads.grads_phi[1]))):
        raise NumericError("non-finite gradient in the phi layer")
    theta = model.theta_layers
    phi = model.phi_layer
    if which in ("theta", "both"):
        theta = tuple(
            (w - rate * gw, b - rate * gb)
            for (w, b), (gw, gb) in zip(theta, grads.grads_theta)
        )
    if which in ("phi", "both"):
        gw, gb = grads.grads_phi
        phi = (phi[0] - rate * gw, phi[1] - rate * gb)
    return MlpModel(theta, phi)


def flatten_theta(model: MlpModel) -> np.ndarray:
    if not model.theta_layers:
        return np.empty(0)
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in model.theta_layers])


def flatten_phi(model: MlpModel) -> np.ndarray:
    w, b = model.phi_layer
    return np.concatenate([w.ravel(), b])


def _split_theta(model: MlpModel, flat: np.ndarray) -> tuple[Layer, ...]:
    need = sum(w.size + b.size for w, b in model.theta_layers)
    if flat.size != need:
        raise ShapeError(f"theta vector has {flat.size} entries, expected {need}")
    out = []
    pos = 0
    for w, b in model.theta_layers:
        out.append((flat[pos:pos + w.size].reshape(w.shape).copy(),
                    flat[pos + w.size:pos + w.size + b.size].copy()))
        pos += w.size + b.size
    return tuple(out)


def with_theta(model: MlpModel, flat: np.ndarray) -> MlpModel:
    """Model with the theta block replaced by the given flat vector."""
    return MlpModel(_split_theta(model, flat), model.phi_layer)


def with_phi(model: MlpModel, flat: np.ndarray) -> MlpModel:
    """Model with the phi block replaced by the given flat vector."""
    w, b = model.phi_layer
    if flat.size != w.size + b.size:
        raise ShapeError(f"phi vector has {flat.size} entries, expected {w.size + b.size}")
    return MlpModel(
        model.theta_layers,
        (flat[:w.size].reshape(w.shape).copy(), flat[w.size:].copy()),
    )
