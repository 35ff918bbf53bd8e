"""Dense numerics with hand-written backward passes.

Everything here works on 2-D float64 numpy arrays. Layers cache what they
need during ``forward`` and push exact gradients into their ``Parameter``
objects during ``backward``. There is deliberately no tape: the networks in
this package are small and fixed, and explicit backward functions keep the
finite-difference oracle honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-8
# Added under the square root of pairwise distances so d(x, x) is differentiable.
DIST_EPS = 1e-12


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DegenerateVectorError(ValueError):
    pass


class LabelError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class EmptyGradientError(RuntimeError):
    pass


class ScheduleRangeError(ValueError):
    pass


class Parameter:
    """A named learnable matrix with an accumulated gradient.

    ``decay`` marks weights that receive decoupled weight decay; biases and
    prompt tokens are created with ``decay=False``. A frozen parameter
    (``requires_grad=False``) silently drops incoming gradients.
    """

    def __init__(self, name: str, value: np.ndarray, *, decay: bool = True,
                 requires_grad: bool = True):
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise NumericError(f"parameter {name!r} has non-finite entries")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay
        self.requires_grad = requires_grad
        self.touched = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient for {self.name!r} has shape {g.shape}, expected {self.value.shape}")
        self.grad += g
        self.touched = True

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self.touched = False

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _check_2d(x: np.ndarray, what: str) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {x.shape}")


def linear(x: np.ndarray, W: Parameter, bias: Parameter | None = None) -> np.ndarray:
    """Compute ``x @ W + bias`` with the bias broadcast over rows."""
    _check_2d(x, "linear input")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not conform to weight shape {W.shape}")
    out = x @ W.value
    if bias is not None:
        if bias.shape != (1, W.shape[1]):
            raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {W.shape}")
        out = out + bias.value
    return out


def linear_backward(dout: np.ndarray, x: np.ndarray, W: Parameter,
                    bias: Parameter | None = None) -> np.ndarray:
    """Accumulate gradients into ``W``/``bias`` and return d(loss)/dx."""
    W.accumulate(x.T @ dout)
    if bias is not None:
        bias.accumulate(dout.sum(axis=0, keepdims=True))
    return dout @ W.value.T


class Linear:
    """Affine layer that remembers its last input for ``backward``."""

    def __init__(self, W: Parameter, bias: Parameter | None = None):
        self.W = W
        self.bias = bias
        self._x: np.ndarray | None = None

    @property
    def parameters(self) -> list[Parameter]:
        return [self.W] if self.bias is None else [self.W, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return linear(x, self.W, self.bias)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        assert self._x is not None, "backward before forward"
        return linear_backward(dout, self._x, self.W, self.bias)


class TanhMLP:
    """Two affine layers with a tanh between them."""

    def __init__(self, name: str, n_in: int, n_hidden: int, n_out: int,
                 rng: np.random.Generator, *, requires_grad: bool = True):
        self.l1 = Linear(
            Parameter(f"{name}.W1", rng.normal(0, 1 / math.sqrt(n_in), (n_in, n_hidden)),
                      requires_grad=requires_grad),
            Parameter(f"{name}.b1", np.zeros((1, n_hidden)), decay=False,
                      requires_grad=requires_grad))
        self.l2 = Linear(
            Parameter(f"{name}.W2", rng.normal(0, 1 / math.sqrt(n_hidden), (n_hidden, n_out)),
                      requires_grad=requires_grad),
            Parameter(f"{name}.b2", np.zeros((1, n_out)), decay=False,
                      requires_grad=requires_grad))
        self._h: np.ndarray | None = None

    @property
    def parameters(self) -> list[Parameter]:
        return self.l1.parameters + self.l2.parameters

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._h = np.tanh(self.l1.forward(x))
        return self.l2.forward(self._h)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dh = self.l2.backward(dout)
        return self.l1.backward(dh * (1.0 - self._h ** 2))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting the row max."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("log_softmax received non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVectorError(f"cosine_similarity: norm below {NORM_EPS} ({na:.3g}, {nb:.3g})")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalise rows; returns (unit rows, row norms as a column)."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmax(norms.ravel() <= NORM_EPS))
        raise DegenerateVectorError(f"row {bad} has norm below {NORM_EPS}")
    return x / norms, norms


def l2_normalize_backward(dunit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (dunit - unit * (dunit * unit).sum(axis=1, keepdims=True)) / norms


def cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    _check_2d(logits, "cross_entropy logits")
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {b} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelError(f"cross_entropy: labels must lie in [0, {k}), got {labels.min()}..{labels.max()}")
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1) + DIST_EPS)


def batch_hard_triplet(features: np.ndarray, identities: Sequence[int],
                       margin: float = 0.3) -> tuple[float, np.ndarray]:
    """Batch-hard triplet loss on unit-normalised rows.

    For every anchor that has at least one positive, takes the farthest
    positive and the nearest negative and applies a hinge with ``margin``.
    Returns the mean over those anchors and the gradient w.r.t. ``features``.
    """
    _check_2d(features, "triplet features")
    ids = np.asarray(identities)
    if len(ids) != features.shape[0]:
        raise DimensionError(f"triplet: {len(ids)} identities for {features.shape[0]} rows")
    if len(np.unique(ids)) < 2:
        raise ProtocolError("batch_hard_triplet needs at least two identities in the batch")
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    diff_id = ids[:, None] != ids[None, :]
    anchors = np.flatnonzero(same.any(axis=1))
    if len(anchors) == 0:
        raise ProtocolError("batch_hard_triplet needs an identity with at least two samples")

    unit, norms = l2_normalize(features)
    dist = pairwise_distances(unit)
    pos_d = np.where(same, dist, -np.inf)
    neg_d = np.where(diff_id, dist, np.inf)
    hp = pos_d.argmax(axis=1)
    hn = neg_d.argmin(axis=1)

    n = len(features)
    rows = np.arange(n)
    hinge = dist[rows, hp] - dist[rows, hn] + margin
    active = np.zeros(n, dtype=bool)
    active[anchors] = hinge[anchors] > 0
    loss = float(np.maximum(hinge[anchors], 0.0).mean())

    dunit = np.zeros_like(unit)
    scale = 1.0 / len(anchors)
    for a in np.flatnonzero(active):
        for j, sign in ((hp[a], 1.0), (hn[a], -1.0)):
            g = sign * scale * (unit[a] - unit[j]) / dist[a, j]
            dunit[a] += g
            dunit[j] -= g
    return loss, l2_normalize_backward(dunit, unit, norms)


def finite_diff_check(closure: Callable[[], float], parameters: Iterable[Parameter],
                      h: float = 1e-4, rng: np.random.Generator | None = None,
                      fraction: float = 0.05, min_coords: int = 10) -> float:
    """Compare analytic gradients against central differences.

    ``closure`` must run a forward and backward pass and return the loss; it
    is called with all gradients zeroed. A random ``fraction`` of coordinates
    (at least ``min_coords``, at most all) is probed per parameter. Returns
    ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    params = list(parameters)
    rng = rng if rng is not None else np.random.default_rng(0)

    def run() -> float:
        for p in params:
            p.zero_grad()
        return float(closure())

    first = run()
    analytic = {id(p): p.grad.copy() for p in params}
    if run() != first:
        raise DeterminismError("loss closure returned different values on identical inputs")

    worst = 0.0
    for p in params:
        size = p.value.size
        n = min(size, max(min_coords, int(math.ceil(fraction * size))))
        coords = rng.choice(size, size=n, replace=False)
        flat = p.value.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            up = run()
            flat[idx] = orig - h
            down = run()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[id(p)].reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    for p in params:
        p.zero_grad()
    return worst


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 weight_decay: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("Adam: duplicate parameter names")
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)
        for p in self.params:
            self.state.m[p.name] = np.zeros_like(p.value)
            self.state.v[p.name] = np.zeros_like(p.value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        if not any(p.touched for p in self.params):
            raise EmptyGradientError("Adam.step called before any backward pass populated gradients")
        st = self.state
        lr = st.lr if lr is None else lr
        st.step += 1
        b1, b2 = st.betas
        c1 = 1 - b1 ** st.step
        c2 = 1 - b2 ** st.step
        for p in self.params:
            m, v = st.m[p.name], st.v[p.name]
            if m.shape != p.value.shape:
                raise DimensionError(f"moment shape {m.shape} != parameter {p.name!r} shape {p.value.shape}")
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            if p.decay and st.weight_decay:
                p.value -= lr * st.weight_decay * p.value
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.zero_grad()


@dataclass(frozen=True)
class Schedule:
    kind: str
    total_epochs: int
    base_lr: float
    warmup_epochs: int = 0
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cosine", "warmup", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_epochs < 1:
            raise ValueError("schedule needs at least one epoch")
        if self.kind == "warmup" and not 0 < self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup epochs must satisfy 0 < warmup < total")
        if not 0 <= self.floor <= self.base_lr:
            raise ValueError("floor must satisfy 0 <= floor <= base_lr")

    def _cosine(self, pos: float, span: int) -> float:
        if span <= 0:
            return self.base_lr
        return self.floor + (self.base_lr - self.floor) * 0.5 * (1 + math.cos(math.pi * pos / span))

    def rate(self, epoch: int) -> float:
        if not 0 <= epoch < self.total_epochs:
            raise ScheduleRangeError(f"epoch {epoch} outside [0, {self.total_epochs})")
        if self.kind == "constant":
            return self.base_lr
        if self.kind == "cosine":
            return self._cosine(epoch, self.total_epochs - 1)
        w = self.warmup_epochs
        if epoch < w:
            return self.base_lr * (epoch + 1) / (w + 1)
        return self._cosine(epoch - w, self.total_epochs - 1 - w)


def schedule_rate(schedule: Schedule, epoch: int) -> float:
    return schedule.rate(epoch)
