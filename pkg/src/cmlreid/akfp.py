"""Adaptive knowledge fusion and projection.

Two slow-moving text prototypes, one per clothing state, act as alignment
targets. A linear state classifier weights two projection heads, and the
projected visual feature is pulled toward the prototype of its ground-truth
state by a cosine loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .casp import DivergenceError, batches_per_epoch
from .encoders import FEATURE_DIM
from .numerics import (NORM_EPS, Adam, DegenerateVectorError, Parameter, Schedule,
                       batch_hard_triplet, cross_entropy, linear, linear_backward, softmax,
                       softmax_backward)
from .rng import stream
from .world import STATES, sample_pk_indices

SC_IDX, CC_IDX = 0, 1


class ContractError(ValueError):
    pass


class StatePrototypes:
    """Per-state text prototypes updated by exponential moving average.

    With ``shared=True`` both states read and write one prototype (the
    single-prototype ablation). A prototype is unset until ``seed`` gives it
    a starting value.
    """

    def __init__(self, dim: int = FEATURE_DIM, beta: float | tuple[float, float] = 0.001,
                 shared: bool = False):
        betas = (beta, beta) if np.isscalar(beta) else tuple(beta)
        self.betas = np.array(betas, dtype=np.float64)
        self.shared = shared
        self.values = np.zeros((2, dim))
        self.ready = np.zeros(2, dtype=bool)

    def slot(self, state: int) -> int:
        return 0 if self.shared else state

    def target(self, state: int) -> np.ndarray:
        return self.values[self.slot(state)]

    def targets(self, states: np.ndarray) -> np.ndarray:
        return self.values[[self.slot(int(s)) for s in states]]

    def seed(self, state: int, value: np.ndarray) -> None:
        k = self.slot(state)
        if not self.ready[k]:
            self.values[k] = value
            self.ready[k] = True

    def copy(self) -> "StatePrototypes":
        out = StatePrototypes(self.values.shape[1], tuple(self.betas), self.shared)
        out.values = self.values.copy()
        out.ready = self.ready.copy()
        return out


def update_prototypes(protos: StatePrototypes, e_t: np.ndarray, states: np.ndarray) -> StatePrototypes:
    """One momentum step per state present in the batch, in place.

    ``T_s <- (1 - beta_s) T_s + beta_s * mean(e_T of state s)``. States absent
    from the batch keep their prototype. In shared mode the two states are
    pooled into a single mean.
    """
    states = np.asarray(states)
    groups = [np.ones(len(states), dtype=bool)] if protos.shared else [states == s for s in (SC_IDX, CC_IDX)]
    for k, mask in enumerate(groups):
        if not mask.any():
            continue
        if not protos.ready[k]:
            raise ContractError(f"prototype {STATES[k] if not protos.shared else 'shared'} used before seeding")
        beta = protos.betas[k]
        protos.values[k] = (1.0 - beta) * protos.values[k] + beta * e_t[mask].mean(axis=0)
    return protos


class StateClassifier:
    def __init__(self, rng: np.random.Generator, dim: int = FEATURE_DIM):
        self.W = Parameter("akfp.state.W", rng.normal(0, 0.01, (dim, 2)))
        self.b = Parameter("akfp.state.b", np.zeros((1, 2)), decay=False)
        self._x = None
        self._p = None

    @property
    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def logits(self, f_v: np.ndarray) -> np.ndarray:
        self._x = f_v
        return linear(f_v, self.W, self.b)

    def forward(self, f_v: np.ndarray) -> np.ndarray:
        self._p = softmax(self.logits(f_v))
        return self._p

    def backward_logits(self, dlogits: np.ndarray) -> np.ndarray:
        return linear_backward(dlogits, self._x, self.W, self.b)

    def backward(self, dp: np.ndarray) -> np.ndarray:
        return self.backward_logits(softmax_backward(self._p, dp))


def classify_state(classifier: StateClassifier, f_v: np.ndarray) -> np.ndarray:
    return classifier.forward(np.atleast_2d(f_v))


class ProjectionBundle:
    """Two DxD heads initialised near identity; ``single`` keeps only one."""

    def __init__(self, rng: np.random.Generator, dim: int = FEATURE_DIM, single: bool = False,
                 init_noise: float = 0.01):
        self.single = single
        eye = np.eye(dim)
        self.sc = Parameter("akfp.proj.SC", eye + rng.normal(0, init_noise, (dim, dim)))
        cc_init = eye + rng.normal(0, init_noise, (dim, dim))
        self.cc = None if single else Parameter("akfp.proj.CC", cc_init)

    @property
    def parameters(self) -> list[Parameter]:
        return [self.sc] if self.single else [self.sc, self.cc]


class Projector:
    """Stateful wrapper around ``project`` that remembers inputs for backward."""

    def __init__(self, bundle: ProjectionBundle):
        self.bundle = bundle
        self._cache = None

    def forward(self, f_v: np.ndarray, s_hat: np.ndarray) -> np.ndarray:
        out, heads = _project(f_v, s_hat, self.bundle)
        self._cache = (f_v, s_hat, heads)
        return out

    def backward(self, dproj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (d f_v, d s_hat)."""
        f_v, s_hat, heads = self._cache
        b = self.bundle
        if b.single:
            return linear_backward(dproj, f_v, b.sc), np.zeros_like(s_hat)
        ds = np.stack([(dproj * h).sum(axis=1) for h in heads], axis=1)
        df = linear_backward(s_hat[:, :1] * dproj, f_v, b.sc)
        df += linear_backward(s_hat[:, 1:] * dproj, f_v, b.cc)
        return df, ds


def _project(f_v, s_hat, bundle):
    s_hat = np.atleast_2d(s_hat)
    if np.any(np.abs(s_hat.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("state weights must sum to 1 within 1e-6")
    if bundle.single:
        h = f_v @ bundle.sc.value
        return h, (h,)
    h_sc = f_v @ bundle.sc.value
    h_cc = f_v @ bundle.cc.value
    # Equal to s_SC * h_SC + s_CC * h_CC since the weights sum to one, and
    # exact for pure-SC weights or identical heads.
    return h_sc + s_hat[:, 1:] * (h_cc - h_sc), (h_sc, h_cc)


def project(f_v: np.ndarray, s_hat: np.ndarray, bundle: ProjectionBundle) -> np.ndarray:
    """Mix the two head outputs with the predicted state weights."""
    return _project(np.atleast_2d(f_v), s_hat, bundle)[0]


def projection_loss(f_proj: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cosine distance between rows of ``f_proj`` and their prototypes.

    Prototypes are constants; the gradient is w.r.t. ``f_proj`` only.
    """
    fn = np.linalg.norm(f_proj, axis=1)
    tn = np.linalg.norm(targets, axis=1)
    for name, norms in (("projected feature", fn), ("prototype", tn)):
        bad = np.flatnonzero(norms <= NORM_EPS)
        if len(bad):
            raise DegenerateVectorError(f"{name} of sample {bad[0]} has norm below {NORM_EPS}")
    f_unit = f_proj / fn[:, None]
    t_unit = targets / tn[:, None]
    # dot / sqrt(|f|^2 |t|^2) keeps aligned, orthogonal and opposite pairs exact
    dots = (f_proj * targets).sum(axis=1)
    cos = np.clip(dots / np.sqrt((f_proj ** 2).sum(axis=1) * (targets ** 2).sum(axis=1)), -1.0, 1.0)
    b = len(f_proj)
    grad = -(t_unit - cos[:, None] * f_unit) / fn[:, None] / b
    return float((1.0 - cos).mean()), grad


@dataclass
class AkfpLossReport:
    identity: float
    triplet: float
    projection: float
    state: float
    lam: float
    state_weight: float
    state_accuracy: float = float("nan")

    @property
    def total(self) -> float:
        return self.identity + self.triplet + self.lam * self.projection

    @property
    def objective(self) -> float:
        return self.total + self.state_weight * self.state


class IdentityHead:
    """Linear classifier over every identity seen so far; grows per task."""

    def __init__(self, dim: int = FEATURE_DIM):
        self.W = Parameter("id_head.W", np.zeros((dim, 0)))
        self.b = Parameter("id_head.b", np.zeros((1, 0)), decay=False)
        self.columns: dict[int, int] = {}
        self._x = None

    @property
    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def expand(self, identities, rng: np.random.Generator, init_std: float = 0.01) -> None:
        new = [int(i) for i in identities if int(i) not in self.columns]
        if not new:
            return
        for pid in new:
            self.columns[pid] = len(self.columns)
        dim = self.W.shape[0]
        self.W = Parameter("id_head.W", np.hstack([self.W.value, rng.normal(0, init_std, (dim, len(new)))]))
        self.b = Parameter("id_head.b", np.hstack([self.b.value, np.zeros((1, len(new)))]), decay=False)

    def labels(self, identities) -> np.ndarray:
        return np.array([self.columns[int(i)] for i in identities], dtype=np.int64)

    def forward(self, f_v: np.ndarray) -> np.ndarray:
        self._x = f_v
        return linear(f_v, self.W, self.b)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        return linear_backward(dlogits, self._x, self.W, self.b)


def reid_losses(head: IdentityHead, f_v: np.ndarray, identities: np.ndarray,
                margin: float) -> tuple[float, float, np.ndarray]:
    """Identity CE and batch-hard triplet on ``f_v``; returns (L_id, L_tri, d f_v)."""
    l_id, dlogits = cross_entropy(head.forward(f_v), head.labels(identities))
    l_tri, dtri = batch_hard_triplet(f_v, identities, margin)
    return l_id, l_tri, head.backward(dlogits) + dtri


def total_loss(f_v: np.ndarray, identities: np.ndarray, states: np.ndarray, *, head: IdentityHead,
               classifier: StateClassifier | None, projector: Projector | None,
               protos: StatePrototypes | None, lam: float = 0.5, margin: float = 0.3,
               state_weight: float = 0.1) -> tuple[AkfpLossReport, np.ndarray]:
    """All AKFP loss terms on one batch and the gradient w.r.t. ``f_v``.

    Parameter gradients are accumulated into the head, classifier and
    projection heads. Passing ``classifier=None`` gives plain ReID training
    (identity + triplet only).
    """
    l_id, l_tri, df = reid_losses(head, f_v, identities, margin)
    if classifier is None:
        return AkfpLossReport(l_id, l_tri, 0.0, 0.0, 0.0, 0.0), df

    logits = classifier.logits(f_v)
    s_hat = softmax(logits)
    classifier._p = s_hat
    l_state, dlogits = cross_entropy(logits, states)
    acc = float((logits.argmax(axis=1) == states).mean())
    dlogits = state_weight * dlogits

    l_proj = 0.0
    if projector is not None and protos is not None:
        f_proj = projector.forward(f_v, s_hat)
        l_proj, dproj = projection_loss(f_proj, protos.targets(states))
        if lam:
            df_proj, ds = projector.backward(lam * dproj)
            df += df_proj
            dlogits = dlogits + softmax_backward(s_hat, ds)
    if state_weight or (projector is not None and lam):
        df += classifier.backward_logits(dlogits)
    report = AkfpLossReport(l_id, l_tri, l_proj, l_state, lam, state_weight, acc)
    return report, df


def seed_prototypes(model, domain) -> None:
    """Give each unset prototype the mean e_T of this domain's state."""
    protos = model.protos
    e_t = model.casp.embed(model.visual.forward(domain.train.latents))
    states = domain.train.state_labels
    if protos.shared:
        protos.seed(0, e_t.mean(axis=0))
        return
    for s in np.unique(states):
        protos.seed(int(s), e_t[states == s].mean(axis=0))


def akfp_train_stage(model, domain, epochs: int, cfg, task_index: int, cycle: int = 0) -> list[dict]:
    """Fine-tune the visual adapter, identity head, state classifier and
    projection heads on one domain with the prompt learner frozen.

    Prototypes are stepped once per batch from the current e_T. Returns one
    log dict per epoch.
    """
    if epochs <= 0:
        return []
    if model.protos is not None:
        seed_prototypes(model, domain)
    params = model.akfp_parameters()
    opt = Adam(params, cfg.akfp_lr, cfg.weight_decay)
    floor = cfg.akfp_lr * cfg.lr_floor
    if epochs >= 2:
        warm = min(max(1, round(epochs * cfg.warmup_fraction)), epochs - 1)
        sched = Schedule("warmup", epochs, cfg.akfp_lr, warmup_epochs=warm, floor=floor)
    else:
        sched = Schedule("cosine", epochs, cfg.akfp_lr, floor=floor)
    n = batches_per_epoch(domain, cfg.P, cfg.K)
    logs = []
    for epoch in range(epochs):
        rng = stream(cfg.seed, "batches", task_index, domain.name, "akfp", cycle, epoch)
        lr = sched.rate(epoch)
        rows = []
        for step in range(n):
            batch = domain.train.take(sample_pk_indices(domain, cfg.P, cfg.K, rng))
            states = batch.state_labels
            f_v = model.visual.forward(batch.latents)
            if model.protos is not None:
                update_prototypes(model.protos, model.casp.embed(f_v), states)
            rep, df = total_loss(f_v, batch.identities, states, head=model.id_head,
                                 classifier=model.classifier, projector=model.projector,
                                 protos=model.protos, lam=model.lam, margin=cfg.margin,
                                 state_weight=model.state_weight)
            if not np.isfinite(rep.objective):
                raise DivergenceError(f"AKFP loss became non-finite at task {task_index}, epoch {epoch}, step {step}")
            model.visual.backward(df)
            opt.step(lr)
            rows.append((rep.identity, rep.triplet, rep.projection, rep.lam * rep.projection,
                         rep.total, rep.state_accuracy))
        m = np.mean(rows, axis=0)
        logs.append({"epoch": epoch, "L_id": m[0], "L_triplet": m[1], "L_proj": m[2], "lam_L_proj": m[3],
                     "L_total": m[4], "state_acc": None if np.isnan(m[5]) else m[5], "lr": lr})
    return logs
