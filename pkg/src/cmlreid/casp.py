"""Context-aware semantic prompts.

A context vector is read off the visual feature by attention-pooling its
pseudo-tokens. That context drives FiLM-style modulation of the pooled base
prompt into a handful of extra tokens; base and modulation tokens together
are encoded by the frozen text stub into ``e_T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import FEATURE_DIM, TOKEN_DIM, TextEncoder
from .numerics import (Adam, Linear, Parameter, ProtocolError, Schedule, TanhMLP,
                       cross_entropy, l2_normalize, l2_normalize_backward, log_softmax,
                       softmax, softmax_backward)
from .rng import stream
from .world import sample_pk_indices

N_CHUNKS = 8
CHUNK_DIM = FEATURE_DIM // N_CHUNKS
CONTEXT_DIM = 16
CONTEXT_HIDDEN = 32
N_BASE = 8
N_MOD = 4
TEMPERATURE = 0.07


class ContextEncoder:
    """Attention pooling over the chunks of ``f_v`` followed by an MLP."""

    def __init__(self, rng: np.random.Generator):
        self.query = Parameter("casp.ctx.query", rng.normal(0, 0.1, (1, CHUNK_DIM)), decay=False)
        self.mlp = TanhMLP("casp.ctx.mlp", CHUNK_DIM, CONTEXT_HIDDEN, CONTEXT_DIM, rng)
        self.attention: np.ndarray | None = None
        self._tokens: np.ndarray | None = None

    @property
    def parameters(self) -> list[Parameter]:
        return [self.query] + self.mlp.parameters

    def forward(self, f_v: np.ndarray) -> np.ndarray:
        tokens = f_v.reshape(len(f_v), N_CHUNKS, CHUNK_DIM)
        self._tokens = tokens
        self.attention = softmax(tokens @ self.query.value[0])
        pooled = (self.attention[:, :, None] * tokens).sum(axis=1)
        return self.mlp.forward(pooled)

    def backward(self, dc: np.ndarray) -> np.ndarray:
        tokens, att = self._tokens, self.attention
        dpooled = self.mlp.backward(dc)
        datt = (tokens * dpooled[:, None, :]).sum(axis=2)
        dscores = softmax_backward(att, datt)
        self.query.accumulate((dscores[:, :, None] * tokens).sum(axis=(0, 1))[None, :])
        dtokens = att[:, :, None] * dpooled[:, None, :] + dscores[:, :, None] * self.query.value[0]
        return dtokens.reshape(len(tokens), FEATURE_DIM)


def encode_context(encoder: ContextEncoder, f_v: np.ndarray) -> np.ndarray:
    return encoder.forward(np.atleast_2d(f_v))


class PromptModulator:
    """Generates ``N_MOD`` tokens as gamma(c) * mean(P_base) + delta(c) + seed."""

    def __init__(self, rng: np.random.Generator):
        self.gamma = Linear(Parameter("casp.mod.gamma.W", rng.normal(0, 0.1, (CONTEXT_DIM, TOKEN_DIM))),
                            Parameter("casp.mod.gamma.b", np.zeros((1, TOKEN_DIM)), decay=False))
        self.delta = Linear(Parameter("casp.mod.delta.W", rng.normal(0, 0.1, (CONTEXT_DIM, TOKEN_DIM))),
                            Parameter("casp.mod.delta.b", np.zeros((1, TOKEN_DIM)), decay=False))
        self.seeds = Parameter("casp.mod.seeds", rng.normal(0, 0.1, (N_MOD, TOKEN_DIM)), decay=False)
        self._cache = None

    @property
    def parameters(self) -> list[Parameter]:
        return self.gamma.parameters + self.delta.parameters + [self.seeds]

    def forward(self, p_base: np.ndarray, c: np.ndarray) -> np.ndarray:
        pool = p_base.mean(axis=0)
        g = 1.0 + self.gamma.forward(c)
        d = self.delta.forward(c)
        self._cache = (pool, g, len(p_base))
        return (g * pool + d)[:, None, :] + self.seeds.value[None]

    def backward(self, dmod: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (d P_base, d c)."""
        pool, g, n_base = self._cache
        per_row = dmod.sum(axis=1)
        self.seeds.accumulate(dmod.sum(axis=0))
        dc = self.gamma.backward(per_row * pool) + self.delta.backward(per_row)
        dpool = (per_row * g).sum(axis=0)
        return np.broadcast_to(dpool / n_base, (n_base, TOKEN_DIM)).copy(), dc


def modulate_prompts(modulator: PromptModulator, p_base: np.ndarray, c: np.ndarray) -> np.ndarray:
    return modulator.forward(p_base, np.atleast_2d(c))


class Casp:
    """Prompt learner: context encoder, base prompts, modulator.

    ``mode`` selects the ablations: ``"full"``; ``"no_ctx"`` replaces the
    context with zeros; ``"fixed"`` swaps the generated tokens for frozen
    random ones and leaves the context encoder unused.
    """

    def __init__(self, text: TextEncoder, rng: np.random.Generator, mode: str = "full"):
        if mode not in ("full", "no_ctx", "fixed"):
            raise ValueError(f"unknown CASP mode {mode!r}")
        self.mode = mode
        self.text = text
        self.context = ContextEncoder(rng)
        self.p_base = Parameter("casp.p_base", rng.normal(0, 0.5, (N_BASE, TOKEN_DIM)), decay=False)
        self.modulator = PromptModulator(rng)
        self.fixed_mod = rng.normal(0, 0.5, (N_MOD, TOKEN_DIM))

    @property
    def parameters(self) -> list[Parameter]:
        if self.mode == "fixed":
            return []
        params = [self.p_base] + self.modulator.parameters
        if self.mode == "full":
            params = self.context.parameters + params
        return params

    @property
    def all_parameters(self) -> list[Parameter]:
        return self.context.parameters + [self.p_base] + self.modulator.parameters

    def prompts(self, f_v: np.ndarray) -> np.ndarray:
        """P_CASP for every row of ``f_v``, shaped (batch, N_BASE + N_MOD, TOKEN_DIM)."""
        b = len(f_v)
        if self.mode == "fixed":
            mod = np.broadcast_to(self.fixed_mod, (b, N_MOD, TOKEN_DIM))
        else:
            c = self.context.forward(f_v) if self.mode == "full" else np.zeros((b, CONTEXT_DIM))
            mod = self.modulator.forward(self.p_base.value, c)
        base = np.broadcast_to(self.p_base.value, (b, N_BASE, TOKEN_DIM))
        return np.concatenate([base, mod], axis=1)

    def embed(self, f_v: np.ndarray) -> np.ndarray:
        return self.text.forward(self.prompts(np.atleast_2d(f_v)))

    def backward(self, de_t: np.ndarray) -> np.ndarray:
        """Push d e_T into the prompt parameters; returns d f_v."""
        dtok = self.text.backward(de_t)
        df_v = np.zeros((len(de_t), FEATURE_DIM))
        if self.mode == "fixed":
            return df_v
        dbase_mod, dc = self.modulator.backward(dtok[:, N_BASE:])
        self.p_base.accumulate(dtok[:, :N_BASE].sum(axis=0) + dbase_mod)
        if self.mode == "full":
            df_v = self.context.backward(dc)
        return df_v


@dataclass
class CaspLossReport:
    alignment: float
    identity: float

    @property
    def total(self) -> float:
        return self.alignment + self.identity


def contrastive_alignment(f_v: np.ndarray, e_t: np.ndarray, identities: np.ndarray,
                          temperature: float = TEMPERATURE) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric image/text InfoNCE where every same-identity pair is a positive.

    Returns the loss and its gradients w.r.t. ``f_v`` and ``e_t``.
    """
    v, nv = l2_normalize(f_v)
    t, nt = l2_normalize(e_t)
    b = len(v)
    pos = (identities[:, None] == identities[None, :]).astype(np.float64)
    target = pos / pos.sum(axis=1, keepdims=True)
    s = v @ t.T / temperature
    lp_v2t = log_softmax(s)
    lp_t2v = log_softmax(s.T)
    loss = -0.5 * ((target * lp_v2t).sum() + (target * lp_t2v).sum()) / b
    ds = 0.5 * ((np.exp(lp_v2t) - target) + (np.exp(lp_t2v) - target).T) / b
    dv = ds @ t / temperature
    dt = ds.T @ v / temperature
    return float(loss), l2_normalize_backward(dv, v, nv), l2_normalize_backward(dt, t, nt)


def casp_stage_loss(casp: Casp, text_head: Linear, f_v: np.ndarray, identities: np.ndarray,
                    local_labels: np.ndarray, backward: bool = True) -> CaspLossReport:
    """Alignment plus text-side identity CE on one batch with frozen ``f_v``.

    With ``backward`` set, gradients land in the CASP parameters and the text
    head; the visual feature is treated as a constant.
    """
    if len(np.unique(identities)) < 2:
        raise ProtocolError("CASP loss needs at least two identities in the batch")
    e_t = casp.embed(f_v)
    align, _, de_align = contrastive_alignment(f_v, e_t, identities)
    id_loss, dlogits = cross_entropy(text_head.forward(e_t), local_labels)
    if backward:
        casp.backward(de_align + text_head.backward(dlogits))
    return CaspLossReport(align, id_loss)


class DivergenceError(ArithmeticError):
    pass


def batches_per_epoch(domain, P: int, K: int) -> int:
    return -(-len(domain.train) // (P * K))


def casp_train_stage(model, domain, epochs: int, cfg, task_index: int, cycle: int = 0) -> list[dict]:
    """Train the prompt learner on one domain with the visual adapter frozen.

    Returns one log dict per epoch (epoch, alignment, identity, total, lr).
    """
    casp = model.casp
    if epochs <= 0 or not casp.parameters:
        return []
    head = model.text_head(domain)
    local = {pid: i for i, pid in enumerate(domain.train_ids)}
    opt = Adam(casp.parameters + head.parameters, cfg.casp_lr, cfg.weight_decay)
    sched = Schedule("cosine", epochs, cfg.casp_lr, floor=cfg.casp_lr * cfg.lr_floor)
    feats = model.visual.forward(domain.train.latents)
    logs = []
    for epoch in range(epochs):
        rng = stream(cfg.seed, "batches", task_index, domain.name, "casp", cycle, epoch)
        lr = sched.rate(epoch)
        sums = np.zeros(2)
        n = batches_per_epoch(domain, cfg.P, cfg.K)
        for step in range(n):
            idx = sample_pk_indices(domain, cfg.P, cfg.K, rng)
            ids = domain.train.identities[idx]
            rep = casp_stage_loss(casp, head, feats[idx], ids, np.array([local[i] for i in ids]))
            if not np.isfinite(rep.total):
                raise DivergenceError(f"CASP loss became non-finite at task {task_index}, epoch {epoch}, step {step}")
            opt.step(lr)
            sums += (rep.alignment, rep.identity)
        a, i = sums / n
        logs.append({"epoch": epoch, "alignment": a, "identity": i, "total": a + i, "lr": lr})
    return logs
