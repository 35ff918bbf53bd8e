"""Retrieval metrics, seen-domain matrices and mechanism analyses."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import NORM_EPS, ProtocolError
from .world import CC, SC, STATE_INDEX, SampleSet

Encoder = Callable[[np.ndarray], np.ndarray]


@dataclass
class RankingResult:
    query: int
    order: np.ndarray
    relevant: np.ndarray  # relevance flags aligned with ``order``


def average_precision(ranking: RankingResult | Sequence[bool]) -> float:
    flags = np.asarray(ranking.relevant if isinstance(ranking, RankingResult) else ranking, dtype=bool)
    if not flags.any():
        raise ProtocolError("average precision needs at least one relevant gallery item")
    hits = np.cumsum(flags)
    ranks = np.flatnonzero(flags) + 1
    return float((hits[flags] / ranks).mean())


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_EPS)


def rank_queries(qf: np.ndarray, gf: np.ndarray, q_ids, g_ids, q_outfits=None, g_outfits=None,
                 cloth_changing: bool = False) -> list[RankingResult]:
    """Rank the gallery for each query by cosine similarity.

    Similarities that agree to 12 decimals count as ties, so geometrically
    tied items do not get ordered by rounding noise; ties are broken by
    ascending gallery index. With ``cloth_changing`` set,
    gallery entries with the query's identity and outfit are removed before
    ranking. Queries left without a relevant item are dropped.
    """
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    sims = np.round(_unit(qf) @ _unit(gf).T, 12)
    idx = np.arange(len(g_ids))
    out = []
    for q in range(len(q_ids)):
        keep = np.ones(len(g_ids), dtype=bool)
        if cloth_changing:
            keep &= ~((g_ids == q_ids[q]) & (np.asarray(g_outfits) == q_outfits[q]))
        cand = idx[keep]
        order = cand[np.lexsort((cand, -sims[q, cand]))]
        rel = g_ids[order] == q_ids[q]
        if rel.any():
            out.append(RankingResult(q, order, rel))
    return out


def map_and_rank1(query: SampleSet, gallery: SampleSet, encoder: Encoder,
                  cloth_changing: bool | None = None) -> tuple[float, float]:
    """mAP and Rank-1, both in percent."""
    if len(query) == 0:
        raise ProtocolError("empty query set")
    if cloth_changing is None:
        cloth_changing = bool(query.states[0] == CC)
    rankings = rank_queries(encoder(query.latents), encoder(gallery.latents), query.identities,
                            gallery.identities, query.outfits, gallery.outfits, cloth_changing)
    if not rankings:
        raise ProtocolError("no query has a relevant gallery item")
    aps = [average_precision(r) for r in rankings]
    r1 = [bool(r.relevant[0]) for r in rankings]
    return 100.0 * float(np.mean(aps)), 100.0 * float(np.mean(r1))


@dataclass
class SeenDomainMatrix:
    """mAP / R-1 of each seen domain, evaluated after each task."""

    order: list[str]
    states: dict[str, str]
    cells: dict[tuple[int, str], tuple[float, float]] = field(default_factory=dict)

    def record(self, after_task: int, domain: str, m_ap: float, rank1: float) -> None:
        self.cells[(after_task, domain)] = (m_ap, rank1)

    @property
    def n_rows(self) -> int:
        return len({t for t, _ in self.cells})

    def row(self, after_task: int) -> dict[str, tuple[float, float]]:
        return {d: v for (t, d), v in self.cells.items() if t == after_task}

    def final(self) -> dict[str, tuple[float, float]]:
        return self.row(max(t for t, _ in self.cells))

    def averages(self) -> dict[str, tuple[float, float]]:
        """SC / CC / total averages over the final row (Table-1 style)."""
        fin = self.final()
        out = {}
        for name, pick in (("SC", SC), ("CC", CC), ("total", None)):
            vals = [v for d, v in fin.items() if pick is None or self.states[d] == pick]
            if vals:
                out[name] = (float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task", "eval_domain", "mAP", "rank1"])
        for (t, d), (m, r) in sorted(self.cells.items(), key=lambda kv: (kv[0][0], self.order.index(kv[0][1]))):
            w.writerow([t, d, f"{m:.4f}", f"{r:.4f}"])
        return buf.getvalue()


def forgetting_report(matrix: SeenDomainMatrix) -> dict[str, float]:
    """Best historical mAP minus final mAP, per domain."""
    fin = matrix.final()
    drops = {}
    for d in fin:
        hist = [v[0] for (t, dd), v in matrix.cells.items() if dd == d]
        drops[d] = max(hist) - fin[d][0]
    return drops


def _pair_distances(feats: np.ndarray, ids: np.ndarray) -> tuple[float, float]:
    """Mean intra- and inter-class cosine distance.

    A class with a single sample has no intra-class pairs and is left out of
    the intra-class mean.
    """
    u = _unit(feats)
    dist = 1.0 - u @ u.T
    same = ids[:, None] == ids[None, :]
    intra = []
    for pid in np.unique(ids):
        rows = np.flatnonzero(ids == pid)
        if len(rows) < 2:
            continue
        block = dist[np.ix_(rows, rows)]
        intra.append(block[~np.eye(len(rows), dtype=bool)].mean())
    inter = dist[~same].mean() if (~same).any() else float("nan")
    return (float(np.mean(intra)) if intra else 0.0), float(inter)


@dataclass
class AnalysisReport:
    state_accuracy: dict[str, float] | None
    mean_s_hat: dict[str, tuple[float, float]] | None
    feature_space: dict[str, dict[str, float]] | None
    concept_similarity: dict[str, dict[str, float]] | None
    held_out_state_accuracy: dict[str, float] | None = None

    def long_rows(self) -> list[tuple[str, str, float]]:
        rows = []
        for k, v in (self.state_accuracy or {}).items():
            rows.append(("state_accuracy", k, v))
        for k, v in (self.held_out_state_accuracy or {}).items():
            rows.append(("held_out_state_accuracy", k, v))
        for k, (sc, cc) in (self.mean_s_hat or {}).items():
            rows.append(("mean_s_hat_SC", k, sc))
            rows.append(("mean_s_hat_CC", k, cc))
        for state, d in (self.feature_space or {}).items():
            for k, v in d.items():
                rows.append((f"{k}_distance", state, v))
        for src, d in (self.concept_similarity or {}).items():
            for concept, v in d.items():
                rows.append((f"concept_similarity_{concept}", src, v))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "category", "value"])
        for metric, cat, v in self.long_rows():
            w.writerow([metric, cat, f"{v:.4f}"])
        return buf.getvalue()


def _state_accuracy(probs: dict[str, np.ndarray]) -> dict[str, float]:
    acc = {s: float((p.argmax(axis=1) == STATE_INDEX[s]).mean()) for s, p in probs.items()}
    acc["average"] = float(np.mean(list(acc.values())))
    return acc


def mechanism_analyses(model, world, seed: int = 0, n_mixed: int = 200) -> AnalysisReport:
    """State prediction, projection weights, projected-space distances and
    prompt/concept similarity, all on eval images the model never trained on.

    ``model`` is a ``CMLReIDModel``; parts it lacks (SFT has no classifier or
    projection) are reported as ``None``.
    """
    from .world import mixed_samples

    sources = {
        SC: [d.eval for d in world.seen if d.state_kind == SC],
        CC: [d.eval for d in world.seen if d.state_kind == CC],
    }
    sc_dom = next(d for d in world.seen if d.state_kind == SC)
    cc_dom = next(d for d in world.seen if d.state_kind == CC)
    mixed = mixed_samples(sc_dom, cc_dom, n_mixed, seed)

    feats = {s: [model.features(ss.latents) for ss in sets] for s, sets in sources.items()}
    f_mixed = model.features(mixed.latents)

    state_acc = mean_s = space = held = None
    if model.classifier is not None:
        probs = {s: model.classifier.forward(np.vstack(f)) for s, f in feats.items()}
        state_acc = _state_accuracy(probs)
        mean_s = {s: tuple(float(x) for x in p.mean(axis=0)) for s, p in probs.items()}
        mean_s["mixed"] = tuple(float(x) for x in model.classifier.forward(f_mixed).mean(axis=0))
        held_probs = {d.state_kind: model.classifier.forward(model.features(d.eval.latents))
                      for d in world.held_out}
        held = _state_accuracy(held_probs)

        space = {}
        for s, sets in sources.items():
            intra, inter = [], []
            for ss, f in zip(sets, feats[s]):
                f_proj = model.project(f)
                a, e = _pair_distances(f_proj, ss.identities)
                intra.append(a)
                inter.append(e)
            space[s] = {"intra": float(np.mean(intra)), "inter": float(np.mean(inter))}

    concepts = model.concept_embeddings()
    concept_sim = {}
    for src, f in (("SC", np.vstack(feats[SC])), ("CC", np.vstack(feats[CC])), ("mixed", f_mixed)):
        e_t = _unit(model.casp.embed(f))
        concept_sim[src] = {k: float((e_t @ (v / np.linalg.norm(v))).mean()) for k, v in concepts.items()}

    return AnalysisReport(state_acc, mean_s, space, concept_sim, held)
