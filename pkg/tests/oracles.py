"""Slow, independent reference implementations used as test oracles.

Written in plain Python loops over lists so they share no code path with the
vectorised library functions they check.
"""

import math
from fractions import Fraction


def _unit(row):
    n = math.sqrt(sum(x * x for x in row))
    return [x / n for x in row]


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) + 1e-12)


def triplet_exhaustive(features, ids, margin):
    """Mean over anchors of the worst hinge across every (positive, negative) pair."""
    rows = [_unit(list(map(float, f))) for f in features]
    n = len(rows)
    per_anchor = []
    for a in range(n):
        pos = [p for p in range(n) if p != a and ids[p] == ids[a]]
        neg = [q for q in range(n) if ids[q] != ids[a]]
        if not pos:
            continue
        worst = 0.0
        for p in pos:
            for q in neg:
                worst = max(worst, _dist(rows[a], rows[p]) - _dist(rows[a], rows[q]) + margin)
        per_anchor.append(worst)
    return sum(per_anchor) / len(per_anchor)


def _cos_key(a, b):
    """A key that orders pairs exactly as their cosine similarity does.

    sign(a.b) * (a.b)^2 / (|a|^2 |b|^2) is monotone in the cosine and, on
    float inputs, computable without rounding.
    """
    a = [Fraction(x) for x in a]
    b = [Fraction(x) for x in b]
    dot = sum(x * y for x, y in zip(a, b))
    sign = (dot > 0) - (dot < 0)
    return sign * dot * dot / (sum(x * x for x in a) * sum(y * y for y in b))


def ranking_exhaustive(q_feat, g_feats, q_id, g_ids, q_outfit=None, g_outfits=None, cc=False):
    """Gallery indices sorted by (descending cosine, ascending index) after CC masking."""
    cand = []
    for j, g in enumerate(g_feats):
        if cc and g_ids[j] == q_id and g_outfits[j] == q_outfit:
            continue
        cand.append((-_cos_key(q_feat, g), j))
    cand.sort()
    return [j for _, j in cand]


def ap_exact(flags):
    """Average precision from its definition, in exact rational arithmetic."""
    hits, total = 0, Fraction(0)
    for k, rel in enumerate(flags, start=1):
        if rel:
            hits += 1
            total += Fraction(hits, k)
    return total / hits


def map_rank1_exhaustive(q_feats, g_feats, q_ids, g_ids, q_outfits=None, g_outfits=None, cc=False):
    """(mAP %, R-1 %) as exact fractions, skipping queries with no relevant item.

    Returns None when no query has a relevant gallery item.
    """
    aps, tops = [], []
    for i, qf in enumerate(q_feats):
        order = ranking_exhaustive(qf, g_feats, q_ids[i], g_ids,
                                   None if q_outfits is None else q_outfits[i], g_outfits, cc)
        flags = [g_ids[j] == q_ids[i] for j in order]
        if not any(flags):
            continue
        aps.append(ap_exact(flags))
        tops.append(Fraction(int(flags[0])))
    if not aps:
        return None
    return 100 * sum(aps) / len(aps), 100 * sum(tops) / len(tops)
