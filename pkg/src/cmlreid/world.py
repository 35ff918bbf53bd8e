"""Synthetic identities, outfits and domains.

A world holds four seen domains (two same-cloth, two cloth-changing) and two
held-out domains. Each image is a latent vector

    latent = A_d @ concat(core + jitter, outfit + jitter, pose) + b_d

where ``A_d`` is a domain-specific rotation times a diagonal scaling. In a
same-cloth (SC) domain an identity always wears one outfit, so the outfit
code is a reliable identity cue. In a cloth-changing (CC) domain each image
draws one of several outfits, and only the identity core carries over.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy.linalg import expm

from .numerics import ProtocolError
from .rng import stream

SC, CC = "SC", "CC"
STATES = (SC, CC)
STATE_INDEX = {SC: 0, CC: 1}
MIXED = "MIX"

D_ID = 16
D_CL = 16
D_POSE = 16
D_LAT = D_ID + D_CL + D_POSE

SEEN = ("SC1", "CC1", "SC2", "CC2")
HELD_OUT = ("SC3", "CC3")
DESCRIPTOR_SCHEMA = "cmlreid.world/1"

# Positional stand-ins for the benchmark datasets: SC1~Market, CC1~LTCC,
# SC2~MSMT, CC2~PRCC.
BUILTIN_ORDERS = (
    ("SC1", "CC1", "SC2", "CC2"),
    ("CC1", "SC1", "CC2", "SC2"),
    ("SC1", "CC2", "SC2", "CC1"),
    ("CC2", "SC2", "CC1", "SC1"),
    ("SC1", "SC2", "CC1", "CC2"),
    ("CC1", "CC2", "SC1", "SC2"),
)


class PoolError(ValueError):
    pass


@dataclass(frozen=True)
class WorldParams:
    n_train_ids: int = 50
    n_eval_ids: int = 25
    train_images: int = 20
    eval_images: int = 10
    cc_outfits: int = 4
    pose_sigma: float = 0.3
    core_scale: float = 1.0
    outfit_scale: float = 0.9
    core_jitter: float = 0.8
    outfit_jitter: float = 0.6
    state_signature: float = 2.0
    rotation: float = 0.5
    offset_scale: float = 0.5
    scale_low: float = 0.7
    scale_high: float = 1.3


@dataclass(frozen=True)
class Identity:
    id: int
    core: np.ndarray


@dataclass(frozen=True)
class Outfit:
    outfit_id: int
    code: np.ndarray


@dataclass(frozen=True)
class SyntheticSample:
    latent: np.ndarray
    identity: int
    outfit: int
    domain: str
    state: str


@dataclass
class SampleSet:
    """Column-oriented collection of samples from one domain."""

    latents: np.ndarray
    identities: np.ndarray
    outfits: np.ndarray
    domain: str
    states: np.ndarray

    def __len__(self) -> int:
        return len(self.identities)

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.latents[i], int(self.identities[i]), int(self.outfits[i]),
                               self.domain, str(self.states[i]))

    def __iter__(self) -> Iterator[SyntheticSample]:
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.latents[idx], self.identities[idx], self.outfits[idx],
                         self.domain, self.states[idx])

    @property
    def state_labels(self) -> np.ndarray:
        return np.array([STATE_INDEX[s] for s in self.states], dtype=np.int64)


@dataclass
class Domain:
    name: str
    state_kind: str
    shift_matrix: np.ndarray
    shift_offset: np.ndarray
    sigma: float
    train_ids: tuple[int, ...]
    eval_ids: tuple[int, ...]
    identities: dict[int, Identity]
    wardrobe: dict[int, tuple[Outfit, ...]]
    train: SampleSet
    eval: SampleSet
    _by_identity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for pid in self.train_ids:
            self._by_identity[pid] = np.flatnonzero(self.train.identities == pid)

    def train_indices(self, pid: int) -> np.ndarray:
        return self._by_identity[pid]


@dataclass
class World:
    seed: int
    params: WorldParams
    domains: dict[str, Domain]

    @property
    def seen(self) -> list[Domain]:
        return [self.domains[n] for n in SEEN]

    @property
    def held_out(self) -> list[Domain]:
        return [self.domains[n] for n in HELD_OUT]

    def descriptor(self) -> dict:
        return {
            "schema": DESCRIPTOR_SCHEMA,
            "seed": self.seed,
            "dims": {"identity": D_ID, "outfit": D_CL, "pose": D_POSE, "latent": D_LAT},
            "params": asdict(self.params),
            "domains": [
                {"name": d.name, "state_kind": d.state_kind, "sigma": d.sigma,
                 "train_ids": len(d.train_ids), "eval_ids": len(d.eval_ids),
                 "train_samples": len(d.train), "eval_samples": len(d.eval)}
                for d in self.domains.values()
            ],
        }

    def save_descriptor(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.descriptor(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_descriptor(path) -> World:
    with open(path) as fh:
        desc = json.load(fh)
    if desc.get("schema") != DESCRIPTOR_SCHEMA:
        raise ValueError(f"unsupported world descriptor schema {desc.get('schema')!r}")
    return build_world(int(desc["seed"]), WorldParams(**desc["params"]))


def _random_rotation(rng: np.random.Generator, dim: int, strength: float) -> np.ndarray:
    k = rng.normal(size=(dim, dim))
    k = (k - k.T) / np.sqrt(2 * dim)
    return expm(strength * k)


def _draw(rng, n, dim, scale) -> np.ndarray:
    return scale * rng.normal(size=(n, dim))


def _build_domain(seed: int, name: str, state: str, first_id: int, first_outfit: int,
                  p: WorldParams, signature: np.ndarray) -> Domain:
    rng = stream(seed, "world", name)
    rot = _random_rotation(rng, D_LAT, p.rotation)
    scales = rng.uniform(p.scale_low, p.scale_high, size=D_LAT)
    A = rot * scales[None, :]
    b = _draw(rng, 1, D_LAT, p.offset_scale)[0]

    n_ids = p.n_train_ids + p.n_eval_ids
    ids = list(range(first_id, first_id + n_ids))
    cores = _draw(rng, n_ids, D_ID, p.core_scale)
    identities = {pid: Identity(pid, cores[i]) for i, pid in enumerate(ids)}

    n_outfits = 1 if state == SC else p.cc_outfits
    codes = _draw(rng, n_ids * n_outfits, D_CL, p.outfit_scale) + signature
    wardrobe = {}
    for i, pid in enumerate(ids):
        wardrobe[pid] = tuple(
            Outfit(first_outfit + i * n_outfits + k, codes[i * n_outfits + k])
            for k in range(n_outfits))

    def render(pids: list[int], per_id: int, label: str) -> SampleSet:
        r = stream(seed, "world", name, label)
        lat, pid_col, out_col = [], [], []
        for pid in pids:
            outs = wardrobe[pid]
            pick = r.integers(len(outs), size=per_id)
            core = identities[pid].core + _draw(r, per_id, D_ID, p.core_jitter)
            cloth = np.stack([outs[k].code for k in pick]) + _draw(r, per_id, D_CL, p.outfit_jitter)
            pose = _draw(r, per_id, D_POSE, p.pose_sigma)
            lat.append(np.hstack([core, cloth, pose]) @ A.T + b)
            pid_col.extend([pid] * per_id)
            out_col.extend(outs[k].outfit_id for k in pick)
        n = len(pid_col)
        return SampleSet(np.vstack(lat), np.array(pid_col), np.array(out_col), name,
                         np.array([state] * n))

    train_ids, eval_ids = ids[:p.n_train_ids], ids[p.n_train_ids:]
    eval_set = render(eval_ids, p.eval_images, "eval")
    if state == CC:
        for pid in eval_ids:
            if len(np.unique(eval_set.outfits[eval_set.identities == pid])) < 2:
                raise ProtocolError(
                    f"domain {name}: eval identity {pid} wears a single outfit; "
                    "cloth-changing protocol needs at least two")
    return Domain(name, state, A, b, p.pose_sigma, tuple(train_ids), tuple(eval_ids),
                  identities, wardrobe, render(train_ids, p.train_images, "train"), eval_set)


def build_world(seed: int, params: WorldParams | None = None) -> World:
    """Build the four seen and two held-out domains for ``seed``."""
    p = params or WorldParams()
    sig_rng = stream(seed, "world", "signature")
    signatures = {s: p.state_signature * sig_rng.normal(size=D_CL) / np.sqrt(D_CL) * 2
                  for s in STATES}
    domains = {}
    n_ids = p.n_train_ids + p.n_eval_ids
    for k, name in enumerate(SEEN + HELD_OUT):
        state = SC if name.startswith("SC") else CC
        domains[name] = _build_domain(seed, name, state, k * n_ids, k * n_ids * p.cc_outfits,
                                      p, signatures[state])
    return World(int(seed), p, domains)


def sample_pk_batch(domain: Domain, P: int, K: int, rng: np.random.Generator) -> SampleSet:
    """Draw ``K`` training images for each of ``P`` distinct identities."""
    return domain.train.take(sample_pk_indices(domain, P, K, rng))


def sample_pk_indices(domain: Domain, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    if P < 2:
        raise ProtocolError("PK batch needs P >= 2 identities for triplet mining")
    if P > len(domain.train_ids):
        raise PoolError(f"P={P} exceeds the {len(domain.train_ids)} train identities of {domain.name}")
    chosen = rng.choice(np.array(domain.train_ids), size=P, replace=False)
    idx = []
    for pid in chosen:
        pool = domain.train_indices(int(pid))
        idx.append(rng.choice(pool, size=K, replace=len(pool) < K))
    return np.concatenate(idx)


@dataclass
class EvalSplit:
    query: SampleSet
    gallery: SampleSet
    state: str


def eval_split(domain: Domain, n_query: int = 2) -> EvalSplit:
    """Split a domain's eval images into query and gallery.

    SC: the first ``n_query`` images of each identity are queries, the rest
    gallery. CC: queries are the first images wearing the identity's first
    outfit; gallery keeps only images in other outfits.
    """
    ev = domain.eval
    q_idx, g_idx = [], []
    for pid in domain.eval_ids:
        rows = np.flatnonzero(ev.identities == pid)
        if domain.state_kind == SC:
            q_idx.extend(rows[:n_query])
            g_idx.extend(rows[n_query:])
        else:
            first = ev.outfits[rows[0]]
            same = rows[ev.outfits[rows] == first]
            other = rows[ev.outfits[rows] != first]
            if len(other) == 0:
                raise ProtocolError(f"{domain.name}: identity {pid} has no other-outfit gallery image")
            q_idx.extend(same[:n_query])
            g_idx.extend(other)
    return EvalSplit(ev.take(q_idx), ev.take(g_idx), domain.state_kind)


def mixed_samples(a: Domain, b: Domain, n: int, seed: int) -> SampleSet:
    """50/50 latent interpolations between eval images of an SC and a CC domain.

    These stand in for ambiguous inputs in the projection-weight analysis;
    they have no ground-truth clothing state.
    """
    r = stream(seed, "mixed", a.name, b.name)
    ia = r.integers(len(a.eval), size=n)
    ib = r.integers(len(b.eval), size=n)
    lat = 0.5 * (a.eval.latents[ia] + b.eval.latents[ib])
    return SampleSet(lat, a.eval.identities[ia], a.eval.outfits[ia], f"{a.name}+{b.name}",
                     np.array([MIXED] * n))


def builtin_orders() -> list[tuple[str, ...]]:
    return [tuple(o) for o in BUILTIN_ORDERS]
