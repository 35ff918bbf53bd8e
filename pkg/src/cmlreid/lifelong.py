"""Sequential-task training, variants and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .akfp import (IdentityHead, ProjectionBundle, Projector, StateClassifier, StatePrototypes,
                   akfp_train_stage, project)
from .casp import N_MOD, Casp, casp_train_stage
from .encoders import FEATURE_DIM, TOKEN_DIM, TextEncoder, VisualEncoder
from .evaluation import SeenDomainMatrix, map_and_rank1
from .numerics import Linear, Parameter
from .rng import stream
from .world import BUILTIN_ORDERS, SEEN, World, WorldParams, build_world, eval_split

VARIANTS = ("full", "sft", "no_casp", "no_ctx", "no_akfp", "no_lproj", "single_prototype")
CHECKPOINT_SCHEMA = "cmlreid.checkpoint/1"
FULL_CASP_EPOCHS = 120
FULL_AKFP_EPOCHS = 60


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


class CheckpointError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    order: int = 1
    domains: list[str] | None = None
    epoch_scale: float = 0.1
    lam: float = 0.5
    beta: float = 0.001
    margin: float = 0.3
    P: int = 16
    K: int = 4
    variant: str = "full"
    out_dir: str = "runs"
    cycles: int = 1
    casp_lr: float = 3e-3
    akfp_lr: float = 5e-3
    lr_floor: float = 0.01
    warmup_fraction: float = 1 / 6
    weight_decay: float = 1e-4
    state_weight: float = 0.1
    share_prompts: bool = True
    persist_prototypes: bool = True
    eval_held_out: bool = True
    world: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        bad = []
        if not 0 <= int(self.seed) < 2 ** 64:
            bad.append("seed: must be an unsigned 64-bit integer")
        if self.domains is None and not 1 <= self.order <= len(BUILTIN_ORDERS):
            bad.append(f"order: must be in 1..{len(BUILTIN_ORDERS)}")
        if self.domains is not None and (not self.domains or any(d not in SEEN for d in self.domains)
                                         or len(set(self.domains)) != len(self.domains)):
            bad.append(f"domains: must be distinct names from {list(SEEN)}")
        if not self.epoch_scale >= 0:
            bad.append("epoch_scale: must be >= 0")
        if not self.lam >= 0:
            bad.append("lam: must be >= 0")
        if not 0 < self.beta <= 1:
            bad.append("beta: must lie in (0, 1]")
        if not self.margin >= 0:
            bad.append("margin: must be >= 0")
        if self.P < 2:
            bad.append("P: must be >= 2")
        if self.K < 1:
            bad.append("K: must be >= 1")
        if self.variant not in VARIANTS:
            bad.append(f"variant: must be one of {list(VARIANTS)}")
        if self.cycles < 1:
            bad.append("cycles: must be >= 1")
        for name in ("casp_lr", "akfp_lr"):
            if not getattr(self, name) > 0:
                bad.append(f"{name}: must be > 0")
        if not 0 <= self.lr_floor <= 1:
            bad.append("lr_floor: must lie in [0, 1]")
        if not 0 < self.warmup_fraction < 1:
            bad.append("warmup_fraction: must lie in (0, 1)")
        if self.weight_decay < 0 or self.state_weight < 0:
            bad.append("weight_decay/state_weight: must be >= 0")
        unknown = set(self.world) - {f.name for f in dataclasses.fields(WorldParams)}
        if unknown:
            bad.append(f"world: unknown keys {sorted(unknown)}")
        if bad:
            raise ConfigError(bad)

    @property
    def sequence(self) -> list[str]:
        return list(self.domains) if self.domains is not None else list(BUILTIN_ORDERS[self.order - 1])

    @property
    def casp_epochs(self) -> int:
        return int(round(FULL_CASP_EPOCHS * self.epoch_scale))

    @property
    def akfp_epochs(self) -> int:
        return int(round(FULL_AKFP_EPOCHS * self.epoch_scale))

    @property
    def world_params(self) -> WorldParams:
        return WorldParams(**self.world)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        problems = [f"{k}: unknown key" for k in unknown]
        try:
            cfg = cls(**{k: v for k, v in data.items() if k in known})
        except ConfigError as exc:
            problems += exc.problems
            cfg = None
        except TypeError as exc:
            problems.append(str(exc))
            cfg = None
        if problems:
            raise ConfigError(problems)
        return cfg

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


class CMLReIDModel:
    """Everything trainable or stateful for one lifelong run.

    Components are initialised from separate named random streams, so every
    variant starts from the same adapter, identity head and prompt weights.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        v = cfg.variant
        s = cfg.seed
        self.variant = v
        self.visual = VisualEncoder(stream(s, "init", "visual"))
        self.text = TextEncoder(stream(s, "init", "text"))
        casp_mode = {"no_casp": "fixed", "no_ctx": "no_ctx"}.get(v, "full")
        self.casp = Casp(self.text, stream(s, "init", "casp"), mode=casp_mode)
        self.text_heads: dict[str, Linear] = {}
        self.id_head = IdentityHead()
        self.logs: list[dict] = []
        self.tasks_done: list[str] = []

        plain = v in ("sft", "no_akfp")
        self.classifier = None if plain else StateClassifier(stream(s, "init", "state"))
        self.bundle = None if v == "sft" else ProjectionBundle(stream(s, "init", "proj"), single=(v == "no_akfp"))
        self.projector = None if plain else Projector(self.bundle)
        self.protos = None if plain else StatePrototypes(FEATURE_DIM, cfg.beta, shared=(v == "single_prototype"))
        self.lam = 0.0 if v in ("no_lproj", "no_akfp", "sft") else cfg.lam
        self.state_weight = 0.0 if plain else cfg.state_weight
        self.skip_casp = v in ("sft", "no_casp")

    def features(self, latents: np.ndarray) -> np.ndarray:
        return self.visual.forward(latents)

    def project(self, f_v: np.ndarray) -> np.ndarray:
        return project(f_v, self.classifier.forward(f_v), self.bundle)

    def text_head(self, domain) -> Linear:
        if domain.name not in self.text_heads:
            n = len(domain.train_ids)
            self.text_heads[domain.name] = Linear(
                Parameter(f"casp.text_head.{domain.name}.W", np.zeros((FEATURE_DIM, n))),
                Parameter(f"casp.text_head.{domain.name}.b", np.zeros((1, n)), decay=False))
        return self.text_heads[domain.name]

    def akfp_parameters(self) -> list[Parameter]:
        params = self.visual.parameters + self.id_head.parameters
        if self.classifier is not None:
            params += self.classifier.parameters + self.bundle.parameters
        return params

    def casp_parameters(self) -> list[Parameter]:
        out = list(self.casp.all_parameters)
        for name in sorted(self.text_heads):
            out += self.text_heads[name].parameters
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        params = (self.visual.parameters + self.visual.frozen + self.text.frozen
                  + self.casp_parameters() + self.id_head.parameters)
        if self.classifier is not None:
            params += self.classifier.parameters
        if self.bundle is not None:
            params += self.bundle.parameters
        return {p.name: p for p in params}

    def concept_embeddings(self) -> dict[str, np.ndarray]:
        """Text embeddings of two fixed hand-picked token sets, one per state concept."""
        out = {}
        for concept in ("SC", "CC"):
            tokens = stream(self.cfg.seed, "concept", concept).normal(0, 0.5, (N_MOD, TOKEN_DIM))
            out[concept] = self.text.forward(tokens[None])[0]
        return out


def make_variant(cfg: ExperimentConfig) -> CMLReIDModel:
    if cfg.variant not in VARIANTS:
        raise ConfigError([f"variant: unknown flag {cfg.variant!r}"])
    return CMLReIDModel(cfg)


def run_task(model: CMLReIDModel, domain, task_index: int) -> CMLReIDModel:
    """One lifelong task: grow the identity head, then alternate the stages."""
    cfg = model.cfg
    model.id_head.expand(domain.train_ids, stream(cfg.seed, "id_head", task_index, domain.name))
    if model.protos is not None and not cfg.persist_prototypes:
        model.protos.ready[:] = False
    if not cfg.share_prompts and task_index > 0:
        fresh = stream(cfg.seed, "p_base", task_index).normal(0, 0.5, model.casp.p_base.shape)
        model.casp.p_base.value[...] = fresh
    casp_epochs = math.ceil(cfg.casp_epochs / cfg.cycles)
    akfp_epochs = math.ceil(cfg.akfp_epochs / cfg.cycles)
    for cycle in range(cfg.cycles):
        if not model.skip_casp:
            for row in casp_train_stage(model, domain, casp_epochs, cfg, task_index, cycle):
                model.logs.append({"task": task_index, "domain": domain.name, "stage": "casp",
                                   "cycle": cycle, **row})
        for row in akfp_train_stage(model, domain, akfp_epochs, cfg, task_index, cycle):
            model.logs.append({"task": task_index, "domain": domain.name, "stage": "akfp",
                               "cycle": cycle, **row})
    model.tasks_done.append(domain.name)
    return model


@dataclass
class SequenceResult:
    matrix: SeenDomainMatrix
    model: CMLReIDModel
    world: World
    held_out: dict[str, tuple[float, float]]


def evaluate_domain(model: CMLReIDModel, domain) -> tuple[float, float]:
    split = eval_split(domain)
    return map_and_rank1(split.query, split.gallery, model.features)


def run_sequence(cfg: ExperimentConfig, world: World | None = None) -> SequenceResult:
    """Train on each domain of the order in turn, evaluating all seen domains after each task."""
    world = world or build_world(cfg.seed, cfg.world_params)
    model = make_variant(cfg)
    order = cfg.sequence
    matrix = SeenDomainMatrix(order, {n: world.domains[n].state_kind for n in order})
    for t, name in enumerate(order):
        run_task(model, world.domains[name], t)
        for seen in order[:t + 1]:
            matrix.record(t + 1, seen, *evaluate_domain(model, world.domains[seen]))
    held = {}
    if cfg.eval_held_out:
        held = {d.name: evaluate_domain(model, d) for d in world.held_out}
    return SequenceResult(matrix, model, world, held)


# -- checkpoints --------------------------------------------------------------

def _matrix_entry(value: np.ndarray) -> dict:
    return {"shape": list(value.shape), "values": [float(x) for x in value.ravel()]}


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def checkpoint_dict(model: CMLReIDModel) -> dict:
    params = model.named_parameters()
    data = {
        "schema": CHECKPOINT_SCHEMA,
        "config": model.cfg.to_dict(),
        "parameters": {name: _matrix_entry(p.value) for name, p in params.items()},
        "identity_columns": [[pid, col] for pid, col in model.id_head.columns.items()],
        "text_heads": sorted(model.text_heads),
        "tasks_done": list(model.tasks_done),
        "logs": model.logs,
        "prototypes": None,
    }
    if model.protos is not None:
        p = model.protos
        data["prototypes"] = {"values": _matrix_entry(p.values), "ready": [bool(x) for x in p.ready],
                              "betas": [float(b) for b in p.betas], "shared": p.shared}
    return _clean(data)


def save_checkpoint(model: CMLReIDModel, path) -> None:
    text = json.dumps(checkpoint_dict(model), sort_keys=True, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n")


def _load_matrix(entry: dict, name: str) -> np.ndarray:
    shape = tuple(entry["shape"])
    values = np.array(entry["values"], dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise CheckpointError(f"{name}: {values.size} values for shape {shape}")
    return values.reshape(shape)


def load_checkpoint(path) -> CMLReIDModel:
    try:
        data = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(data, dict) or data.get("schema") != CHECKPOINT_SCHEMA:
        found = data.get("schema") if isinstance(data, dict) else None
        raise CheckpointError(f"checkpoint schema {found!r} does not match {CHECKPOINT_SCHEMA!r}")
    try:
        model = CMLReIDModel(ExperimentConfig.from_dict(data["config"]))
        cols = {int(pid): int(col) for pid, col in data["identity_columns"]}
        model.id_head.expand(sorted(cols, key=cols.get), np.random.default_rng(0))
        for name in data["text_heads"]:
            model.text_head(_NamedDomain(name, data["parameters"][f"casp.text_head.{name}.W"]["shape"][1]))
        params = model.named_parameters()
        missing = set(params) ^ set(data["parameters"])
        if missing:
            raise CheckpointError(f"parameter set mismatch: {sorted(missing)}")
        for name, entry in data["parameters"].items():
            value = _load_matrix(entry, name)
            if value.shape != params[name].shape:
                raise CheckpointError(f"{name}: shape {value.shape} != expected {params[name].shape}")
            params[name].value[...] = value
        if data["prototypes"] is not None:
            pr = data["prototypes"]
            model.protos.values[...] = _load_matrix(pr["values"], "prototypes")
            model.protos.ready[...] = pr["ready"]
            model.protos.betas[...] = pr["betas"]
        model.logs = data["logs"]
        model.tasks_done = list(data["tasks_done"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {exc!r}") from None
    return model


@dataclass
class _NamedDomain:
    name: str
    n_ids: int

    @property
    def train_ids(self) -> range:
        return range(self.n_ids)

