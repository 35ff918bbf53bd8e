"""Command-line entry point.

    cmlreid run     --config cfg.json [--seed N] [--order K] [--variant V] [--out DIR] [--epoch-scale X]
    cmlreid orders  ...   # six orders x {full, sft}
    cmlreid ablate  ...   # full plus five ablations on order 1
    cmlreid sweep   --param lambda|beta [--values ...] ...

Every run writes into its own directory named by a hash of its config, so
suites never collide. Exit status: 0 on success, 2 for a bad config, 1 if a
stage failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .evaluation import forgetting_report, mechanism_analyses
from .lifelong import ConfigError, ExperimentConfig, run_sequence, save_checkpoint
from .world import BUILTIN_ORDERS

CONFIG_SCHEMA = "cmlreid.config/1"
MANIFEST_NAME = "manifest.json"
ABLATIONS = ("full", "no_casp", "no_ctx", "no_akfp", "no_lproj", "single_prototype")
SWEEP_DEFAULTS = {
    "lambda": (0.1, 0.3, 0.5, 0.7, 1.0),
    "beta": (0.0001, 0.0005, 0.001, 0.005, 0.01),
}
SWEEP_FIELD = {"lambda": "lam", "beta": "beta"}


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config, apply non-None overrides and validate everything at once."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be an object"])
    problems = []
    schema = data.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        problems.append(f"schema: expected {CONFIG_SCHEMA!r}, got {schema!r}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig.from_dict(data)
    except ConfigError as exc:
        problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("out_dir")
    text = json.dumps({"schema": CONFIG_SCHEMA, **d}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def content_hash(files: dict[str, str]) -> str:
    """Hash over (relative path, file digest) pairs, recomputable from disk."""
    text = "".join(f"{name}\t{digest}\n" for name, digest in sorted(files.items()))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    world_seed: int
    directory: str
    files: dict[str, str]
    duration_s: float

    @property
    def content_hash(self) -> str:
        return content_hash(self.files)

    def to_dict(self) -> dict:
        return {"schema": "cmlreid.manifest/1", "config": self.config, "world_seed": self.world_seed,
                "directory": self.directory, "files": self.files, "content_hash": self.content_hash,
                "duration_s": round(self.duration_s, 3)}

    def write(self) -> Path:
        path = Path(self.directory) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def verify_manifest(directory) -> bool:
    """True when every listed file exists and the stored hash matches the files on disk."""
    directory = Path(directory)
    data = json.loads((directory / MANIFEST_NAME).read_text())
    files = {}
    for name in data["files"]:
        p = directory / name
        if not p.is_file():
            return False
        files[name] = _sha256(p)
    return files == data["files"] and content_hash(files) == data["content_hash"]


class _Writer:
    def __init__(self, directory: Path):
        self.dir = directory
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def text(self, name: str, text: str) -> None:
        path = self.dir / name
        path.write_text(text)
        self.files[name] = _sha256(path)

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def add(self, name: str) -> None:
        self.files[name] = _sha256(self.dir / name)


def _loss_rows(logs: list[dict]):
    keys = ("task", "domain", "stage", "cycle", "epoch")
    for row in logs:
        for k, v in row.items():
            if k not in keys and v is not None:
                yield [*(row[x] for x in keys), k, _fmt(v)]


def _summary(cfg: ExperimentConfig, res) -> dict:
    avg = res.matrix.averages()
    return {
        "variant": cfg.variant,
        "order": cfg.sequence,
        "casp_epochs": 0 if res.model.skip_casp else cfg.casp_epochs,
        "akfp_epochs": cfg.akfp_epochs,
        "averages": {k: {"mAP": round(m, 4), "rank1": round(r, 4)} for k, (m, r) in avg.items()},
        "forgetting": {k: round(v, 4) for k, v in forgetting_report(res.matrix).items()},
        "held_out": {k: {"mAP": round(m, 4), "rank1": round(r, 4)} for k, (m, r) in res.held_out.items()},
    }


def cmd_run(cfg: ExperimentConfig) -> RunManifest:
    """Train one sequence and write every report for it."""
    start = time.perf_counter()
    res = run_sequence(cfg)
    out = _Writer(Path(cfg.out_dir) / f"run-{config_hash(cfg)}")
    out.json("config.json", {"schema": CONFIG_SCHEMA, **cfg.to_dict()})
    out.text("matrix.csv", res.matrix.to_csv())
    out.text("held_out.csv", _csv(["domain", "mAP", "rank1"],
                                  [[d, _fmt(m), _fmt(r)] for d, (m, r) in res.held_out.items()]))
    out.text("losses.csv", _csv(["task", "domain", "stage", "cycle", "epoch", "metric", "value"],
                                _loss_rows(res.model.logs)))
    out.text("analysis.csv", mechanism_analyses(res.model, res.world, seed=cfg.seed).to_csv())
    out.json("summary.json", _summary(cfg, res))
    res.world.save_descriptor(out.dir / "world.json")
    out.add("world.json")
    save_checkpoint(res.model, out.dir / "checkpoint.json")
    out.add("checkpoint.json")
    manifest = RunManifest(cfg.to_dict(), cfg.seed, str(out.dir), out.files,
                           time.perf_counter() - start)
    manifest.write()
    return manifest


def _totals(cfg: ExperimentConfig) -> dict:
    return cmd_run(cfg).to_dict()


def _run_many(cfgs: list[ExperimentConfig], jobs: int) -> list[dict]:
    """Manifests in input order; runs are independent so order of completion is irrelevant."""
    if jobs <= 1:
        return [_totals(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_totals, cfgs))


def _averages(manifest: dict) -> dict:
    return json.loads((Path(manifest["directory"]) / "summary.json").read_text())["averages"]


def _suite(cfg: ExperimentConfig, name: str, header, rows, manifests) -> Path:
    out = _Writer(Path(cfg.out_dir) / f"{name}-{config_hash(cfg)}")
    out.text(f"{name}.csv", _csv(header, rows))
    out.json("runs.json", [{"directory": m["directory"], "content_hash": m["content_hash"]}
                           for m in manifests])
    return out.dir / f"{name}.csv"


def cmd_orders(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    """All six built-in orders for full and sft; one row per (order, variant)."""
    keys = [(o, v) for o in range(1, len(BUILTIN_ORDERS) + 1) for v in ("full", "sft")]
    cfgs = [cfg.replace(order=o, domains=None, variant=v) for o, v in keys]
    manifests = _run_many(cfgs, jobs)
    rows = []
    for (o, v), m in zip(keys, manifests):
        m_ap, r1 = _averages(m)["total"].values()
        rows.append([o, v, _fmt(m_ap), _fmt(r1)])
    return _suite(cfg, "orders", ["order", "variant", "total_mAP", "total_rank1"], rows, manifests)


def cmd_ablate(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    """Full and every single-component ablation on order 1."""
    cfgs = [cfg.replace(order=1, domains=None, variant=v) for v in ABLATIONS]
    manifests = _run_many(cfgs, jobs)
    rows = []
    for v, m in zip(ABLATIONS, manifests):
        avg = _averages(m)
        row = [v]
        for k in ("SC", "CC", "total"):
            row += [_fmt(avg[k]["mAP"]), _fmt(avg[k]["rank1"])]
        rows.append(row)
    header = ["variant", "SC_mAP", "SC_rank1", "CC_mAP", "CC_rank1", "total_mAP", "total_rank1"]
    return _suite(cfg, "ablation", header, rows, manifests)


def cmd_sweep(cfg: ExperimentConfig, param: str, values=None, jobs: int = 1) -> Path:
    """One full order-1 run per value of ``lambda`` or ``beta``."""
    if param not in SWEEP_FIELD:
        raise ConfigError([f"param: must be one of {sorted(SWEEP_FIELD)}"])
    values = list(values) if values else list(SWEEP_DEFAULTS[param])
    bad = [v for v in values if not v > 0]
    if bad:
        raise ConfigError([f"values: must be positive, got {bad}"])
    cfgs = [cfg.replace(order=1, domains=None, variant="full", **{SWEEP_FIELD[param]: v}) for v in values]
    for c in cfgs:
        c.validate()
    manifests = _run_many(cfgs, jobs)
    rows = []
    for v, m in zip(values, manifests):
        tot = _averages(m)["total"]
        rows.append([repr(float(v)), _fmt(tot["mAP"]), _fmt(tot["rank1"])])
    return _suite(cfg, f"sweep_{param}", ["value", "total_mAP", "total_rank1"], rows, manifests)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--order", type=int, help="built-in order 1..6")
    common.add_argument("--variant")
    common.add_argument("--out", dest="out_dir", help="output root directory")
    common.add_argument("--epoch-scale", dest="epoch_scale", type=float)

    ap = argparse.ArgumentParser(prog="cmlreid", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train and evaluate one sequence")
    for name, help_ in (("orders", "six orders, full vs sft"), ("ablate", "ablation table on order 1")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("sweep", parents=[common], help="sensitivity to lambda or beta")
    p.add_argument("--param", required=True, choices=sorted(SWEEP_FIELD))
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, order=args.order, variant=args.variant,
                          out_dir=args.out_dir, epoch_scale=args.epoch_scale)
        if args.command == "run":
            m = cmd_run(cfg)
            print(f"{m.directory}  {m.content_hash}")
        elif args.command == "orders":
            print(cmd_orders(cfg, args.jobs))
        elif args.command == "ablate":
            print(cmd_ablate(cfg, args.jobs))
        else:
            print(cmd_sweep(cfg, args.param, args.values, args.jobs))
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except Exception as exc:  # any stage failure maps to a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
