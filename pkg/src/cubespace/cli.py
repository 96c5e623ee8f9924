"""Command-line pipeline: generate-data, train, export-pddl, make-instances, plan, validate, report.

Every command works on one experiment directory::

    cubespace generate-data --exp runs/lo3 --config lo3.yaml
    cubespace train --exp runs/lo3
    ...

The resolved config is stored in the directory, so later commands only need
``--exp``.  ``--set key.sub=value`` overrides single config keys.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import domains as Dm
from . import extraction as X
from . import metrics as M
from . import strips as S
from . import validate as V
from .training import TrainConfig, load_checkpoint, read_log, save_checkpoint, train, write_log

log = logging.getLogger("cubespace")

PLANNER_ENV = "CUBESPACE_PLANNER"
PLANNERS = ("internal_blind", "internal_goal_count", "external")


class MissingArtifact(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    domain: dict = field(default_factory=lambda: {"kind": "lights_out", "n": 3, "cell": 3})
    kind: str = "ama4plus"
    transitions: int = 500
    data_seed: int = 0
    train: dict = field(default_factory=lambda: TrainConfig.desk().to_dict())
    instance_g: list = field(default_factory=lambda: [3, 5])
    instance_count: int = 10
    instance_seed: int = 1
    instance_noise: float = 0.0
    planner: str = "internal_blind"
    planner_command: str = "{planner} {domain} {problem} {plan}"
    time_limit: float = 600.0
    max_expansions: int = 1_000_000
    jobs: int = 1

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise ValueError(f"planner must be one of {PLANNERS}, got {self.planner!r}")
        from .models import MODEL_KINDS

        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {sorted(MODEL_KINDS)}, got {self.kind!r}")

    @property
    def spec(self) -> Dm.DomainSpec:
        return Dm.DomainSpec(**self.domain)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        if "train" in d:  # merge so a partial train block keeps the other defaults
            merged = _deep_merge(base.train, d["train"])
            TrainConfig.from_dict(merged)  # validate early
            d["train"] = merged
        if "domain" in d:
            d["domain"] = _deep_merge(base.domain, d["domain"])
        return cls(**{**asdict(base), **d})


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in (b or {}).items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """``train.epochs=10`` style assignments; values are parsed as YAML scalars."""
    d = json.loads(json.dumps(d))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return d


# -- experiment directory ------------------------------------------------------------

class Experiment:
    CONFIG = "config.yaml"
    MANIFEST = "manifest.json"

    def __init__(self, root, config: ExperimentConfig):
        self.root = Path(root)
        self.config = config

    @classmethod
    def open(cls, root, config_file=None, overrides=None) -> "Experiment":
        root = Path(root)
        stored = root / cls.CONFIG
        if config_file is not None:
            base = yaml.safe_load(Path(config_file).read_text()) or {}
        elif stored.exists():
            base = yaml.safe_load(stored.read_text()) or {}
        else:
            base = {}
        cfg = ExperimentConfig.from_dict(apply_overrides(base, overrides))
        root.mkdir(parents=True, exist_ok=True)
        stored.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
        return cls(root, cfg)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, rel: str, command: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingArtifact(f"{p} does not exist; run `cubespace {command} --exp {self.root}` first")
        return p

    # artifacts
    dataset = property(lambda self: self.path("data", "dataset.npz"))
    checkpoint = property(lambda self: self.path("model", "checkpoint.pt"))
    train_log = property(lambda self: self.path("model", "train_log.tsv"))
    domain_file = property(lambda self: self.path("pddl", "domain.pddl"))
    extraction_report = property(lambda self: self.path("pddl", "extraction.tsv"))
    instances = property(lambda self: self.path("instances", "instances.npz"))

    def record(self, stage: str, outputs: list[Path]) -> None:
        """Deterministic manifest: config hash, seeds, versions and output digests per stage."""
        mpath = self.root / self.MANIFEST
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        import torch

        manifest.update({
            "config_hash": self.config.digest(),
            "seeds": {"data": self.config.data_seed, "train": self.config.train_config.seed,
                      "instances": self.config.instance_seed},
            "versions": {"cubespace": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "torch": torch.__version__},
        })
        stages = manifest.setdefault("stages", {})
        stages[stage] = {str(p.relative_to(self.root)): _sha256(p) for p in sorted(outputs) if p.is_file()}
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sha256(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


# -- commands ---------------------------------------------------------------------

def cmd_generate_data(exp: Experiment) -> dict:
    cfg = exp.config
    ds = Dm.sample_transitions(cfg.spec, cfg.transitions, np.random.default_rng(cfg.data_seed))
    ds.save(exp.dataset)
    exp.record("generate-data", [exp.dataset])
    return {"transitions": len(ds), **{k: len(v) for k, v in ds.splits.items()}}


def _load_dataset(exp: Experiment) -> Dm.TransitionDataset:
    return Dm.TransitionDataset.load(exp.need("data/dataset.npz", "generate-data"))


def _load_model(exp: Experiment):
    model, payload = load_checkpoint(exp.need("model/checkpoint.pt", "train"))
    norm = payload.get("normalizer")
    return model, (Dm.Normalizer(norm["mean"], norm["std"]) if norm else None)


def cmd_train(exp: Experiment) -> dict:
    ds = _load_dataset(exp)
    cfg = exp.config.train_config
    x0, x1 = ds.split("train")
    val = ds.split("val") if len(ds.splits.get("val", [])) else None
    model, rows = train(exp.config.kind, x0, x1, cfg, val=val)
    save_checkpoint(model, exp.checkpoint, cfg, ds.normalizer, {"config_hash": exp.config.digest()})
    write_log(rows, exp.train_log)
    exp.record("train", [exp.checkpoint, exp.train_log])
    last = [r for r in rows if r["split"] == "train"][-1]
    return {"epochs": cfg.epochs, "final_train_total": last["total"]}


def cmd_export_pddl(exp: Experiment) -> dict:
    ds = _load_dataset(exp)
    model, _ = _load_model(exp)
    x0, x1 = ds.split("train")
    domain, report = X.generate_domain(model, x0, x1)
    exp.domain_file.write_text(S.emit_domain(domain))
    report.write(exp.extraction_report)
    exp.record("export-pddl", [exp.domain_file, exp.extraction_report])
    return report.summary()


def cmd_make_instances(exp: Experiment) -> dict:
    cfg = exp.config
    rng = np.random.default_rng(cfg.instance_seed)
    insts = []
    for g in cfg.instance_g:
        insts += Dm.sample_instances(cfg.spec, int(g), cfg.instance_count, rng)
    Dm.save_instances(insts, cfg.spec, exp.instances)
    exp.record("make-instances", [exp.instances])
    return {"instances": len(insts)}


def _solve_internal(args):
    domain, problem, heuristic, max_exp, limit = args
    res = S.astar(problem.planning_problem(domain), heuristic, max_exp, limit)
    return res.status, [a.name for a in res.plan], res.expanded, res.generated, res.elapsed


def run_external(template: str, domain_text: str, problem_text: str, time_limit: float,
                 planner: str | None = None) -> tuple[str, list[str]]:
    """Write files, run the command template, read a one-action-per-line plan.

    The template may use ``{planner}`` (taken from the environment variable
    named by ``PLANNER_ENV`` unless given), ``{domain}``, ``{problem}`` and ``{plan}``.
    """
    planner = planner if planner is not None else os.environ.get(PLANNER_ENV, "")
    if "{planner}" in template and not planner:
        raise RuntimeError(f"the planner command uses {{planner}} but ${PLANNER_ENV} is not set")
    with tempfile.TemporaryDirectory() as tmp:
        d, p, out = Path(tmp, "domain.pddl"), Path(tmp, "problem.pddl"), Path(tmp, "plan.txt")
        d.write_text(domain_text)
        p.write_text(problem_text)
        cmd = template.format(planner=planner, domain=d, problem=p, plan=out)
        try:
            subprocess.run(shlex.split(cmd), timeout=time_limit, capture_output=True, check=False)
        except subprocess.TimeoutExpired:
            return "timeout", []
        if not out.exists():
            return "unsolved", []
        return "solved", S.read_plan(out.read_text())


def cmd_plan(exp: Experiment) -> dict:
    cfg = exp.config
    domain = S.parse_domain(exp.need("pddl/domain.pddl", "export-pddl").read_text())
    spec, insts = Dm.load_instances(exp.need("instances/instances.npz", "make-instances"))
    model, norm = _load_model(exp)
    rng = np.random.default_rng(cfg.instance_seed + 1)
    problems = []
    for i, ins in enumerate(insts):
        xi, xg = ins.x_init, ins.x_goal
        if cfg.instance_noise > 0:
            xi, xg = Dm.corrupt(xi, cfg.instance_noise, rng), Dm.corrupt(xg, cfg.instance_noise, rng)
        prob = X.generate_problem(model, xi, xg, norm, name=f"instance-{i:03d}", domain=domain.name)
        exp.path("plans", f"{i:03d}", "problem.pddl").write_text(S.emit_problem(prob))
        problems.append(prob)

    rows, times = [], []
    if cfg.planner == "external":
        dtext = S.emit_domain(domain)
        results = []
        for prob in problems:
            status, names = run_external(cfg.planner_command, dtext, S.emit_problem(prob), cfg.time_limit)
            results.append((status, names, "", "", ""))
    else:
        heuristic = cfg.planner.removeprefix("internal_")
        jobs = [(domain, p, heuristic, cfg.max_expansions, cfg.time_limit) for p in problems]
        if cfg.jobs > 1:
            with ProcessPoolExecutor(cfg.jobs) as pool:
                results = list(pool.map(_solve_internal, jobs))
        else:
            results = [_solve_internal(j) for j in jobs]
    outputs = []
    for i, ((status, names, expanded, generated, elapsed), ins) in enumerate(zip(results, insts)):
        plan_file = exp.path("plans", f"{i:03d}", "plan.txt")
        plan_file.write_text(S.write_plan(names) if status == "solved" else "")
        outputs += [plan_file, exp.root / "plans" / f"{i:03d}" / "problem.pddl"]
        rows.append({"instance": i, "g": ins.g, "planner": cfg.planner, "status": status,
                     "plan_length": len(names) if status == "solved" else "",
                     "expanded": expanded, "generated": generated})
        times.append({"instance": i, "seconds": f"{elapsed:.3f}" if elapsed != "" else ""})
    _write_tsv(rows, exp.path("plans", "search.tsv"))
    _write_tsv(times, exp.path("plans", "search_times.tsv"))  # wall-clock, kept apart from reproducible stats
    exp.record("plan", outputs + [exp.root / "plans" / "search.tsv"])
    return {"solved": sum(r["status"] == "solved" for r in rows), "instances": len(rows)}


def _write_tsv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _read_tsv(path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f, delimiter="\t"))


def cmd_validate(exp: Experiment, images: bool = True) -> dict:
    cfg = exp.config
    domain = S.parse_domain(exp.need("pddl/domain.pddl", "export-pddl").read_text())
    spec, insts = Dm.load_instances(exp.need("instances/instances.npz", "make-instances"))
    search = {int(r["instance"]): r for r in _read_tsv(exp.need("plans/search.tsv", "plan"))}
    model, norm = _load_model(exp)
    actions = {a.name: a for a in domain.actions}
    lat = model.latent
    rows = []
    for i, ins in enumerate(insts):
        d = exp.root / "plans" / f"{i:03d}"
        found = search[i]["status"] == "solved"
        ctx = {"instance": i, "domain": spec.kind, "kind": model.kind, "heuristic": cfg.planner,
               "F": lat.F, "beta1": lat.beta1, "beta3": lat.beta3, "epsilon": lat.epsilon}
        if not found:
            rows.append(V.verdict_row(V.judge(spec, ins.init, ins.goal, ins.g, [], False), **ctx))
            continue
        prob = S.parse_problem((d / "problem.pddl").read_text(), lat.F)
        names = S.read_plan((d / "plan.txt").read_text())
        try:
            trace = S.simulate(names, prob.init, actions)
        except (S.PlanExecutionError, KeyError) as e:
            v = V.ValidationVerdict(True, False, False, None, f"plan does not execute: {e}", len(names), ins.g)
            rows.append(V.verdict_row(v, **ctx))
            continue
        states = [S.to_bits(s, lat.F) for s in trace]
        imgs = V.visualize(states, model, norm, exp.root / "validate" / f"{i:03d}" if images else None)
        rows.append(V.verdict_row(V.judge(spec, ins.init, ins.goal, ins.g, imgs, True), **ctx))
    out = exp.path("validate", "verdicts.tsv")
    V.write_verdicts(rows, out)
    exp.record("validate", [out])
    return {k: sum(bool(r[k]) for r in rows) for k in ("found", "valid", "optimal")} | {"instances": len(rows)}


def cmd_report(exp: Experiment) -> dict:
    ds = _load_dataset(exp)
    model, _ = _load_model(exp)
    x0, x1 = ds.split("test")
    domain = report = None
    if model.kind != "ama2":  # extraction is cheap; redoing it recovers the xor statistics
        domain, report = X.generate_domain(model, *ds.split("train"))
    rep = M.evaluate(model, x0, x1, domain, report)
    table = exp.path("report", "metrics.tsv")
    M.write_table([rep], table, [{"domain": ds.spec.kind}])
    outputs = [table]
    if exp.train_log.exists():
        rows = read_log(exp.train_log)
        M.curve_plot(rows, exp.path("report", "training_curve.png"))
    verdicts = exp.root / "validate" / "verdicts.tsv"
    summary = {}
    if verdicts.exists():
        vs = _read_tsv(verdicts)
        summary = {k: sum(r[k] == "True" for r in vs) for k in ("found", "valid", "optimal")}
        summary["instances"] = len(vs)
        _write_tsv([summary], exp.path("report", "planning.tsv"))
        outputs.append(exp.root / "report" / "planning.tsv")
    exp.record("report", outputs)
    return {"neg_elbo_beta1": rep.neg_elbo_beta1, "effective_bits": rep.effective_bits, **summary}


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "export-pddl": cmd_export_pddl,
    "make-instances": cmd_make_instances,
    "plan": cmd_plan,
    "validate": cmd_validate,
    "report": cmd_report,
}
PIPELINE = list(COMMANDS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cubespace", description="Learn STRIPS models from image transitions and plan with them.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "pipeline"]:
        sp = sub.add_parser(name, help="run every stage in order" if name == "pipeline" else None)
        sp.add_argument("--exp", required=True, help="experiment directory")
        sp.add_argument("--config", help="YAML config file (defaults to the one stored in --exp)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.epochs=50")
        sp.add_argument("--jobs", type=int, help="parallel planner processes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    try:
        exp = Experiment.open(args.exp, args.config, overrides)
        stages = PIPELINE if args.command == "pipeline" else [args.command]
        for stage in stages:
            result = COMMANDS[stage](exp)
            print(f"{stage}: " + " ".join(f"{k}={_fmt(v)}" for k, v in result.items()))
    except (MissingArtifact, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else v


if __name__ == "__main__":
    sys.exit(main())
