"""Experiment driver: ``fistlab <command> [options]``.

Commands run in this order, each reading the previous step's artifacts from
the run directory::

    gen-data -> train-skills -> train-distance -> finetune -> eval / ablate -> report

Every command writes the resolved configuration to ``config.json`` and updates
``manifest.json`` with a SHA-256 for each artifact it produced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import datastore, maze
from .datastore import DatastoreError
from .imitator import (
    Artifacts,
    BCConfig,
    BCNet,
    EvalConfig,
    MazeTask,
    REQUIREMENTS,
    MalformedLogError,
    MissingArtifactError,
    PolicyKind,
    evaluate,
    read_episode_log,
    train_bc,
    train_goal_bc,
    write_episode_log,
    write_report_csv,
)
from .maze import EnvConfig, LayoutError, MazeLayout, PlanningError
from .metric import DistanceConfig, DistanceEncoder, finetune_distance, train_distance
from .numerics import CheckpointError
from .skillmodel import (
    ConfigMismatchError,
    SkillModel,
    SkillModelConfig,
    TrainingDivergedError,
    finetune,
    pretrain,
    train_from_scratch,
)

log = logging.getLogger("fistlab")

OUTPUT_ROOT_ENV = "FISTLAB_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5
EXIT_PLANNING = 6


class MissingPrerequisiteError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    layout: str | None = None  # path to a text layout; None uses the built-in maze
    region: str = "left"
    n_transitions: int = 200_000
    n_demos: int = 10
    noise_std: float = 0.0
    episode_length: int = 1000
    seed: int = 0
    finetune_distance: bool = False
    distance_finetune_epochs: int = 10
    env: EnvConfig = field(default_factory=EnvConfig)
    skills: SkillModelConfig = field(default_factory=lambda: SkillModelConfig(pretrain_epochs=40))
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    bc: BCConfig = field(default_factory=lambda: BCConfig(pretrain_epochs=40))
    eval: EvalConfig = field(default_factory=EvalConfig)

    NESTED = {"env": EnvConfig, "skills": SkillModelConfig, "distance": DistanceConfig, "bc": BCConfig, "eval": EvalConfig}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k in cls.NESTED:
                sub = cls.NESTED[k]
                bad = set(v) - {f.name for f in fields(sub)}
                if bad:
                    raise ValueError(f"unknown keys in {k}: {sorted(bad)}")
                kwargs[k] = sub(**v)
            else:
                kwargs[k] = v
        return cls(**kwargs)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def load_layout(self) -> MazeLayout:
        return maze.default_layout() if self.layout is None else MazeLayout.from_file(self.layout)


def apply_override(cfg: dict, assignment: str) -> dict:
    """``a.b=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    *parents, leaf = key.split(".")
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise ValueError(f"override {key!r}: {p!r} is not a config section")
        node = node[p]
    if leaf not in node:
        raise ValueError(f"override {key!r}: unknown field {leaf!r}")
    node[leaf] = value
    return cfg


# run directory ---------------------------------------------------------------------

ARTIFACTS = {
    "corpus": ("data/corpus", "gen-data"),
    "demos": ("data/demos", "gen-data"),
    "skills_pretrained": ("checkpoints/skills_pretrained", "train-skills"),
    "spirl_pretrained": ("checkpoints/spirl_pretrained", "train-skills"),
    "bc": ("checkpoints/bc", "train-skills"),
    "goal_bc": ("checkpoints/goal_bc", "train-skills"),
    "distance": ("checkpoints/distance", "train-distance"),
    "skills": ("checkpoints/skills_finetuned", "finetune"),
    "spirl": ("checkpoints/spirl_finetuned", "finetune"),
    "skills_scratch": ("checkpoints/skills_scratch", "finetune"),
    "distance_finetuned": ("checkpoints/distance_finetuned", "finetune"),
}


def sha256_tree(path: Path) -> str:
    """Content hash of a file, or of every file under a directory in sorted order."""
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class RunDir:
    def __init__(self, root, config: ExperimentConfig):
        self.root, self.config = Path(root), config
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name][0]

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not (p / "manifest.json").exists():
            raise MissingPrerequisiteError(
                f"missing artifact {name!r} at {p}; run `fistlab {ARTIFACTS[name][1]} --run-dir {self.root}` first"
            )
        return p

    def has(self, name: str) -> bool:
        return (self.path(name) / "manifest.json").exists()

    def write_config(self) -> None:
        (self.root / "config.json").write_text(json.dumps(self.config.to_json(), indent=2, sort_keys=True) + "\n")

    def record(self, command: str, produced: list[Path]) -> None:
        mpath = self.root / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"artifacts": {}, "lineage": []}
        manifest["config_hash"] = self.config.digest()
        for p in produced:
            rel = str(p.relative_to(self.root))
            manifest["artifacts"][rel] = {"sha256": sha256_tree(p), "command": command}
        manifest["lineage"].append(
            {"command": command, "config_hash": self.config.digest(), "time": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        )
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def check_config(self) -> None:
        """Refuse to mix artifacts from a different data configuration."""
        cpath = self.root / "config.json"
        if not cpath.exists():
            return
        old = json.loads(cpath.read_text())
        new = self.config.to_json()
        for key in ("layout", "region", "n_transitions", "n_demos", "noise_std", "episode_length", "seed", "env"):
            if old.get(key) != new.get(key):
                raise ConfigMismatchError(
                    f"run directory {self.root} was created with {key}={old.get(key)!r}, now {new.get(key)!r}; "
                    "use a fresh --run-dir"
                )


# commands ----------------------------------------------------------------------------

def cmd_gen_data(run: RunDir, args) -> list[Path]:
    cfg = run.config
    layout = cfg.load_layout()
    corpus = maze.generate_offline_data(
        layout, cfg.region, cfg.n_transitions, cfg.noise_std, cfg.seed, cfg.env, cfg.episode_length
    )
    demos = maze.generate_demos(layout, cfg.region, cfg.n_demos, cfg.seed, cfg.env)
    log.info("corpus: %d trajectories, %d transitions; demos: %s", len(corpus), corpus.n_transitions, demos.lengths)
    return [datastore.save(corpus, run.path("corpus")), datastore.save(demos, run.path("demos"))]


def cmd_train_skills(run: RunDir, args) -> list[Path]:
    cfg = run.config
    corpus = datastore.load(run.require("corpus"))
    which = _split(args.models) if args.models else ["fist", "spirl", "bc", "goal_bc"]
    produced = []
    if "fist" in which:
        model, _ = pretrain(corpus, cfg.skills, cfg.seed, "future")
        produced.append(model.save(run.path("skills_pretrained")))
    if "spirl" in which:
        model, _ = pretrain(corpus, cfg.skills, cfg.seed, "current")
        produced.append(model.save(run.path("spirl_pretrained")))
    if "bc" in which or "goal_bc" in which:
        demos = datastore.load(run.require("demos"))
        if "bc" in which:
            produced.append(train_bc(corpus, demos, cfg.bc, cfg.seed)[0].save(run.path("bc")))
        if "goal_bc" in which:
            produced.append(train_goal_bc(corpus, demos, cfg.bc, cfg.seed)[0].save(run.path("goal_bc")))
    return produced


def cmd_train_distance(run: RunDir, args) -> list[Path]:
    corpus = datastore.load(run.require("corpus"))
    encoder, _ = train_distance(corpus, run.config.distance, run.config.seed)
    return [encoder.save(run.path("distance"))]


def cmd_finetune(run: RunDir, args) -> list[Path]:
    cfg = run.config
    demos = datastore.load(run.require("demos"))
    produced = []
    for pre, out in (("skills_pretrained", "skills"), ("spirl_pretrained", "spirl")):
        if pre == "spirl_pretrained" and not run.has(pre) and run.has("skills_pretrained"):
            log.warning("no SPiRL checkpoint; skipping its fine-tuning")
            continue
        model = SkillModel.load(run.require(pre))
        tuned, _ = finetune(model, demos, cfg.skills, cfg.seed)
        produced.append(tuned.save(run.path(out)))
    scratch, _ = train_from_scratch(demos, cfg.skills, cfg.seed, "future")
    produced.append(scratch.save(run.path("skills_scratch")))
    if cfg.finetune_distance:
        enc = DistanceEncoder.load(run.require("distance"))
        tuned, _ = finetune_distance(enc, demos, cfg.distance_finetune_epochs, cfg.seed)
        produced.append(tuned.save(run.path("distance_finetuned")))
    return produced


def load_artifacts(run: RunDir, kinds) -> Artifacts:
    """Load exactly the checkpoints the requested policies need."""
    cfg = run.config
    demos = datastore.load(run.require("demos"))
    task = MazeTask.from_demos(cfg.load_layout(), demos, cfg.env)
    art = Artifacts(task, demos)
    needed = sorted({name for k in kinds for name in REQUIREMENTS[k]})
    keys = {n: ("distance_finetuned" if cfg.finetune_distance else "distance") if n == "distance" else n for n in needed}
    missing = [keys[n] for n in needed if not run.has(keys[n])]
    if missing:
        steps = sorted({ARTIFACTS[m][1] for m in missing}, key=list(COMMANDS).index)
        raise MissingPrerequisiteError(
            f"missing artifacts {missing} in {run.root}; run "
            + ", then ".join(f"`fistlab {c} --run-dir {run.root}`" for c in steps)
        )
    for name in needed:
        if name == "distance":
            key = "distance_finetuned" if cfg.finetune_distance else "distance"
            art.distance = DistanceEncoder.load(run.require(key))
        elif name in ("bc", "goal_bc"):
            setattr(art, name, BCNet.load(run.require(name)))
        else:
            setattr(art, name, SkillModel.load(run.require(name), expect_H=cfg.skills.H))
    return art


def _split(text: str) -> list[str]:
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _run_policies(run: RunDir, labelled, jobs: int, stem: str) -> list[Path]:
    kinds = sorted({k for _, k, _ in labelled}, key=lambda k: k.value)
    art = load_artifacts(run, kinds)
    reports = []
    for label, kind, ecfg in labelled:
        rep = evaluate(kind, art, ecfg, jobs=jobs)
        rep.policy = label
        reports.append(rep)
    out = run.root / "eval"
    out.mkdir(exist_ok=True)
    return [write_episode_log(reports, out / f"{stem}.jsonl"), write_report_csv(reports, out / f"{stem}.csv")]


def cmd_eval(run: RunDir, args) -> list[Path]:
    kinds = [PolicyKind.parse(p) for p in _split(args.policies)]
    if not kinds:
        raise ValueError("--policies is empty")
    return _run_policies(run, [(k.value, k, run.config.eval) for k in kinds], args.jobs, "episodes")


ABLATIONS = [
    PolicyKind.FIST,
    PolicyKind.FIST_EUC,
    PolicyKind.FIST_NO_FT,
    PolicyKind.FIST_NO_PRETRAIN,
    PolicyKind.FIST_ORACLE,
    PolicyKind.SPIRL_CLOSEST,
    PolicyKind.SPIRL_HSTEP,
    PolicyKind.GOAL_BC,
]


def cmd_ablate(run: RunDir, args) -> list[Path]:
    base = run.config.eval
    kinds = [PolicyKind.parse(p) for p in _split(args.policies)] if args.policies else ABLATIONS
    labelled = [(k.value, k, base) for k in kinds]
    for t in sorted({int(t) for t in _split(args.periods)}):
        if t != base.resample_period:
            labelled.append((f"fist_t{t}", PolicyKind.FIST, replace(base, resample_period=t)))
    return _run_policies(run, labelled, args.jobs, "ablation")


def cmd_report(run: RunDir | None, args) -> list[Path]:
    """``run`` is None when explicit inputs are given; nothing is then recorded in a run directory."""
    sources = [Path(p) for p in args.inputs] if args.inputs else [run.root]
    logs = []
    for src in sources:
        logs += [src] if src.is_file() else sorted((src / "eval").glob("*.jsonl"))
    reports = [r for lg in logs for r in read_episode_log(lg)]
    if not reports:
        raise MissingPrerequisiteError(f"no episode records found in {[str(s) for s in sources]}; run `fistlab eval` first")
    if args.out:
        out = Path(args.out)
    elif run is not None:
        out = run.root / "report"
    else:
        out = (sources[0] if sources[0].is_dir() else sources[0].parent) / "report"
    out.mkdir(parents=True, exist_ok=True)
    return [write_report_csv(reports, out / "report.csv"), plot_scores(reports, out / "normalized_scores.svg")]


def plot_scores(reports, path) -> Path:
    """Grouped bar chart of normalized score per (task, policy), as a standalone SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "fistlab"
    tasks = sorted({r.task for r in reports})
    policies = sorted({r.policy for r in reports})
    score = {(r.task, r.policy): r.normalized_score for r in reports}
    width = 0.8 / len(policies)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(tasks) * max(1, len(policies) / 3)), 3.5))
    for k, pol in enumerate(policies):
        xs = [i + k * width for i, t in enumerate(tasks) if (t, pol) in score]
        ys = [score[(t, pol)] for t in tasks if (t, pol) in score]
        bars = ax.bar(xs, ys, width, label=pol)
        for bar, t in zip(bars, [t for t in tasks if (t, pol) in score]):
            bar.set_gid(f"bar_{t}_{pol}")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(tasks))], tasks)
    ax.set_ylim(0, 1)
    ax.patch.set_gid("plot_area")
    ax.set_ylabel("normalized score")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-skills": cmd_train_skills,
    "train-distance": cmd_train_distance,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# argument handling ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<region>-seed<seed> or ./runs/...)")
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE", help="e.g. skills.pretrain_epochs=5")
    common.add_argument("--region", help="blocked region / downstream task")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--n-transitions", type=int, help="offline corpus size")
    common.add_argument("--pretrain-epochs", type=int)
    common.add_argument("--finetune-epochs", type=int)
    common.add_argument("--distance-epochs", type=int)
    common.add_argument("--max-steps", type=int)
    common.add_argument("--n-starts", type=int)
    common.add_argument("--repeats", type=int, help="episodes per start position")
    common.add_argument("--resample-period", type=int, help="steps between skill re-selection")
    common.add_argument("--deterministic", action="store_true", help="use the prior mean instead of sampling z")
    common.add_argument("--finetune-distance", action="store_true", help="also fine-tune the distance encoder on demos")
    common.add_argument("--jobs", type=int, default=1, help="parallel evaluation workers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fistlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="offline corpus and downstream demos")
    p.add_argument("--out", dest="run_dir", help="alias for --run-dir")
    p = sub.add_parser("train-skills", parents=[common], help="pretrain skill models and BC baselines")
    p.add_argument("--models", help="subset of fist,spirl,bc,goal_bc")
    sub.add_parser("train-distance", parents=[common], help="contrastive distance encoder")
    sub.add_parser("finetune", parents=[common], help="adapt skill models to the demos")
    p = sub.add_parser("eval", parents=[common], help="roll out policies from the fixed starts")
    p.add_argument("--policies", default="fist,spirl,bc", help=f"comma list of {[k.value for k in PolicyKind]}")
    p = sub.add_parser("ablate", parents=[common], help="ablation policies and skill re-sampling periods")
    p.add_argument("--policies", help="override the ablation policy list")
    p.add_argument("--periods", default="1,5,10", help="resample periods for FIST")
    p = sub.add_parser("report", parents=[common], help="CSV table and normalized-score bar chart")
    p.add_argument("inputs", nargs="*", help="run directories or episode logs (default: --run-dir)")
    p.add_argument("--out", help="output directory (default: <run-dir>/report)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Defaults, then the run directory's stored config, then --config, flags and overrides."""
    d = ExperimentConfig().to_json()
    stored = Path(args.run_dir) / "config.json" if args.run_dir else None
    if stored is not None and stored.exists():
        d = json.loads(stored.read_text())
    if args.config:
        for k, v in json.loads(Path(args.config).read_text()).items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
    flags = {
        "region": args.region,
        "seed": args.seed,
        "n_transitions": args.n_transitions,
        "skills.pretrain_epochs": args.pretrain_epochs,
        "bc.pretrain_epochs": args.pretrain_epochs,
        "skills.finetune_epochs": args.finetune_epochs,
        "bc.finetune_epochs": args.finetune_epochs,
        "distance.epochs": args.distance_epochs,
        "eval.max_steps": args.max_steps,
        "eval.n_starts": args.n_starts,
        "eval.repeats": args.repeats,
        "eval.resample_period": args.resample_period,
        "eval.deterministic": True if args.deterministic else None,
        "finetune_distance": True if args.finetune_distance else None,
    }
    for key, value in flags.items():
        if value is not None:
            apply_override(d, f"{key}={json.dumps(value)}")
    for assignment in args.override:
        apply_override(d, assignment)
    # evaluation starts and episode streams derive from the master seed
    d["eval"]["seed"] = d["seed"]
    return ExperimentConfig.from_json(d)


def default_run_dir(cfg: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg.region}-seed{cfg.seed}"


def exit_code(err: BaseException) -> int:
    if isinstance(err, (MissingPrerequisiteError, MissingArtifactError)):
        return EXIT_MISSING
    if isinstance(err, (DatastoreError, CheckpointError, ConfigMismatchError, MalformedLogError)):
        return EXIT_DATA
    if isinstance(err, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(err, (PlanningError, LayoutError)):
        return EXIT_PLANNING
    if isinstance(err, (ValueError, TypeError)):
        return EXIT_USAGE
    return EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        cfg = resolve_config(args)
        if args.command == "report" and args.inputs:
            produced = cmd_report(None, args)
        else:
            run = RunDir(args.run_dir or default_run_dir(cfg), cfg)
            if args.command != "report":
                run.check_config()
            produced = COMMANDS[args.command](run, args)
            run.write_config()
            run.record(args.command, produced)
    except Exception as err:  # mapped to a category exit code
        print(f"fistlab {args.command}: error: {err}", file=sys.stderr)
        if args.verbose:
            raise
        return exit_code(err)
    for p in produced:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
