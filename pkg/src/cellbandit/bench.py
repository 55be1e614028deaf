"""Experiment harness and command line.

A pipeline run generates a logged dataset from the simulator, fits two
reward ensembles on disjoint seed streams and a policy network, and then
works in two phases:

* optimization: action selection for every test state, which may consult
  only the optimization ensemble (and the policy);
* reporting: predicted TP from the evaluation ensemble and true TP from the
  simulator, which may consult only those two.

Both ensembles count their queries, and the per-phase deltas are written to
``manifest.json``.  Outputs are assembled in a temporary directory that is
renamed into place on success and deleted on failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import actopt, datastore, policynet, rewardnet, simnet
from .actopt import GAConfig, GAResult
from .datastore import Dataset
from .domain import N_CPS, StateBatch
from .policynet import OPPGConfig, PolicyNet
from .rewardnet import RewardEnsemble, TrainConfig
from .simnet import SimConfig, Simulator

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
BUILTIN_CONFIGS = ("desk", "paper-scale", "smoke")

# seed-stream tags
_DATA, _SPLIT, _AUGMENT, _OPT_ENS, _EVAL_ENS, _POLICY, _PI_SAMPLE, _GA = range(1, 9)
ROLES = {"optimization": _OPT_ENS, "evaluation": _EVAL_ENS}

TIMING_COLUMNS = ("wall_time_ms", "wall_time_median_ms")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


def stage_seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(master), *tags]).generate_state(1)[0])


# ----------------------------------------------------------------------
# configuration
def _sub(cls, d: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=lambda: SimConfig(n_cells=100))
    train: TrainConfig = field(default_factory=TrainConfig)
    oppg: OPPGConfig = field(default_factory=OPPGConfig)
    ga: GAConfig = field(default_factory=GAConfig)
    K: int = 5
    beta_grid: List[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 5.0])
    n_test_states: int = 1000
    seed: int = 0
    output_dir: str = "report"
    knn_k: int = 10
    start_counts: List[int] = field(default_factory=lambda: [1, 5, 10])
    sweep_n_starts: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.beta_grid:
            raise ValueError("beta_grid must not be empty")
        if any(b < 0 for b in self.beta_grid):
            raise ValueError("beta_grid values must be >= 0")
        if not self.start_counts or any(n < 1 for n in self.start_counts):
            raise ValueError("start_counts must be positive")
        if list(self.start_counts) != sorted(set(self.start_counts)):
            raise ValueError("start_counts must be strictly increasing")
        if self.sweep_n_starts < 1:
            raise ValueError("sweep_n_starts must be >= 1")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        n_rows = self.sim.n_cells * self.sim.n_days * 24
        if not 1 <= self.n_test_states < n_rows:
            raise ValueError(f"n_test_states={self.n_test_states} must be in [1, {n_rows}) for this simulator size")

    @property
    def max_starts(self) -> int:
        return max(self.start_counts)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r}")
        subs = {"sim": SimConfig, "train": TrainConfig, "oppg": OPPGConfig, "ga": GAConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for name, sub in subs.items():
            if name in d:
                d[name] = _sub(sub, d[name], name)
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"schema_version": CONFIG_SCHEMA_VERSION}
        out.update(asdict(self))
        return out


def load_config(path_or_name: Union[str, Path]) -> ExperimentConfig:
    """Read a JSON config; a bare builtin name (``desk``, ``smoke``...) loads the packaged file."""
    if str(path_or_name) in BUILTIN_CONFIGS:
        text = resources.files("cellbandit").joinpath("configs", f"{path_or_name}.json").read_text()
    else:
        text = Path(path_or_name).read_text()
    return ExperimentConfig.from_dict(json.loads(text))


# ----------------------------------------------------------------------
# stages
def sim_config(cfg: ExperimentConfig) -> SimConfig:
    return replace(cfg.sim, seed=stage_seed(cfg.seed, _DATA))


def generate(cfg: ExperimentConfig) -> Dataset:
    return simnet.generate_dataset(sim_config(cfg))


def split_data(cfg: ExperimentConfig, d: Dataset) -> Tuple[Dataset, Dataset]:
    return datastore.split(d, cfg.n_test_states, stage_seed(cfg.seed, _SPLIT))


def augment(cfg: ExperimentConfig, train: Dataset) -> Dataset:
    return datastore.augment_counterfactual(train, cfg.knn_k, stage_seed(cfg.seed, _AUGMENT))


def member_seeds(cfg: ExperimentConfig, role: str) -> List[int]:
    return [stage_seed(cfg.seed, ROLES[role], k) for k in range(cfg.K)]


def fit_ensemble(cfg: ExperimentConfig, d: Dataset, role: str) -> RewardEnsemble:
    e = rewardnet.ensemble_fit(d, cfg.K, cfg.train, member_seeds(cfg, role))
    e.metadata["role"] = role
    return e


def fit_policy(cfg: ExperimentConfig, train: Dataset) -> Tuple[PolicyNet, List[float]]:
    return policynet.train_oppg(train.factual(), replace(cfg.oppg, seed=stage_seed(cfg.seed, _POLICY)))


def ga_seed(cfg: ExperimentConfig) -> int:
    return stage_seed(cfg.seed, _GA)


def run_ga(e: RewardEnsemble, states: StateBatch, ga: GAConfig, policy: Optional[PolicyNet], seed: int) -> List[GAResult]:
    return actopt.optimize_states(e, states, ga, policy=policy, seed=seed)


def beta_sweep(
    cfg: ExperimentConfig, e: RewardEnsemble, states: StateBatch, policy: PolicyNet, betas: Optional[Sequence[float]] = None
) -> Dict[float, List[GAResult]]:
    """GA+policy runs on ``states`` for each penalty in ``betas``, all on one seed stream."""
    out = {}
    for b in cfg.beta_grid if betas is None else betas:
        ga = replace(cfg.ga, init_source="policy", n_starts=cfg.sweep_n_starts, beta=float(b))
        out[float(b)] = run_ga(e, states, ga, policy, ga_seed(cfg))
    return out


@dataclass
class Selection:
    """Everything the optimization phase hands to the reporting phase."""

    actions: Dict[Tuple[str, int], np.ndarray]  # (method, n_starts) -> raw actions
    steps: Dict[Tuple[str, int], np.ndarray]  # total GA steps per state
    wall: Dict[Tuple[str, int], np.ndarray]  # seconds per state
    ga: Dict[str, List[GAResult]]  # init source -> full-length runs
    sweep: Dict[float, List[GAResult]]


def select_actions(cfg: ExperimentConfig, test: Dataset, e: RewardEnsemble, policy: PolicyNet) -> Selection:
    """Optimization phase: consults only ``e`` (the optimization ensemble) and ``policy``."""
    states = test.states
    n = len(test)
    zeros = np.zeros(n)
    actions = {("pi0", 0): test.action, ("pi_theta", 0): policy.sample(states, stage_seed(cfg.seed, _PI_SAMPLE))}
    steps = {k: zeros for k in actions}
    wall = {k: zeros for k in actions}
    runs = {}
    for source in ("uniform", "policy"):
        ga = replace(cfg.ga, init_source=source, n_starts=cfg.max_starts, beta=0.0)
        runs[source] = run_ga(e, states, ga, policy if source == "policy" else None, ga_seed(cfg))
        for m in cfg.start_counts:
            pre = [r.prefix(m) for r in runs[source]]
            key = (f"ga_{source}", m)
            actions[key] = np.array([r.best_action for r in pre])
            steps[key] = np.array([sum(r.steps_per_start) for r in pre], dtype=float)
            wall[key] = np.array([r.wall_time for r in pre])
    sweep = beta_sweep(cfg, e, states, policy)
    return Selection(actions, steps, wall, runs, sweep)


_QS = policynet.QUANTILES


def _summary(prefix: str, v: np.ndarray) -> Dict[str, float]:
    out = {f"{prefix}_mean": float(np.mean(v))}
    out.update({f"{prefix}_q{q}": x for q, x in policynet.quantiles(v).items()})
    return out


def report(cfg: ExperimentConfig, test: Dataset, sel: Selection, e_eval: RewardEnsemble, sim: Simulator):
    """Reporting phase: predicted TP from ``e_eval`` and true TP from ``sim`` only.

    Returns ``(methods, values, sweep)`` row lists.
    """
    states = test.states
    ctx = e_eval.prepare(states)
    methods, values = [], []
    for (name, n_starts), a in sel.actions.items():
        pred, sig = e_eval.mean_std(ctx, e_eval.scaler.normalize_action(a))
        true = sim.true_reward_batch(states, a)
        steps, wall = sel.steps[(name, n_starts)], sel.wall[(name, n_starts)]
        row = {"method": name, "n_starts": n_starts, "beta": 0.0}
        row.update(_summary("pred", pred))
        row["pred_sigma_mean"] = float(np.mean(sig))
        row.update(_summary("true", true))
        row["steps_median"] = float(np.median(steps))
        row["wall_time_median_ms"] = 1000.0 * float(np.median(wall))
        methods.append(row)
        for i in range(len(test)):
            values.append({
                "state": i, "cell_id": int(test.cell_id[i]), "day": int(test.day[i]), "hour": int(test.hour[i]),
                "method": name, "n_starts": n_starts, "pred_tp": float(pred[i]), "pred_sigma": float(sig[i]),
                "true_tp": float(true[i]), "steps": int(steps[i]), "wall_time_ms": 1000.0 * float(wall[i]),
            })
    sweep = sweep_table(sel.sweep, states, e_eval, sim, ctx)
    return methods, values, sweep


def sweep_table(sweep: Dict[float, List[GAResult]], states: StateBatch, e_eval: RewardEnsemble, sim: Simulator, ctx=None):
    """One row per beta.  ``opt_sigma`` is the spread the penalized search saw."""
    ctx = ctx if ctx is not None else e_eval.prepare(states)
    rows = []
    for beta, res in sweep.items():
        a = np.array([r.best_action for r in res])
        pred, sig = e_eval.mean_std(ctx, e_eval.scaler.normalize_action(a))
        opt_sig = np.array([r.sigma for r in res])
        row = {"beta": beta, "n_starts": len(res[0].objectives)}
        row.update(_summary("opt_sigma", opt_sig))
        row.update(_summary("pred_sigma", sig))
        row.update(_summary("pred", pred))
        row["true_mean"] = float(np.mean(sim.true_reward_batch(states, a)))
        row["steps_median"] = float(np.median([sum(r.steps_per_start) for r in res]))
        rows.append(row)
    return rows


# ----------------------------------------------------------------------
# output
def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_table(path: Union[str, Path], rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> None:
    columns = list(columns or rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_table(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def file_hashes(root: Path) -> Dict[str, dict]:
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel != "manifest.json":
            out[rel] = {"sha256": sha256_file(p), "bytes": p.stat().st_size}
    return out


def ga_rows(sel: Selection, cfg: ExperimentConfig) -> List[dict]:
    rows = []
    seed = ga_seed(cfg)
    for source, runs in sel.ga.items():
        for m in cfg.start_counts:
            for i, r in enumerate(runs):
                rows.append(dict(actopt.result_row(r.prefix(m), seed, source, 0.0), run="methods", state=i))
    for beta, runs in sel.sweep.items():
        for i, r in enumerate(runs):
            rows.append(dict(actopt.result_row(r, seed, "policy", beta), run="beta_sweep", state=i))
    return rows


def _check_output(out: Path) -> None:
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise FileExistsError(f"output directory {out} exists and is not empty")


@contextlib.contextmanager
def _output_dir(out: Path):
    """Yield a scratch directory that becomes ``out`` only if the block succeeds."""
    out = Path(out)
    _check_output(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        out.rmdir()
    os.replace(tmp, out)


@dataclass
class ExperimentReport:
    output_dir: Path
    methods: List[dict]
    values: List[dict]
    beta_sweep: List[dict]
    manifest: dict


class _Stages:
    def __init__(self):
        self.seconds: Dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        self.seconds[name] = time.perf_counter() - t0
        logger.info("stage %s done in %.1fs", name, self.seconds[name])


def run_pipeline(cfg: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None) -> ExperimentReport:
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    stage = _Stages()
    with stage("setup"):
        _check_output(out)
    with _output_dir(out) as tmp:
        with stage("gen-data"):
            data = generate(cfg)
        with stage("split"):
            train, test = split_data(cfg, data)
        with stage("augment"):
            aug = augment(cfg, train)
        with stage("train-reward"):
            e_opt = fit_ensemble(cfg, aug, "optimization")
            e_eval = fit_ensemble(cfg, aug, "evaluation")
        with stage("train-policy"):
            policy, history = fit_policy(cfg, train)
        q0 = (e_opt.queries, e_eval.queries)
        with stage("optimize"):
            sel = select_actions(cfg, test, e_opt, policy)
        q1 = (e_opt.queries, e_eval.queries)
        with stage("evaluate"):
            methods, values, sweep = report(cfg, test, sel, e_eval, Simulator(sim_config(cfg)))
        q2 = (e_opt.queries, e_eval.queries)
        with stage("write"):
            write_table(tmp / "methods.csv", methods)
            write_table(tmp / "values.csv", values)
            write_table(tmp / "beta_sweep.csv", sweep)
            actopt.write_results(tmp / "ga_results.csv", ga_rows(sel, cfg), leading=("run", "state"))
            rewardnet.save_ensemble(e_opt, tmp / "models" / "reward_optimization")
            rewardnet.save_ensemble(e_eval, tmp / "models" / "reward_evaluation")
            policynet.save_policy(policy, tmp / "models" / "policy", {"ips_history": history})
            manifest = {
                "schema_version": CONFIG_SCHEMA_VERSION,
                "config": cfg.to_dict(),
                "seeds": {
                    "data": sim_config(cfg).seed,
                    "optimization_members": member_seeds(cfg, "optimization"),
                    "evaluation_members": member_seeds(cfg, "evaluation"),
                    "policy": stage_seed(cfg.seed, _POLICY),
                    "ga": ga_seed(cfg),
                },
                "rows": {"dataset": len(data), "train": len(train), "augmented": len(aug), "test": len(test)},
                "queries": {
                    "optimize": {"optimization_ensemble": q1[0] - q0[0], "evaluation_ensemble": q1[1] - q0[1]},
                    "evaluate": {"optimization_ensemble": q2[0] - q1[0], "evaluation_ensemble": q2[1] - q1[1]},
                },
                "policy_ips_history": history,
                "parallelism": 1,
                "timing_columns": list(TIMING_COLUMNS),
                "stage_seconds": stage.seconds,
                "files": file_hashes(tmp),
            }
            (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExperimentReport(out, methods, values, sweep, manifest)


# ----------------------------------------------------------------------
# command line
def _load_data(path: Optional[str]) -> Dataset:
    if not path:
        raise ValueError("--data is required")
    return datastore.read_csv(path)


def _need(args, name: str):
    v = getattr(args, name)
    if not v:
        raise ValueError(f"--{name.replace('_', '-')} is required")
    return v


def _cmd_gen_data(cfg, args, out: Path) -> List[str]:
    d = generate(cfg)
    train, test = split_data(cfg, d)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("dataset", d), ("train", train), ("test", test)):
        datastore.write_csv(part, out / f"{name}.csv")
    return ["dataset.csv", "train.csv", "test.csv"]


def _cmd_augment(cfg, args, out: Path) -> List[str]:
    aug = augment(cfg, _load_data(args.data).factual())
    out.mkdir(parents=True, exist_ok=True)
    datastore.write_csv(aug, out / "augmented.csv")
    return ["augmented.csv"]


def _cmd_train_reward(cfg, args, out: Path) -> List[str]:
    rewardnet.save_ensemble(fit_ensemble(cfg, _load_data(args.data), args.role), out)
    return ["manifest.json", "params.bin"]


def _cmd_train_policy(cfg, args, out: Path) -> List[str]:
    policy, history = fit_policy(cfg, _load_data(args.data))
    policynet.save_policy(policy, out, {"ips_history": history})
    return ["manifest.json", "params.bin"]


def _maybe_policy(args) -> Optional[PolicyNet]:
    return policynet.load_policy(args.policy) if args.policy else None


def _cmd_optimize(cfg, args, out: Path) -> List[str]:
    test = _load_data(args.data)
    e = rewardnet.load_ensemble(_need(args, "reward"))
    res = run_ga(e, test.states, cfg.ga, _maybe_policy(args), ga_seed(cfg))
    rows = [dict(actopt.result_row(r, ga_seed(cfg), cfg.ga.init_source, cfg.ga.beta), state=i) for i, r in enumerate(res)]
    out.mkdir(parents=True, exist_ok=True)
    actopt.write_results(out / "ga_results.csv", rows, leading=("state",))
    return ["ga_results.csv"]


def _cmd_evaluate(cfg, args, out: Path) -> List[str]:
    test = _load_data(args.data)
    e_eval = rewardnet.load_ensemble(_need(args, "eval_reward"))
    n = len(test)
    sel = Selection({("pi0", 0): test.action}, {}, {}, {}, {})
    policy = _maybe_policy(args)
    if policy is not None:
        sel.actions[("pi_theta", 0)] = policy.sample(test.states, stage_seed(cfg.seed, _PI_SAMPLE))
    if args.results:
        groups: Dict[Tuple[str, int], dict] = {}
        for r in actopt.read_results(args.results):
            groups.setdefault((f"ga_{r['init_source']}", r["n_starts"]), {})[r["state"]] = r
        for key, by_state in groups.items():
            if sorted(by_state) != list(range(n)):
                raise ValueError(f"{args.results}: {key} does not cover the {n} states of {args.data}")
            rs = [by_state[i] for i in range(n)]
            sel.actions[key] = np.array([[r[f"cp_{j}"] for j in range(1, N_CPS + 1)] for r in rs])
            sel.steps[key] = np.array([r["steps"] for r in rs], dtype=float)
            sel.wall[key] = np.array([r["wall_time_ms"] for r in rs]) / 1000.0
    for key in sel.actions:
        sel.steps.setdefault(key, np.zeros(n))
        sel.wall.setdefault(key, np.zeros(n))
    methods, values, _ = report(cfg, test, sel, e_eval, Simulator(sim_config(cfg)))
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "methods.csv", methods)
    write_table(out / "values.csv", values)
    return ["methods.csv", "values.csv"]


def _cmd_beta_sweep(cfg, args, out: Path) -> List[str]:
    test = _load_data(args.data)
    e = rewardnet.load_ensemble(_need(args, "reward"))
    e_eval = rewardnet.load_ensemble(_need(args, "eval_reward"))
    policy = policynet.load_policy(_need(args, "policy"))
    sweep = beta_sweep(cfg, e, test.states, policy)
    rows = sweep_table(sweep, test.states, e_eval, Simulator(sim_config(cfg)))
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "beta_sweep.csv", rows)
    return ["beta_sweep.csv"]


def _cmd_pipeline(cfg, args, out: Path) -> List[str]:
    rep = run_pipeline(cfg, out)
    return sorted(rep.manifest["files"])


COMMANDS = {
    "gen-data": (_cmd_gen_data, "generate a logged dataset and its train/test split"),
    "augment": (_cmd_augment, "append kNN counterfactual rows to a factual dataset"),
    "train-reward": (_cmd_train_reward, "fit a reward ensemble and save the checkpoint"),
    "train-policy": (_cmd_train_policy, "train the policy network by truncated off-policy gradient"),
    "optimize": (_cmd_optimize, "multi-start gradient ascent for every state in --data"),
    "evaluate": (_cmd_evaluate, "report predicted and true TP of logged, policy and GA actions"),
    "pipeline": (_cmd_pipeline, "run every stage and write a report directory"),
    "beta-sweep": (_cmd_beta_sweep, "GA+policy over the configured penalty grid"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellbandit", description="Offline CP optimization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="desk", help="JSON config path or builtin name (desk, paper-scale, smoke)")
        p.add_argument("--seed", type=int, help="master seed; overrides the config")
        p.add_argument("--out", help="output directory; overrides the config")
        if name not in ("gen-data", "pipeline"):
            p.add_argument("--data", help="dataset CSV")
        if name == "train-reward":
            p.add_argument("--role", choices=sorted(ROLES), default="optimization")
        if name in ("optimize", "beta-sweep"):
            p.add_argument("--reward", help="optimization ensemble checkpoint")
        if name in ("evaluate", "beta-sweep"):
            p.add_argument("--eval-reward", help="evaluation ensemble checkpoint")
        if name in ("optimize", "evaluate", "beta-sweep"):
            p.add_argument("--policy", help="policy checkpoint")
        if name == "evaluate":
            p.add_argument("--results", help="ga_results.csv from the optimize command")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    stage = args.command
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out or cfg.output_dir)
        written = fn(cfg, args, out)
    except Exception as exc:
        if isinstance(exc, PipelineError):
            stage, exc = exc.stage, exc.cause
        err = {"status": "error", "command": args.command, "stage": stage, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out), "files": written}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
