"""Experiment harness: reproduce the synthetic sparse-optimality study, audit
the exact oracles and bounds on random instances, grid-search hyperparameters,
and run single training jobs.

Configuration is INI (sections mirror the run config; unknown sections or keys
are rejected), results are CSV. Exit codes: 0 success, 1 a run or check
failed, 2 configuration error. AENT_LAB_WORKERS overrides --workers.
"""

from __future__ import annotations

import argparse
import configparser
import copy
import csv
import hashlib
import io
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Optional, Sequence

import numpy as np

from .aent_trainer import (
    VARIANTS,
    CoefficientScheduler,
    TrainConfig,
    TrainingAborted,
    train,
    variant_config,
)
from .softmax_policy import ClampConfig, save_checkpoint
from .surrogates import ClipConfig
from .theory_audit import (
    InequalityCheck,
    audit_instance,
    exact_policy_gradient,
    finite_difference_gradient,
    gradient_relative_error,
    random_instance,
)
from .token_mdp import (
    EnumerationLimitError,
    SyntheticTaskSpec,
    build_synthetic_task,
    exact_dataset_value,
)


class ConfigError(Exception):
    """Bad configuration file or override; mapped to exit code 2."""


CURVE_COLUMNS = (
    "step",
    "return_mean",
    "entropy_token_mean",
    "entropy_traj_sum",
    "clamped_entropy",
    "lambda",
    "grad_norm",
)

AUDIT_COLUMNS = ("instance_id", "inequality_name", "lhs", "rhs", "slack", "pass")

RUNS_COLUMNS = (
    "variant",
    "n_optimal",
    "seed_index",
    "run_seed",
    "final_return",
    "auc",
    "wall_time_s",
)

SUMMARY_COLUMNS = (
    "variant",
    "n_optimal",
    "n_seeds",
    "final_return_mean",
    "final_return_stderr",
    "auc_mean",
    "auc_stderr",
)

DEFAULTS: dict[str, dict[str, str]] = {
    "task": {
        "action_count": "100000",
        "n_suboptimal": "500",
        "reward_optimal": "1.0",
        "reward_suboptimal": "0.2",
        "reward_other": "0.0",
        "horizon": "1",
        "elevated_init_mean": "1.0",
        "base_init_mean": "0.0",
        "init_stddev": "1.0",
        # Elevated-init actions are drawn outside the rewarded sets: with
        # |A| = 1e5 a uniform random draw of 500 actions is suboptimal-free
        # with probability ~0.98 per action, and the top-probability retained
        # sets then start out suboptimal-free, which is what separates the
        # study's variants (see README and the run notes).
        "elevated_set": "disjoint",
    },
    "train": {
        "global_steps": "2000",
        "queries_per_batch": "1",
        "rollouts_per_query": "64",
        "mini_epochs": "1",
        "learn_rate": "0.02",
        # Fixed-step ascent moves each logit by lr*|adv|/batch <= 2.5e-3 per
        # hit at these constants, which cannot reorder a 1e5-way softmax in
        # 2000 steps; the sign-normalized optimizer is what makes the study's
        # collapse-vs-explore dynamics visible at this budget.
        "optimizer": "adaptive_moments",
        "normalization": "mean_std",
        "aggregation": "token_mean",
        "freeze_clamped_set": "false",
        "h_smoothing": "0.0",
    },
    "clip": {"eps_low": "0.2", "eps_high": "0.2"},
    "clamp": {"p": "0.98", "mode": "count"},
    "scheduler": {
        "lam": "0.0008",
        "beta": "0.0008",
        "h_low": "0.5",
        "h_high": "4.0",
        "lambda_low": "0.0",
        "lambda_high": "0.004",
        "warmup_steps": "0",
    },
    "run": {
        "variant": "clamped",
        "n_optimal": "5",
        "n_seeds": "20",
        "base_seed": "0",
        "out_dir": "runs",
        "final_window": "50",
    },
    "matrix": {
        "variants": "none,entropy,clamped,clamped_adaptive",
        "n_optimal": "15,10,5,1",
    },
}

# Per-cell constants for the synthetic study: the full-entropy coefficient
# and the clamp fraction depend on how many optimal actions the task has; the
# clamped-bonus coefficient does not.
ENTROPY_CELL_LAM = {15: 5e-4, 10: 5e-4, 5: 5e-4, 1: 7e-4}
CLAMPED_CELL_LAM = 8e-4
CELL_CLAMP_P = {15: 0.98, 10: 0.98, 5: 0.985, 1: 0.997}


# -- config plumbing -----------------------------------------------------------


def load_config(path: Optional[str]) -> dict[str, dict[str, str]]:
    """Defaults overlaid with an optional INI file; unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in cfg[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = value
    return cfg


def apply_override(cfg: dict[str, dict[str, str]], dotted: str, value: str) -> None:
    """Set section.key = value, validating the key exists."""
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in cfg or key not in cfg[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    cfg[section][key] = value


def _parse(cfg: dict[str, dict[str, str]], section: str, key: str, kind):
    raw = cfg[section][key]
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"config value {section}.{key} = {raw!r} is not a valid {kind.__name__}"
        ) from None


def build_task_spec(cfg: dict, n_optimal: int) -> SyntheticTaskSpec:
    t = lambda key, kind: _parse(cfg, "task", key, kind)
    try:
        return SyntheticTaskSpec(
            n_optimal=int(n_optimal),
            action_count=t("action_count", int),
            n_suboptimal=t("n_suboptimal", int),
            reward_optimal=t("reward_optimal", float),
            reward_suboptimal=t("reward_suboptimal", float),
            reward_other=t("reward_other", float),
            horizon=t("horizon", int),
            elevated_init_mean=t("elevated_init_mean", float),
            base_init_mean=t("base_init_mean", float),
            init_stddev=t("init_stddev", float),
            elevated_set=cfg["task"]["elevated_set"],
        )
    except ValueError as exc:
        raise ConfigError(f"bad task spec: {exc}") from None


def build_train_config(cfg: dict, seed: int, steps: Optional[int] = None) -> TrainConfig:
    try:
        scheduler = CoefficientScheduler(
            lam=_parse(cfg, "scheduler", "lam", float),
            beta=_parse(cfg, "scheduler", "beta", float),
            h_low=_parse(cfg, "scheduler", "h_low", float),
            h_high=_parse(cfg, "scheduler", "h_high", float),
            lambda_low=_parse(cfg, "scheduler", "lambda_low", float),
            lambda_high=_parse(cfg, "scheduler", "lambda_high", float),
            warmup_steps=_parse(cfg, "scheduler", "warmup_steps", int),
        )
        return TrainConfig(
            global_steps=steps if steps is not None
            else _parse(cfg, "train", "global_steps", int),
            queries_per_batch=_parse(cfg, "train", "queries_per_batch", int),
            rollouts_per_query=_parse(cfg, "train", "rollouts_per_query", int),
            mini_epochs=_parse(cfg, "train", "mini_epochs", int),
            learn_rate=_parse(cfg, "train", "learn_rate", float),
            optimizer=cfg["train"]["optimizer"],
            normalization=cfg["train"]["normalization"],
            aggregation=cfg["train"]["aggregation"],
            clip=ClipConfig(
                eps_low=_parse(cfg, "clip", "eps_low", float),
                eps_high=_parse(cfg, "clip", "eps_high", float),
            ),
            clamp=ClampConfig(
                p=_parse(cfg, "clamp", "p", float), mode=cfg["clamp"]["mode"]
            ),
            scheduler=scheduler,
            seed=int(seed),
            freeze_clamped_set=_parse(cfg, "train", "freeze_clamped_set", bool),
            h_smoothing=_parse(cfg, "train", "h_smoothing", float),
        )
    except ValueError as exc:
        raise ConfigError(f"bad train config: {exc}") from None


def cell_overrides(cfg: dict, variant: str, n_optimal: int) -> dict:
    """Per-cell study constants: the bonus coefficient and clamp fraction."""
    out = copy.deepcopy(cfg)
    if variant == "entropy":
        lam = ENTROPY_CELL_LAM.get(n_optimal)
        if lam is not None:
            out["scheduler"]["lam"] = repr(lam)
    elif variant in ("clamped", "clamped_adaptive"):
        if variant == "clamped":
            out["scheduler"]["lam"] = repr(CLAMPED_CELL_LAM)
        p = CELL_CLAMP_P.get(n_optimal)
        if p is not None:
            out["clamp"]["p"] = repr(p)
    return out


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from a sha256 of the joined parts (never the
    process-salted builtin hash)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def config_text(cfg: dict[str, dict[str, str]]) -> str:
    parser = configparser.ConfigParser()
    parser.read_dict(cfg)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- single runs ----------------------------------------------------------------


def run_cell_seed(payload: dict) -> dict:
    """Execute one (variant, n_optimal, seed_index) run. Top-level so worker
    processes can receive it; the payload carries only primitives."""
    cfg = payload["cfg"]
    variant = payload["variant"]
    n_optimal = payload["n_optimal"]
    seed_index = payload["seed_index"]
    base_seed = payload["base_seed"]
    run_seed = base_seed ^ stable_seed("run", variant, n_optimal, seed_index)
    task_seed = base_seed ^ stable_seed("task", n_optimal, seed_index)
    out = {
        "variant": variant,
        "n_optimal": n_optimal,
        "seed_index": seed_index,
        "run_seed": run_seed,
        "ok": False,
    }
    t0 = time.perf_counter()
    try:
        spec = build_task_spec(cfg, n_optimal)
        mdp, policy0 = build_synthetic_task(spec, task_seed)
        tcfg = variant_config(variant, build_train_config(cfg, run_seed))
        policy, records = train(mdp, policy0, tcfg)
    except TrainingAborted as exc:
        out["error"] = str(exc)
        return out
    returns = np.asarray([r.mean_return for r in records])
    window = min(len(records), max(1, _parse(cfg, "run", "final_window", int)))
    try:
        final = exact_dataset_value(mdp, policy)
    except EnumerationLimitError:
        final = float(returns[-window:].mean())
    out.update(
        ok=True,
        final_return=float(final),
        auc=float(returns.mean()),
        wall_time_s=time.perf_counter() - t0,
        curve=[
            (
                r.step,
                r.mean_return,
                r.entropy_token_mean,
                r.entropy_traj_sum,
                r.clamped_entropy,
                r.lam,
                r.grad_norm,
            )
            for r in records
        ],
    )
    return out


def resolve_workers(requested: Optional[int]) -> int:
    env = os.environ.get("AENT_LAB_WORKERS")
    if env is not None:
        try:
            requested = int(env)
        except ValueError:
            raise ConfigError(f"AENT_LAB_WORKERS={env!r} is not an integer") from None
    if requested is None:
        requested = os.cpu_count() or 1
    if requested < 1:
        raise ConfigError("worker count must be at least 1")
    return requested


def execute_runs(payloads: list[dict], workers: int, echo=print) -> list[dict]:
    """Run payloads (in a pool when workers > 1), reporting as they finish.
    Results come back in payload order."""
    results: list[Optional[dict]] = [None] * len(payloads)

    def note(i: int, res: dict) -> None:
        results[i] = res
        if res["ok"]:
            echo(
                f"  [{sum(r is not None for r in results)}/{len(payloads)}] "
                f"{res['variant']} n_opt={res['n_optimal']} "
                f"seed={res['seed_index']} final={res['final_return']:.4f}"
            )
        else:
            echo(
                f"  FAILED {res['variant']} n_opt={res['n_optimal']} "
                f"seed={res['seed_index']}: {res.get('error', 'unknown')}"
            )

    if workers == 1:
        for i, p in enumerate(payloads):
            note(i, run_cell_seed(p))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_cell_seed, p): i for i, p in enumerate(payloads)}
            for future in as_completed(futures):
                note(futures[future], future.result())
    return [r for r in results if r is not None]


# -- output files ----------------------------------------------------------------


def write_csv(path: str, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)


def curve_path(out_dir: str, variant: str, n_optimal: int, seed_index: int) -> str:
    return os.path.join(
        out_dir, "curves", f"{variant}_nopt{n_optimal}_seed{seed_index}.csv"
    )


def write_run_outputs(out_dir: str, results: list[dict]) -> None:
    runs_rows = []
    for res in results:
        if not res["ok"]:
            continue
        write_csv(
            curve_path(out_dir, res["variant"], res["n_optimal"], res["seed_index"]),
            CURVE_COLUMNS,
            [[repr(v) for v in row] for row in res["curve"]],
        )
        runs_rows.append(
            [
                res["variant"],
                res["n_optimal"],
                res["seed_index"],
                res["run_seed"],
                repr(res["final_return"]),
                repr(res["auc"]),
                f"{res['wall_time_s']:.3f}",
            ]
        )
    write_csv(os.path.join(out_dir, "runs.csv"), RUNS_COLUMNS, runs_rows)


def summarize(results: list[dict]) -> list[list]:
    cells: dict[tuple[str, int], list[dict]] = {}
    for res in results:
        if res["ok"]:
            cells.setdefault((res["variant"], res["n_optimal"]), []).append(res)
    rows = []
    for (variant, n_opt), group in sorted(cells.items()):
        finals = np.asarray([g["final_return"] for g in group])
        aucs = np.asarray([g["auc"] for g in group])

        def stderr(x: np.ndarray) -> float:
            return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0

        rows.append(
            [
                variant,
                n_opt,
                len(group),
                repr(float(finals.mean())),
                repr(stderr(finals)),
                repr(float(aucs.mean())),
                repr(stderr(aucs)),
            ]
        )
    return rows


# -- subcommands -----------------------------------------------------------------


def cmd_reproduce_toy(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg["train"]["global_steps"] = str(args.steps)
    if args.seed is not None:
        cfg["run"]["base_seed"] = str(args.seed)
    if args.out is not None:
        cfg["run"]["out_dir"] = args.out
    out_dir = cfg["run"]["out_dir"]
    base_seed = _parse(cfg, "run", "base_seed", int)
    n_seeds = _parse(cfg, "run", "n_seeds", int)
    variants = [v.strip() for v in cfg["matrix"]["variants"].split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r} in matrix")
    try:
        n_opts = [int(x) for x in cfg["matrix"]["n_optimal"].split(",") if x.strip()]
    except ValueError:
        raise ConfigError("matrix.n_optimal must be a comma list of integers") from None
    payloads = []
    for variant in variants:
        for n_opt in n_opts:
            cell_cfg = cell_overrides(cfg, variant, n_opt)
            for seed_index in range(n_seeds):
                payloads.append(
                    {
                        "cfg": cell_cfg,
                        "variant": variant,
                        "n_optimal": n_opt,
                        "seed_index": seed_index,
                        "base_seed": base_seed,
                    }
                )
    workers = resolve_workers(args.workers)
    print(
        f"reproduce-toy: {len(payloads)} runs "
        f"({len(variants)} variants x {len(n_opts)} sizes x {n_seeds} seeds), "
        f"{workers} worker(s)"
    )
    results = execute_runs(payloads, workers)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as f:
        f.write(config_text(cfg))
    write_run_outputs(out_dir, results)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summarize(results))
    failures = [r for r in results if not r["ok"]]
    print(f"wrote {out_dir}/summary.csv ({len(results) - len(failures)} runs ok, "
          f"{len(failures)} failed)")
    return 1 if failures else 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg["train"]["global_steps"] = str(args.steps)
    if args.seed is not None:
        cfg["run"]["base_seed"] = str(args.seed)
    if args.out is not None:
        cfg["run"]["out_dir"] = args.out
    if args.variant is not None:
        cfg["run"]["variant"] = args.variant
    if args.n_optimal is not None:
        cfg["run"]["n_optimal"] = str(args.n_optimal)
    variant = cfg["run"]["variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    n_optimal = _parse(cfg, "run", "n_optimal", int)
    out_dir = cfg["run"]["out_dir"]
    base_seed = _parse(cfg, "run", "base_seed", int)
    cell_cfg = cell_overrides(cfg, variant, n_optimal)
    run_seed = base_seed ^ stable_seed("run", variant, n_optimal, 0)
    task_seed = base_seed ^ stable_seed("task", n_optimal, 0)
    spec = build_task_spec(cell_cfg, n_optimal)
    mdp, policy0 = build_synthetic_task(spec, task_seed)
    tcfg = variant_config(variant, build_train_config(cell_cfg, run_seed))
    try:
        policy, records = train(mdp, policy0, tcfg)
    except TrainingAborted as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    returns = np.asarray([r.mean_return for r in records])
    window = min(len(records), max(1, _parse(cfg, "run", "final_window", int)))
    try:
        final = exact_dataset_value(mdp, policy)
    except EnumerationLimitError:
        final = float(returns[-window:].mean())
    os.makedirs(out_dir, exist_ok=True)
    write_csv(
        os.path.join(out_dir, "curve.csv"),
        CURVE_COLUMNS,
        [
            [repr(v) for v in (r.step, r.mean_return, r.entropy_token_mean,
                               r.entropy_traj_sum, r.clamped_entropy, r.lam,
                               r.grad_norm)]
            for r in records
        ],
    )
    save_checkpoint(policy, os.path.join(out_dir, "final_logits.bin"))
    with open(os.path.join(out_dir, "config.ini"), "w") as f:
        f.write(config_text(cfg))
    print(
        f"final_return={final:.6f} auc={returns.mean():.6f} "
        f"curve={out_dir}/curve.csv"
    )
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    any_failed = False
    vacuous = 0
    t0 = time.perf_counter()
    for instance_id in range(args.instances):
        mdp, policy = random_instance(rng)
        checks = audit_instance(
            mdp, policy, lam=args.lam, rng=rng, include_fd=not args.skip_fd
        )
        if args.corrupt_gradient:
            analytic = exact_policy_gradient(mdp, policy, 0.0)
            state = analytic.states()[0]
            analytic.row(state)[0] += 1e-3
            fd = finite_difference_gradient(mdp, policy, 0.0)
            checks.append(
                InequalityCheck(
                    "corrupted_gradient_control",
                    gradient_relative_error(analytic, fd),
                    1e-5,
                    tolerance=0.0,
                )
            )
        for check in checks:
            vacuous += check.vacuous
            any_failed = any_failed or not check.passed
            rows.append(
                [
                    instance_id,
                    check.name,
                    repr(check.lhs),
                    repr(check.rhs),
                    repr(check.slack),
                    check.passed,
                ]
            )
    write_csv(args.out, AUDIT_COLUMNS, rows)
    n_failed = sum(1 for r in rows if r[5] is False)
    print(
        f"audit: {args.instances} instances, {len(rows)} checks, "
        f"{n_failed} failed, {vacuous} vacuous, "
        f"{time.perf_counter() - t0:.1f}s -> {args.out}"
    )
    return 1 if any_failed else 0


def cmd_grid_search(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["base_seed"] = str(args.seed)
    if args.out is not None:
        cfg["run"]["out_dir"] = args.out
    if args.steps is not None:
        cfg["train"]["global_steps"] = str(args.steps)
    out_dir = cfg["run"]["out_dir"]
    variant = cfg["run"]["variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    n_optimal = _parse(cfg, "run", "n_optimal", int)
    n_seeds = _parse(cfg, "run", "n_seeds", int)
    base_seed = _parse(cfg, "run", "base_seed", int)
    # --param section.key=v1,v2 ; the grid is the cartesian product
    axes: list[tuple[str, list[str]]] = []
    for spec_str in args.param or []:
        if "=" not in spec_str:
            raise ConfigError(f"--param {spec_str!r} must look like key=v1,v2")
        dotted, values = spec_str.split("=", 1)
        choices = [v.strip() for v in values.split(",") if v.strip()]
        if not choices:
            raise ConfigError(f"--param {dotted!r} has no values")
        apply_override(cfg, dotted, choices[0])  # validates the key
        axes.append((dotted, choices))
    points: list[dict[str, str]] = [{}]
    for dotted, choices in axes:
        points = [dict(p, **{dotted: c}) for p in points for c in choices]
    workers = resolve_workers(args.workers)
    print(f"grid-search: {len(points)} points x {n_seeds} seeds, {workers} worker(s)")
    scored = []
    any_failed = False
    for point in points:
        point_cfg = cell_overrides(cfg, variant, n_optimal)
        for dotted, value in point.items():
            apply_override(point_cfg, dotted, value)
        payloads = [
            {
                "cfg": point_cfg,
                "variant": variant,
                "n_optimal": n_optimal,
                "seed_index": i,
                "base_seed": base_seed,
            }
            for i in range(n_seeds)
        ]
        results = execute_runs(payloads, workers)
        ok = [r for r in results if r["ok"]]
        any_failed = any_failed or len(ok) < len(results)
        key = "final_return" if args.objective == "final" else "auc"
        values = np.asarray([r[key] for r in ok]) if ok else np.asarray([math.nan])
        stderr = float(values.std(ddof=1) / math.sqrt(len(values))) \
            if len(values) > 1 else 0.0
        scored.append((point, float(values.mean()), stderr, len(ok)))
    scored.sort(key=lambda item: -item[1])
    param_names = [dotted for dotted, _ in axes]
    rows = [
        [rank + 1]
        + [point.get(name, "") for name in param_names]
        + [repr(mean), repr(stderr), n_ok]
        for rank, (point, mean, stderr, n_ok) in enumerate(scored)
    ]
    write_csv(
        os.path.join(out_dir, "grid.csv"),
        ["rank"] + param_names + [f"{args.objective}_mean", f"{args.objective}_stderr", "n_ok"],
        rows,
    )
    if scored:
        best = scored[0]
        print(f"best: {best[0]} -> {args.objective}_mean={best[1]:.6f} (n={best[3]})")
    return 1 if any_failed else 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aent-lab",
        description="Clamped-entropy policy-gradient laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser(
        "reproduce-toy", help="run the full synthetic-task variant matrix"
    )
    toy.add_argument("--config", help="INI config file")
    toy.add_argument("--seed", type=int, help="base seed (run.base_seed)")
    toy.add_argument("--out", help="output directory (run.out_dir)")
    toy.add_argument("--workers", type=int, help="worker processes")
    toy.add_argument("--steps", type=int, help="global steps per run")
    toy.set_defaults(func=cmd_reproduce_toy)

    tr = sub.add_parser("train", help="run one training job")
    tr.add_argument("--config", help="INI config file")
    tr.add_argument("--variant", choices=VARIANTS)
    tr.add_argument("--n-optimal", type=int, dest="n_optimal")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out")
    tr.add_argument("--steps", type=int)
    tr.set_defaults(func=cmd_train)

    audit = sub.add_parser(
        "audit", help="check oracles and bounds on random instances"
    )
    audit.add_argument("--instances", type=int, default=100)
    audit.add_argument("--seed", type=int, default=0)
    audit.add_argument("--lam", type=float, default=0.1)
    audit.add_argument("--out", default="audit.csv")
    audit.add_argument("--skip-fd", action="store_true",
                       help="skip the finite-difference oracle checks")
    audit.add_argument("--corrupt-gradient", action="store_true",
                       help=argparse.SUPPRESS)  # negative control for the harness
    audit.set_defaults(func=cmd_audit)

    grid = sub.add_parser("grid-search", help="rank hyperparameter settings")
    grid.add_argument("--config", help="INI config file")
    grid.add_argument("--param", action="append",
                      help="section.key=v1,v2 (repeatable; cartesian product)")
    grid.add_argument("--objective", choices=("final", "auc"), default="final")
    grid.add_argument("--seed", type=int)
    grid.add_argument("--out")
    grid.add_argument("--workers", type=int)
    grid.add_argument("--steps", type=int)
    grid.set_defaults(func=cmd_grid_search)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
