"""Multi-seed Push-T experiments and their trend checks.

Runs are laid out under one root directory:

    <root>/demos/                    expert demos (the largest count needed)
    <root>/runs/<variant>-d<N>-s<seed>/   config, loss log, checkpoints
    <root>/metrics/<variant>-d<N>-s<seed>.jsonl

Every stage is skipped when its output already exists, and an interrupted
training run resumes from its newest checkpoint, so the runner can be
restarted at any point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import list_checkpoints, load_checkpoint
from .config import RunConfig
from .evaluate import append_metrics, evaluate_checkpoint, read_metrics
from .train import gen_demos, train

ALL_SETUPS = ("Original", "R+Su", "R+Sn", "R+Sn+P")


def run_name(variant: str, n_demos: int, seed: int) -> str:
    return f"{variant}-d{n_demos}-s{seed}"


def make_config(root, variant: str, n_demos: int, seed: int, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    root = Path(root)
    return base.with_overrides(**{"variant": variant, "seed": seed,
                                  "out": str(root / "runs" / run_name(variant, n_demos, seed)),
                                  "task.n_demos": n_demos, "task.demo_dir": str(root / "demos")})


def ensure_demos(root, n: int, base: RunConfig | None = None, log=print) -> None:
    d = Path(root) / "demos"
    manifest = d / "manifest.json"
    if manifest.exists() and json.loads(manifest.read_text())["n_demos"] >= n:
        return
    cfg = (base or RunConfig()).with_overrides(**{"task.n_demos": n})
    gen_demos(cfg, d, log)


def ensure_trained(cfg: RunConfig, log=print) -> list:
    ckpts = list_checkpoints(cfg.out)
    if ckpts and load_checkpoint(ckpts[-1]).epoch >= cfg.optim.epochs:
        return ckpts
    resume = ckpts[-1] if ckpts else None
    log(f"training {Path(cfg.out).name}" + (f" (resuming {resume.name})" if resume else ""))
    train(cfg, resume=resume, log=log)
    return list_checkpoints(cfg.out)


def ensure_evaluated(cfg: RunConfig, root, setups, eval_seed: int = 0, log=print) -> list:
    """Metrics for the last ``cfg.eval.last_checkpoints`` checkpoints and all setups."""
    path = Path(root) / "metrics" / f"{Path(cfg.out).name}.jsonl"
    existing = read_metrics(path) if path.exists() else []
    done = {(r["checkpoint"], r["setup"]) for r in existing}
    for ck in list_checkpoints(cfg.out)[-cfg.eval.last_checkpoints:]:
        for setup in setups:
            if (ck.name, setup) in done:
                continue
            recs = evaluate_checkpoint(ck, [setup], cfg.eval.episodes, eval_seed)
            append_metrics(recs, path)
            log(f"  {Path(cfg.out).name} {ck.name} {setup}: "
                f"{np.mean([r['final_reward'] for r in recs]):.3f}")
    return read_metrics(path)


@dataclass(frozen=True)
class Plan:
    variants: tuple
    n_demos: int
    seeds: tuple
    setups: tuple


FIG4 = Plan(("equibot", "dp-baseline", "dp-baseline+aug"), 25, (0, 1, 2), ALL_SETUPS)
DATA_EFFICIENCY = (Plan(("equibot", "dp-baseline"), 10, (0, 1, 2), ("Original",)),
                   Plan(("equibot", "dp-baseline"), 50, (0, 1, 2), ("Original",)))


def run_plan(root, plan: Plan, base: RunConfig | None = None, log=print) -> list:
    ensure_demos(root, plan.n_demos, base, log)
    records = []
    for seed in plan.seeds:
        for variant in plan.variants:
            cfg = make_config(root, variant, plan.n_demos, seed, base)
            ensure_trained(cfg, log)
            records += ensure_evaluated(cfg, root, plan.setups, log=log)
    return records


def load_records(root, plan: Plan) -> list:
    out = []
    for seed in plan.seeds:
        for variant in plan.variants:
            p = Path(root) / "metrics" / f"{run_name(variant, plan.n_demos, seed)}.jsonl"
            if p.exists():
                out += read_metrics(p)
    return out


# ---------------------------------------------------------------- trend checks

def seed_means(records: list, variant: str, setup: str, n_demos: int | None = None) -> dict:
    """{run seed: mean final reward} over episodes and evaluated checkpoints."""
    by = {}
    for r in records:
        if r["variant"] == variant and r["setup"] == setup and (n_demos is None or r["n_demos"] == n_demos):
            by.setdefault(r["run_seed"], []).append(r["final_reward"])
    return {s: float(np.mean(v)) for s, v in sorted(by.items())}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def fig4_checks(records: list, seeds=(0, 1, 2)) -> list:
    eq_o = seed_means(records, "equibot", "Original")
    eq_r = seed_means(records, "equibot", "R+Su")
    dp_r = seed_means(records, "dp-baseline", "R+Su")
    aug_r = seed_means(records, "dp-baseline+aug", "R+Su")
    complete = all(s in d for s in seeds for d in (eq_o, eq_r, dp_r, aug_r))
    if not complete:
        return [Check(n, False, "missing runs") for n in ("6a", "6b", "6c")]
    a = all(eq_r[s] >= 0.8 * eq_o[s] for s in seeds)
    b = all(eq_r[s] > dp_r[s] for s in seeds)
    m_eq, m_dp, m_aug = (float(np.mean([d[s] for s in seeds])) for d in (eq_r, dp_r, aug_r))
    c = m_dp < m_aug < m_eq
    fmt = lambda d: "[" + ", ".join(f"{d[s]:.3f}" for s in seeds) + "]"
    return [
        Check("6a", a, f"equibot R+Su {fmt(eq_r)} vs 0.8 x Original {fmt(eq_o)}"),
        Check("6b", b, f"equibot R+Su {fmt(eq_r)} vs dp-baseline R+Su {fmt(dp_r)}"),
        Check("6c", c, f"R+Su means: dp-baseline {m_dp:.3f} < dp-baseline+aug {m_aug:.3f} < equibot {m_eq:.3f}"),
    ]


def data_efficiency_check(records: list, seeds=(0, 1, 2), few: int = 10, many: int = 50) -> Check:
    drops = {}
    for v in ("equibot", "dp-baseline"):
        lo = seed_means(records, v, "Original", few)
        hi = seed_means(records, v, "Original", many)
        if not all(s in lo and s in hi for s in seeds):
            return Check("7", False, "missing runs")
        drops[v] = (float(np.mean([hi[s] for s in seeds])), float(np.mean([lo[s] for s in seeds])))
    deg = {v: hi - lo for v, (hi, lo) in drops.items()}
    return Check("7", deg["equibot"] < deg["dp-baseline"],
                 f"Original-setup degradation {many}->{few} demos: equibot "
                 f"{drops['equibot'][0]:.3f}->{drops['equibot'][1]:.3f} ({deg['equibot']:+.3f}), "
                 f"dp-baseline {drops['dp-baseline'][0]:.3f}->{drops['dp-baseline'][1]:.3f} "
                 f"({deg['dp-baseline']:+.3f})")
