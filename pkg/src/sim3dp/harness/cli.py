"""``sim3dp`` command line: gen-demos, train, eval, equicheck, plot, experiment."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..pusht.env import SETUPS
from .config import VARIANTS, RunConfig, load_config


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {"seed": getattr(args, "seed", None)}
    if getattr(args, "variant", None):
        over["variant"] = args.variant
    return cfg.with_overrides(**over)


def cmd_gen_demos(args) -> int:
    from .train import gen_demos
    cfg = _config(args)
    if args.n is not None:
        cfg = cfg.with_overrides(**{"task.n_demos": args.n})
    out = Path(args.out or cfg.task.demo_dir)
    try:
        gen_demos(cfg, out)
    except OSError as e:
        print(f"gen-demos: cannot write to {out}: {e}", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    from .train import train
    cfg = _config(args)
    over = {"out": args.out, "optim.epochs": args.epochs, "task.demo_dir": args.demos}
    cfg = cfg.with_overrides(**over)
    result = train(cfg, resume=args.resume)
    print(f"final loss {result.history[-1]:.5f}" if result.history else "nothing to train")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import list_checkpoints
    from .evaluate import append_metrics, evaluate_checkpoint, summarize
    setups = args.setup or list(SETUPS)
    if args.checkpoint:
        ckpts = [Path(args.checkpoint)]
    else:
        ckpts = list_checkpoints(args.run)[-args.last:]
        if not ckpts:
            print(f"eval: no checkpoints under {args.run}", file=sys.stderr)
            return 2
    records = []
    for c in ckpts:
        recs = evaluate_checkpoint(c, setups, args.episodes, args.seed or 0)
        records += recs
    if args.out:
        append_metrics(records, args.out)
    for setup, (m, s, n) in summarize(records).items():
        print(f"{setup:8s} mean {m:.4f} std {s:.4f} over {n} episodes ({len(ckpts)} checkpoint(s))")
    return 0


def cmd_equicheck(args) -> int:
    from .equicheck import format_report, random_init_net, run_equicheck
    if args.checkpoint:
        from .train import load_policy_net
        net, cfg, _ = load_policy_net(args.checkpoint)
        label = f"{cfg.variant} checkpoint {args.checkpoint}"
    else:
        cfg = _config(args)
        net = random_init_net(cfg, args.seed or 0)
        label = f"{cfg.variant} random-init"
    results = run_equicheck(net, args.trials, args.seed or 0, cfg.diffusion.K,
                            args.sampler or cfg.diffusion.sampler, cfg.diffusion.ddim_steps)
    print(format_report(results, label))
    return 0 if all(r.passed for r in results) else 1


def cmd_plot(args) -> int:
    from .evaluate import read_metrics
    from .plots import plot_metrics
    records = []
    for p in args.metrics:
        try:
            records += read_metrics(p)
        except (OSError, ValueError) as e:
            print(f"plot: {e}", file=sys.stderr)
            return 2
    if not records:
        print("plot: no records in the given metrics files", file=sys.stderr)
        return 2
    png, txt = plot_metrics(records, args.out or ".", args.name)
    print(Path(txt).read_text(), end="")
    print(f"wrote {png} and {txt}")
    return 0


def cmd_experiment(args) -> int:
    from . import experiments as ex
    from .plots import plot_metrics
    root = Path(args.out)
    base = _config(args) if args.config else None
    checks = []
    if args.which in ("fig4", "all"):
        recs = ex.run_plan(root, ex.FIG4, base)
        plot_metrics(recs, root, "fig4")
        checks += ex.fig4_checks(recs)
    if args.which in ("data-efficiency", "all"):
        recs = []
        for plan in ex.DATA_EFFICIENCY:
            recs += ex.run_plan(root, plan, base)
        plot_metrics(recs, root, "data_efficiency")
        checks.append(ex.data_efficiency_check(recs))
    for c in checks:
        print(f"{c.name}: {'PASS' if c.passed else 'FAIL'}  {c.detail}")
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim3dp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help=out_help)

    g = sub.add_parser("gen-demos", help="record scripted-expert demos")
    common(g, "demo directory (default: task.demo_dir)")
    g.add_argument("-n", type=int, help="number of demos (default: task.n_demos)")
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="train a policy")
    common(t, "run directory (default: out from config)")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--demos", help="demo directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--run", help="run directory; evaluates its last --last checkpoints")
    e.add_argument("--last", type=int, default=5)
    e.add_argument("--setup", action="append", choices=SETUPS)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, help="evaluation seed")
    e.add_argument("--out", help="metrics file to append to")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("equicheck", help="numerical SIM(3) equivariance audit")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--random-init", action="store_true")
    q.add_argument("--config")
    q.add_argument("--variant", choices=VARIANTS)
    q.add_argument("--trials", type=int, default=100)
    q.add_argument("--sampler", choices=("ddim", "ddpm"))
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_equicheck)

    pl = sub.add_parser("plot", help="bar chart and summary table from metrics files")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--out", help="output directory")
    pl.add_argument("--name", default="rewards")
    pl.set_defaults(func=cmd_plot)

    x = sub.add_parser("experiment", help="multi-seed Push-T experiments with trend checks")
    x.add_argument("which", choices=("fig4", "data-efficiency", "all"))
    x.add_argument("--out", default="results")
    x.add_argument("--config", help="base run config")
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
