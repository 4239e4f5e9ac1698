"""Demo generation and the training loop.

All randomness in an epoch comes from streams keyed by (run seed, epoch), so
resuming from a checkpoint replays exactly the batches, augmentations and
noise draws an uninterrupted run would have used.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..baseline import BaselineNet
from ..diffusion import Normalizer, fit_normalizer, make_schedule, training_loss
from ..geom import Rng
from ..policy import Action, EquiBotNet, Observation
from ..pusht.demos import (dataset_windows, draw_augmentation, generate_demos, load_demo,
                           save_demo)
from .checkpoint import Checkpoint, checkpoint_path, load_checkpoint, save_checkpoint
from .config import RunConfig
from .optim import Adam, zero_grads

NORMALIZER_AUG_COPIES = 4


def build_net(cfg: RunConfig, normalizer: Normalizer | None = None):
    cls = EquiBotNet if cfg.variant == "equibot" else BaselineNet
    return cls(cfg.policy_config(), Rng(cfg.seed).spawn("init"), normalizer)


# ---------------------------------------------------------------- demos

def gen_demos(cfg: RunConfig, out_dir, log=print) -> list:
    """Write ``cfg.task.n_demos`` expert episodes plus a manifest; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = cfg.task_config()
    demos = generate_demos(cfg.task.n_demos, task, control_every=cfg.task.control_every)
    paths = []
    for i, d in enumerate(demos):
        d.meta["seed"] = cfg.seed
        p = out / f"demo_{i:03d}.jsonl"
        save_demo(d, p, task, cfg.model.obs_horizon, cfg.model.pred_horizon)
        paths.append(p)
    rewards = [d.meta["final_reward"] for d in demos]
    lengths = [len(d) for d in demos]
    manifest = {"n_demos": len(demos), "files": [p.name for p in paths], "task": task.to_dict(),
                "obs_horizon": cfg.model.obs_horizon, "pred_horizon": cfg.model.pred_horizon,
                "final_rewards": rewards, "lengths": lengths}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    log(f"wrote {len(demos)} demos to {out}: length {min(lengths)}-{max(lengths)} "
        f"(mean {np.mean(lengths):.1f}), final reward min {min(rewards):.3f} "
        f"mean {np.mean(rewards):.3f}")
    return paths


def load_demos(cfg: RunConfig, demo_dir=None) -> list:
    d = Path(demo_dir or cfg.task.demo_dir)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no demo manifest in {d}; run gen-demos first")
    manifest = json.loads(manifest_path.read_text())
    if manifest["n_demos"] < cfg.task.n_demos:
        raise ValueError(f"{d} holds {manifest['n_demos']} demos, config wants {cfg.task.n_demos}")
    task = cfg.task_config()
    return [load_demo(d / name, task, cfg.model.obs_horizon, cfg.model.pred_horizon)
            for name in manifest["files"][:cfg.task.n_demos]]


# ---------------------------------------------------------------- augmentation

def augment_windows(obs: Observation, act: Action, rng: Rng, cfg: RunConfig):
    """One independent random similarity per training sample."""
    task = cfg.task_config()
    layout = cfg.policy_config().action_layout
    outs_o, outs_a = [], []
    for i in range(obs.batch_size):
        T = draw_augmentation(rng.spawn(i), task)
        outs_o.append(obs.take(slice(i, i + 1)).transform(T))
        a = Action(act.v[i:i + 1], act.d[i:i + 1], act.s[i:i + 1])
        outs_a.append(a.transform(T, layout))
    return (Observation.stack(outs_o),
            Action(*(np.concatenate([getattr(a, f) for a in outs_a]) for f in ("v", "d", "s"))))


def fit_run_normalizer(cfg: RunConfig, obs: Observation, act: Action) -> Normalizer:
    """Dataset statistics; the augmented variant also sees augmented copies."""
    layout = cfg.policy_config().action_layout
    if cfg.augment:
        rng = Rng(cfg.seed).spawn("normalizer-aug")
        parts = [(obs, act)] + [augment_windows(obs, act, rng.spawn(c), cfg)
                                for c in range(NORMALIZER_AUG_COPIES)]
        obs = Observation.stack([p[0] for p in parts])
        act = Action(*(np.concatenate([getattr(p[1], f) for p in parts]) for f in ("v", "d", "s")))
    return fit_normalizer(obs, act, layout)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    net: object
    normalizer: Normalizer
    history: list
    checkpoints: list


def _snapshot(cfg, net, normalizer, opt, epoch, history) -> Checkpoint:
    return Checkpoint(cfg.to_dict(), {k: p.data.copy() for k, p in net.parameters().items()},
                      normalizer.to_dict(), epoch, Rng(cfg.seed).state(),
                      {"t": opt.t, "m": dict(opt.m), "v": dict(opt.v)}, list(history))


def train(cfg: RunConfig, demos: list | None = None, resume: str | Path | None = None,
          stop_epoch: int | None = None, log=print) -> TrainResult:
    """Train the configured variant; checkpoints go to ``cfg.out/checkpoints``.

    ``resume`` continues from a checkpoint; ``stop_epoch`` ends early (as an
    interruption would) without changing the schedule of the full run.
    """
    demos = load_demos(cfg) if demos is None else demos
    if not demos:
        raise ValueError("training needs at least one demo")
    for d in demos:
        if d.cloud.shape[1] != cfg.policy_config().obs_layout.n_points:
            raise ValueError("demo cloud size does not match the observation layout")
    m = cfg.model
    obs_all, act_all = dataset_windows(demos, m.obs_horizon, m.pred_horizon)
    N = obs_all.batch_size
    B = cfg.optim.batch_size
    steps_per_epoch = math.ceil(N / B)
    total = steps_per_epoch * cfg.optim.epochs

    if resume is not None:
        ck = load_checkpoint(resume)
        if RunConfig.from_dict(ck.config).to_dict() != cfg.to_dict():
            raise ValueError("checkpoint was written by a different run config")
        normalizer = Normalizer.from_dict(ck.normalizer)
        net = build_net(cfg, normalizer)
        net.load_state_dict(ck.params)
        start, history = ck.epoch, list(ck.history)
    else:
        normalizer = fit_run_normalizer(cfg, obs_all, act_all)
        net = build_net(cfg, normalizer)
        start, history = 0, []
    params = net.parameters()
    opt = Adam(params, cfg.optim.lr, total, tuple(cfg.optim.betas), cfg.optim.eps,
               cfg.optim.warmup_steps)
    if resume is not None and ck.optimizer:
        opt.load_state(ck.optimizer)
    schedule = make_schedule(cfg.diffusion.K, cfg.diffusion.schedule)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    loss_log = out / "loss.jsonl"
    kept = []
    if loss_log.exists():
        kept = [x for x in loss_log.read_text().splitlines() if json.loads(x)["epoch"] <= start]
    loss_log.write_text("".join(x + "\n" for x in kept))
    saved = []
    end = cfg.optim.epochs if stop_epoch is None else min(stop_epoch, cfg.optim.epochs)
    root = Rng(cfg.seed).spawn("train")
    for epoch in range(start, end):
        t0 = time.perf_counter()
        r = root.spawn(epoch)
        perm = r.spawn("perm").permutation(N)
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * B:(b + 1) * B]
            ob = obs_all.take(idx)
            ac = Action(act_all.v[idx], act_all.d[idx], act_all.s[idx])
            if cfg.augment:
                ob, ac = augment_windows(ob, ac, r.spawn("aug", b), cfg)
            with ad.Tape() as tape:
                loss = training_loss(net, ob, ac, schedule, r.spawn("noise", b))
            ad.backward(tape, loss)
            opt.step()
            zero_grads(params)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        done = epoch + 1
        with open(loss_log, "a") as f:
            f.write(json.dumps({"epoch": done, "loss": history[-1], "lr": opt.current_lr()}) + "\n")
        if done % cfg.optim.checkpoint_every == 0 or done == cfg.optim.epochs:
            path = checkpoint_path(out, done)
            save_checkpoint(_snapshot(cfg, net, normalizer, opt, done, history), path)
            saved.append(path)
            log(f"epoch {done}: loss {history[-1]:.5f} ({time.perf_counter() - t0:.1f}s/epoch) -> {path}")
    return TrainResult(net, normalizer, history, saved)


def load_policy_net(path):
    """(net, RunConfig, epoch) from a checkpoint file."""
    ck = load_checkpoint(path)
    cfg = RunConfig.from_dict(ck.config)
    net = build_net(cfg, Normalizer.from_dict(ck.normalizer))
    net.load_state_dict(ck.params)
    return net, cfg, ck.epoch

