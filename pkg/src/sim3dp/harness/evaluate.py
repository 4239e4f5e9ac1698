"""Closed-loop evaluation with receding-horizon execution.

Episodes of one setup run as a batch: every re-plan samples a T_p-step action
chunk for all unfinished episodes in one network call, then executes the first
T_a actions of each. Resets and sampling noise are keyed by the episode index
alone, so a given episode seed starts from the same catalog pose under every
setup and reproduces exactly across runs.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from ..diffusion import NoiseStream, diffusion_shapes, make_schedule, sample
from ..geom import Rng
from ..policy import Observation
from ..pusht.env import observe, reset, reward, step
from ..pusht.expert import scripted_expert
from .checkpoint import list_checkpoints
from .config import RunConfig


class DiffusionPolicy:
    """Samples action chunks from a trained noise-prediction network."""

    def __init__(self, net, cfg: RunConfig):
        self.net = net
        self.cfg = cfg
        self.schedule = make_schedule(cfg.diffusion.K, cfg.diffusion.schedule)

    def plan(self, obs: Observation, rngs: list, states: list) -> np.ndarray:
        d = self.cfg.diffusion
        sv, ss = diffusion_shapes(self.net)
        n = self.schedule.K - 1 if d.sampler == "ddpm" else 0
        noise = NoiseStream.draw(rngs, sv, ss, n)
        A = sample(self.net, obs, self.schedule, d.sampler, d.ddim_steps, noise=noise)
        return A.v[:, :, 0, :]


class ExpertPolicy:
    """The scripted expert behind the policy interface (one action per plan)."""

    def __init__(self, cfg: RunConfig):
        self.task = cfg.task_config()

    def plan(self, obs: Observation, rngs: list, states: list) -> np.ndarray:
        return np.array([scripted_expert(s, self.task) for s in states])[:, None, :]


def _window(frames: list, To: int):
    last = frames[-To:]
    last = [last[0]] * (To - len(last)) + last
    return np.array([f.cloud for f in last]), np.array([f.pos for f in last])


def run_episodes(policy, cfg: RunConfig, setup: str, episodes, eval_seed: int = 0) -> list:
    """Roll out ``policy`` on the given episode indices; returns one record per episode."""
    task = cfg.task_config()
    To, Ta = cfg.model.obs_horizon, cfg.model.action_horizon
    root = Rng(eval_seed)
    episodes = list(episodes)
    t0 = time.perf_counter()
    states = [reset(task, setup, root.spawn("episode", e), cfg.task.n_demos) for e in episodes]
    frames = [[observe(s, task)] for s in states]
    lengths = [0] * len(episodes)
    replans = [0] * len(episodes)
    active = [True] * len(episodes)
    while any(active):
        idx = [i for i, a in enumerate(active) if a]
        wins = [_window(frames[i], To) for i in idx]
        obs = Observation(np.array([w[0] for w in wins]), np.array([w[1] for w in wins]),
                          np.zeros((len(idx), To, 0, 3)), np.zeros((len(idx), To, 0)))
        rngs = [root.spawn("policy", episodes[i], replans[i]) for i in idx]
        chunk = policy.plan(obs, rngs, [states[i] for i in idx])
        for j, i in enumerate(idx):
            replans[i] += 1
            for a in chunk[j, :Ta]:
                states[i], done = step(states[i], a, task)
                frames[i].append(observe(states[i], task))
                lengths[i] += 1
                if done or lengths[i] >= task.max_steps:
                    active[i] = False
                    break
    wall = time.perf_counter() - t0
    return [{"setup": setup, "episode": int(e), "eval_seed": int(eval_seed),
             "final_reward": reward(s, task), "length": n, "wall_time": wall / len(episodes)}
            for e, s, n in zip(episodes, states, lengths)]


def evaluate_checkpoint(path, setups, episodes: int, eval_seed: int = 0) -> list:
    from .train import load_policy_net
    net, cfg, epoch = load_policy_net(path)
    policy = DiffusionPolicy(net, cfg)
    records = []
    for setup in setups:
        for rec in run_episodes(policy, cfg, setup, range(episodes), eval_seed):
            rec.update({"variant": cfg.variant, "run_seed": cfg.seed, "n_demos": cfg.task.n_demos,
                        "checkpoint": Path(path).name, "epoch": epoch, "config": cfg.to_dict()})
            records.append(rec)
    return records


def evaluate_run(out_dir, setups, episodes: int, last: int, eval_seed: int = 0,
                 metrics_path=None) -> list:
    """Evaluate the last ``last`` checkpoints of a run and append their records."""
    ckpts = list_checkpoints(out_dir)[-last:]
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    records = []
    for c in ckpts:
        records += evaluate_checkpoint(c, setups, episodes, eval_seed)
    if metrics_path is not None:
        append_metrics(records, metrics_path)
    return records


def append_metrics(records: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path) -> list:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
        except json.JSONDecodeError:
            raise ValueError(f"{path}:{n}: malformed metrics record") from None
        if not isinstance(r, dict) or "setup" not in r or "final_reward" not in r:
            raise ValueError(f"{path}:{n}: record lacks setup/final_reward")
        out.append(r)
    return out


def summarize(records: list) -> dict:
    """Mean and std of final reward per setup."""
    by = {}
    for r in records:
        by.setdefault(r["setup"], []).append(r["final_reward"])
    return {s: (float(np.mean(v)), float(np.std(v)), len(v)) for s, v in by.items()}
