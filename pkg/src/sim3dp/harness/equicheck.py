"""Numerical SIM(3) equivariance audits.

Each suite draws one random similarity per trial and compares a network
output computed on transformed inputs against the transformed output
computed on the original inputs. Errors are relative: the norm of the
difference divided by the norm of the expected value, maximized over trials.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffusion import Normalizer, fit_normalizer, make_noise, make_schedule, predict_noise, sample
from ..geom import Rng, random_sim3
from ..policy import Action, Observation, with_random_head
from ..pusht.env import SETUPS, PushTConfig, observe, reset

TOLERANCES = {"encoder": 1e-8, "eps": 1e-8, "sampler": 1e-7}


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tol: float
    trials: int
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel(got: np.ndarray, want: np.ndarray) -> np.ndarray:
    """Per-trial relative error over all but the leading axis.

    A vanishing expected value makes the comparison vacuous, so it counts as
    an infinite error instead of a pass.
    """
    got = got.reshape(len(got), -1)
    want = want.reshape(len(want), -1)
    num = np.linalg.norm(got - want, axis=1)
    den = np.linalg.norm(want, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 1e-300, num / den, np.inf)


def probe_batch(n: int, rng: Rng, obs_horizon: int, pred_horizon: int,
                cfg: PushTConfig = PushTConfig()):
    """Realistic Push-T observation windows and noisy action chunks."""
    clouds, pos, acts = [], [], []
    for i in range(n):
        r = rng.spawn("probe", i)
        setup = SETUPS[i % len(SETUPS)]
        s = reset(cfg, setup, r)
        f = observe(s, cfg)
        jitter = r.normal((obs_horizon, 8, 3), scale=2.0)
        jitter[..., 2] = 0
        clouds.append(f.cloud[None] + jitter)
        pos.append(np.repeat(f.pos[None], obs_horizon, axis=0))
        walk = np.cumsum(r.normal((pred_horizon, 3), scale=8.0 * s.scale), axis=0)
        acts.append(f.pos[0] + walk)
    obs = Observation(np.array(clouds), np.array(pos), np.zeros((n, obs_horizon, 0, 3)),
                      np.zeros((n, obs_horizon, 0)))
    act = Action(np.array(acts)[:, :, None, :], np.zeros((n, pred_horizon, 0, 3)),
                 np.zeros((n, pred_horizon, 0)))
    return obs, act


def probe_normalizer(layout, obs_horizon: int, pred_horizon: int) -> Normalizer:
    """Normalizer fitted on catalog observations, for untrained models."""
    obs, act = probe_batch(64, Rng(0), obs_horizon, pred_horizon)
    return fit_normalizer(obs, act, layout)


def _transforms(n: int, rng: Rng) -> list:
    return [random_sim3(rng.spawn("T", i), scale_range=(0.5, 2.0), translation_std=200.0)
            for i in range(n)]


def _apply_each(Ts: list, x: np.ndarray, kind: str = "point") -> np.ndarray:
    return np.stack([T.apply(x[i], kind) for i, T in enumerate(Ts)])


def _obs_each(Ts, obs: Observation) -> Observation:
    return Observation.stack([obs.take(slice(i, i + 1)).transform(T) for i, T in enumerate(Ts)])


def _act_each(Ts, A: Action, layout, displacement=False) -> Action:
    parts = [Action(A.v[i:i + 1], A.d[i:i + 1], A.s[i:i + 1]).transform(T, layout, displacement)
             for i, T in enumerate(Ts)]
    return Action(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("v", "d", "s")))


def encoder_suite(net, obs: Observation, Ts: list) -> SuiteResult:
    n = len(Ts)
    tobs = _obs_each(Ts, obs)
    if getattr(net, "equivariant", False):
        a, b = net.encoder.encode(obs.cloud[:, -1]), net.encoder.encode(tobs.cloud[:, -1])
        R = np.stack([T.R for T in Ts])
        s = np.array([T.s for T in Ts])
        errs = {
            "rotation_features": _rel(b.theta_R.data, np.einsum("bij,bjc->bic", R, a.theta_R.data)),
            "invariants": _rel(b.theta_inv.data, a.theta_inv.data),
            "centroid": _rel(b.theta_c, _apply_each(Ts, a.theta_c)),
            "scale": _rel(b.theta_s, s * a.theta_s),
        }
    else:
        fa = net.encoder(obs.cloud[:, -1]).data
        fb = net.encoder(tobs.cloud[:, -1]).data
        errs = {"pooled_features": _rel(fb, fa)}
    worst = max(float(e.max()) for e in errs.values())
    return SuiteResult("encoder", worst, TOLERANCES["encoder"], n,
                       {k: float(v.max()) for k, v in errs.items()})


def eps_suite(net, obs: Observation, act: Action, Ts: list, rng: Rng, K: int) -> SuiteResult:
    layout = net.cfg.action_layout
    k = 1 + rng.spawn("k").integers(K, len(Ts))
    e1 = predict_noise(net, obs, act, k)
    e2 = predict_noise(net, _obs_each(Ts, obs), _act_each(Ts, act, layout), k)
    want = _act_each(Ts, e1, layout, displacement=True)
    err = np.maximum(_rel(e2.v, want.v), _rel(e2.s, want.s) if e2.s.size else 0.0)
    return SuiteResult("eps", float(err.max()), TOLERANCES["eps"], len(Ts))


def sampler_suite(net, obs: Observation, Ts: list, rng: Rng, K: int, sampler: str,
                  steps: int) -> SuiteResult:
    layout = net.cfg.action_layout
    schedule = make_schedule(K)
    noise = make_noise(net, schedule, [rng.spawn("chain", i) for i in range(len(Ts))], sampler)
    a1 = sample(net, obs, schedule, sampler, steps, noise=noise)
    R = np.stack([T.R for T in Ts])
    a2 = sample(net, _obs_each(Ts, obs), schedule, sampler, steps, noise=noise.rotated(R))
    want = _act_each(Ts, a1, layout)
    err = np.maximum(_rel(a2.v, want.v), _rel(a2.s, want.s) if a2.s.size else 0.0)
    return SuiteResult("sampler", float(err.max()), TOLERANCES["sampler"], len(Ts),
                       {"sampler": sampler, "steps": steps if sampler == "ddim" else K})


def run_equicheck(net, trials: int, seed: int = 0, K: int = 100, sampler: str = "ddim",
                  steps: int = 8) -> list:
    """All three suites over ``trials`` random transforms; empty for trials = 0."""
    if trials <= 0:
        return []
    rng = Rng(seed)
    cfg = net.cfg
    obs, act = probe_batch(trials, rng.spawn("probe"), cfg.obs_horizon, cfg.pred_horizon)
    Ts = _transforms(trials, rng.spawn("transforms"))
    return [encoder_suite(net, obs, Ts),
            eps_suite(net, obs, act, Ts, rng.spawn("eps"), K),
            sampler_suite(net, obs, Ts, rng.spawn("sampler"), K, sampler, steps)]


def random_init_net(run_cfg, seed: int = 0):
    """Untrained network with its zero-initialized heads filled with noise.

    Zero output heads make every output identically zero, which would pass
    any equivariance check trivially.
    """
    from .train import build_net
    pc = run_cfg.policy_config()
    norm = probe_normalizer(pc.action_layout, pc.obs_horizon, pc.pred_horizon)
    return with_random_head(build_net(run_cfg, norm), Rng(seed).spawn("random-head"))


def format_report(results: list, label: str = "") -> str:
    if not results:
        return f"equicheck {label}: no trials, nothing to check"
    lines = [f"equicheck {label}".rstrip()]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = "".join(f" {k}={v:.3e}" if isinstance(v, float) else f" {k}={v}"
                        for k, v in r.details.items())
        lines.append(f"  {r.name:8s} max_rel_error={r.max_rel_error:.3e} tol={r.tol:.0e} "
                     f"trials={r.trials} {status}{extra}")
    return "\n".join(lines)
