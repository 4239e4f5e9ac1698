"""Random observations, actions and small policy networks shared by the tests."""
import numpy as np

from sim3dp.baseline import BaselineNet
from sim3dp.diffusion import fit_normalizer
from sim3dp.encoder import EncoderConfig
from sim3dp.geom import Rng
from sim3dp.policy import (Action, ActionLayout, EquiBotNet, ObsLayout, Observation, PolicyConfig,
                           with_random_head)

GENERIC = ActionLayout(("point", "vector"), n_dir=1, n_scalar=2)
GENERIC_OBS = ObsLayout(n_points=10, n_pos=2, n_dir=1, n_scalar=3)


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_obs(rng, B, layout: ObsLayout, To=2):
    cloud = rng.normal((B, 1, layout.n_points, 3), scale=40.0) + rng.normal((B, 1, 1, 3), scale=100.0)
    cloud = cloud + rng.normal((B, To, layout.n_points, 3), scale=2.0)
    pos = cloud.mean(axis=2, keepdims=True) + rng.normal((B, To, layout.n_pos, 3), scale=30.0)
    dirs = unit(rng.normal((B, To, layout.n_dir, 3)))
    return Observation(cloud, pos, dirs, rng.normal((B, To, layout.n_scalar)))


def random_action(rng, B, layout: ActionLayout, Tp=16, center=None):
    v = rng.normal((B, Tp, layout.n_vec, 3), scale=30.0)
    if center is not None:
        for i, k in enumerate(layout.vector_kinds):
            if k == "point":
                v[:, :, i] += center[:, None]
    return Action(v, unit(rng.normal((B, Tp, layout.n_dir, 3))), rng.normal((B, Tp, layout.n_scalar)))


def make_net(layout=GENERIC, obs_layout=GENERIC_OBS, seed=0, equivariant=True, random_head=True):
    cfg = PolicyConfig(down_dims=(8, 16), cond_vectors=6, cond_hidden=16, gram_cap=4,
                       encoder=EncoderConfig(hidden_channels=8, inv_cap=4),
                       action_layout=layout, obs_layout=obs_layout)
    r = Rng(seed)
    obs = random_obs(r.spawn("data"), 32, obs_layout)
    act = random_action(r.spawn("act"), 32, layout, center=obs.cloud[:, -1].mean(1))
    norm = fit_normalizer(obs, act, layout)
    net = (EquiBotNet if equivariant else BaselineNet)(cfg, r.spawn("net"), norm)
    return with_random_head(net, r.spawn("head")) if random_head else net
