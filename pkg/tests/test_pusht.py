import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from sim3dp.geom import Rng, Sim3, rot_z
from sim3dp.pusht.demos import (augment, draw_augmentation, generate_demos, load_demo, record_demo,
                                save_demo)
from sim3dp.pusht.env import (SETUPS, PushTConfig, PushTState, block_outline, body_outline,
                              catalog_state, inside_convex, load_catalog, observe, reset, reward,
                              signed_distance, step, _world_rects)
from sim3dp.pusht.expert import rollout_expert, scripted_expert

CFG = PushTConfig()
GOAL = CFG.goal


def at_goal(**kw) -> PushTState:
    base = dict(block_pos=GOAL[:2], block_yaw=GOAL[2], agent_pos=(130.0, 100.0), goal_pos=GOAL[:2],
                goal_yaw=GOAL[2])
    base.update(kw)
    return PushTState(**base)


def random_pose(r: Rng) -> PushTState:
    """Block near the goal with a random scene scale and stretch, so overlaps vary."""
    s = float(r.spawn("s").uniform(low=1.0, high=2.0))
    a = float(r.spawn("a").uniform(low=1.0, high=1.33))
    stretch = np.array([math.sqrt(a), 1 / math.sqrt(a)])
    off = r.spawn("p").normal(2, scale=40.0 * s)
    yaw = GOAL[2] + float(r.spawn("y").uniform(low=-1.0, high=1.0))
    return at_goal(block_pos=np.asarray(GOAL[:2]) + off, block_yaw=yaw, scale=s, stretch=stretch)


# ------------------------------------------------------------------ resets

def test_reset_deterministic_and_original_uses_catalog():
    catalog = load_catalog()
    for setup in SETUPS:
        a, b = reset(CFG, setup, Rng(3)), reset(CFG, setup, Rng(3))
        assert a.to_dict() == b.to_dict()
    s = reset(CFG, "Original", Rng(4), n_poses=25)
    assert any(s.to_dict() == catalog_state(p, CFG).to_dict() for p in catalog[:25])


def test_uniform_scale_setup_distribution():
    scales = np.array([reset(CFG, "R+Su", Rng(5).spawn(i)).scale for i in range(1000)])
    assert scales.min() >= 1.0 and scales.max() <= 2.0
    assert stats.kstest(scales, "uniform", args=(1.0, 1.0)).pvalue > 0.01


def test_nonuniform_setup_aspect_bound():
    aspects = []
    for i in range(1000):
        st = reset(CFG, "R+Sn", Rng(6).spawn(i)).stretch
        aspects.append(st.max() / st.min())
        assert abs(st.prod() - 1.0) < 1e-12
    aspects = np.array(aspects)
    assert aspects.max() <= 1.33 + 1e-12
    assert aspects.min() >= 1.0 and aspects.max() > 1.3


def test_position_setup_stays_in_central_region():
    lo, hi = 0.1 * CFG.workspace, 0.9 * CFG.workspace
    for i in range(200):
        g = reset(CFG, "R+Sn+P", Rng(7).spawn(i)).goal_pos
        assert np.all((g[:2] >= lo) & (g[:2] <= hi)) and g[2] == 0.0


def test_reset_states_lie_on_ground_plane():
    for setup in SETUPS:
        s = reset(CFG, setup, Rng(8))
        assert s.block_pos[2] == s.agent_pos[2] == s.goal_pos[2] == 0.0


def test_unknown_setup():
    with pytest.raises(ValueError, match="unknown setup"):
        reset(CFG, "R+X", Rng(0))


# ---------------------------------------------------------------- dynamics

def test_holding_position_without_contact_is_a_no_op():
    s = at_goal(agent_pos=(130.0, 100.0))
    s2, _ = step(s, s.agent_pos, CFG)
    assert s2.to_dict() == s.to_dict()


def test_target_height_is_ignored():
    s = at_goal(agent_pos=(130.0, 100.0))
    a, _ = step(s, (135.0, 100.0, 3.0), CFG)
    b, _ = step(s, (135.0, 100.0, 0.0), CFG)
    assert a.to_dict() == b.to_dict() and a.agent_pos[2] == 0.0


def test_agent_speed_is_capped():
    s = at_goal(agent_pos=(130.0, 100.0))
    s2, _ = step(s, (400.0, 100.0), CFG)
    assert abs(np.linalg.norm(s2.agent_pos - s.agent_pos) - CFG.max_speed) < 1e-12


def test_symmetric_stem_push_translates_without_turning():
    # upright T (stem pointing -y) at the origin; agent below the stem, pushing straight up
    s = PushTState(block_pos=(0.0, 0.0), block_yaw=0.0, agent_pos=(0.0, -150.0), goal_pos=(0.0, 0.0),
                   goal_yaw=0.0)
    moved = False
    for _ in range(20):
        s2, _ = step(s, s.agent_pos + np.array([0.0, 12.0, 0.0]), CFG)
        assert abs(s2.block_yaw) < 1e-6
        assert abs(s2.block_pos[0]) < 1e-9
        moved |= s2.block_pos[1] > s.block_pos[1]
        assert s2.block_pos[1] >= s.block_pos[1]
        s = s2
    assert moved and s.block_pos[1] > 50.0


def test_random_rollout_audit():
    """Block stays near the arena and moves only when the agent touches it."""
    r = Rng(9)
    s = reset(CFG, "R+Su", r.spawn("reset"))
    radius, vmax = CFG.agent_radius * s.scale, CFG.max_speed * s.scale
    extent = float(np.linalg.norm(body_outline(CFG), axis=1).max()) * s.scale
    bound = CFG.arena_radius * s.scale + 2 * radius + extent
    contacts = 0
    for t in range(500):
        target = s.block_pos + r.spawn(t).normal(3, scale=80.0 * s.scale)
        s2, _ = step(s, target, CFG)
        assert np.linalg.norm(s2.block_pos - s2.arena_center) <= bound
        assert s2.block_pos[2] == 0.0 and s2.agent_pos[2] == 0.0
        changed = not (np.array_equal(s2.block_pos, s.block_pos) and s2.block_yaw == s.block_yaw)
        # a push needs the agent disk to reach the block within this step's travel
        _, d_before = signed_distance(s.agent_pos[:2], s, CFG)
        if changed:
            contacts += 1
            assert d_before <= radius + vmax
        s = s2
    assert contacts > 20


def test_environment_determinism():
    def run():
        r = Rng(10)
        s = reset(CFG, "R+Sn+P", r.spawn("reset"))
        out = []
        for t in range(100):
            s, _ = step(s, s.block_pos + r.spawn(t).normal(3, scale=60.0), CFG)
            out.append(s.to_dict())
        return out
    assert run() == run()


# ------------------------------------------------------------------ reward

def test_reward_at_goal_and_disjoint():
    assert reward(at_goal(), CFG) == 1.0
    far = at_goal(block_pos=(GOAL[0] + 300.0, GOAL[1]))
    assert reward(far, CFG) == 0.0
    near = at_goal(block_pos=(GOAL[0] + 1.0, GOAL[1]))
    assert 0.9 < reward(near, CFG) < 1.0
    turned = at_goal(block_yaw=GOAL[2] + 0.01)
    assert reward(turned, CFG) < 1.0


def mc_overlap(state: PushTState, n: int, rng: Rng) -> float:
    block = _world_rects(state.block_pos, state.block_yaw, state, CFG)
    goal = _world_rects(state.goal_pos, state.goal_yaw, state, CFG)
    lo, hi = block.reshape(-1, 2).min(0), block.reshape(-1, 2).max(0)
    P = lo + rng.uniform((n, 2)) * (hi - lo)

    def inside(rects):
        m = np.zeros(n, dtype=bool)
        for rect in rects:
            inner = np.ones(n, dtype=bool)
            for a, b in zip(rect, np.roll(rect, -1, axis=0)):
                inner &= (b[0] - a[0]) * (P[:, 1] - a[1]) - (b[1] - a[1]) * (P[:, 0] - a[0]) >= 0
            m |= inner
        return m

    in_block = inside(block)
    return float((in_block & inside(goal)).sum() / in_block.sum())


def test_reward_matches_monte_carlo_area():
    root = Rng(11)
    worst = 0.0
    for i in range(100):
        s = random_pose(root.spawn("pose", i))
        worst = max(worst, abs(reward(s, CFG) - mc_overlap(s, 1_000_000, root.spawn("mc", i))))
    assert worst < 0.005


def test_reward_in_unit_interval():
    root = Rng(12)
    for i in range(300):
        assert 0.0 <= reward(random_pose(root.spawn(i)), CFG) <= 1.0


# ------------------------------------------------------------- observation

def test_observe_hand_computed_corners():
    s = PushTState(block_pos=(0.0, 0.0), block_yaw=0.0, agent_pos=(200.0, 0.0), goal_pos=(0.0, 0.0),
                   goal_yaw=0.0)
    # bar 120 x 30 on top of a 30 x 90 stem; the joint line sits where the
    # area centroid lands on the origin: 3600 (y0 + 15) + 2700 (y0 - 45) = 0
    y0 = 67500.0 / 6300.0
    want = [(-15, y0 - 90), (15, y0 - 90), (15, y0), (60, y0), (60, y0 + 30), (-60, y0 + 30),
            (-60, y0), (-15, y0)]
    frame = observe(s, CFG)
    assert frame.cloud.shape == (8, 3)
    np.testing.assert_allclose(frame.cloud[:, :2], want, atol=1e-12)
    assert np.all(frame.cloud[:, 2] == 0.0)
    np.testing.assert_array_equal(frame.pos[0], [200.0, 0.0, 0.0])


def test_observe_equivariance():
    root = Rng(13)
    for i in range(50):
        r = root.spawn(i)
        s = reset(CFG, SETUPS[i % 4], r.spawn("reset"))
        yaw = float(r.uniform(low=-math.pi, high=math.pi))
        t = np.zeros(3)
        t[:2] = r.normal(2, scale=100.0)
        T = Sim3(rot_z(yaw), t, float(r.uniform(low=0.5, high=2.0)))
        a, b = observe(s, CFG), observe(s.transformed(T), CFG)
        np.testing.assert_allclose(b.cloud, T.apply(a.cloud), atol=1e-9)
        np.testing.assert_allclose(b.pos, T.apply(a.pos), atol=1e-9)
        assert b.cloud.shape == (8, 3)


def test_transformed_state_rejects_tilt():
    T = Sim3(rot_z(0.3) @ np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float), np.zeros(3), 1.0)
    with pytest.raises(ValueError, match="ground plane"):
        at_goal().transformed(T)


# ------------------------------------------------------------------ expert

@pytest.mark.parametrize("index", range(100))
def test_expert_solves_catalog_pose(index):
    states, _ = rollout_expert(catalog_state(load_catalog()[index], CFG), CFG, max_steps=300)
    assert reward(states[-1], CFG) >= 0.9


def test_expert_holds_at_goal():
    s = at_goal()
    a = scripted_expert(s, CFG)
    assert np.linalg.norm(a - s.agent_pos) <= CFG.max_speed
    s2, done = step(s, a, CFG)
    assert done and np.array_equal(s2.block_pos, s.block_pos) and s2.block_yaw == s.block_yaw


def test_expert_deterministic():
    for i in range(5):
        s = reset(CFG, "R+Sn+P", Rng(14).spawn(i))
        np.testing.assert_array_equal(scripted_expert(s, CFG), scripted_expert(s, CFG))


def test_expert_targets_stay_on_ground_plane():
    s = catalog_state(load_catalog()[0], CFG)
    for _ in range(50):
        a = scripted_expert(s, CFG)
        assert a.shape == (3,) and a[2] == 0.0
        s, _ = step(s, a, CFG)


# ------------------------------------------------------------ augmentation

@pytest.fixture(scope="module")
def demo():
    return record_demo(catalog_state(load_catalog()[2], CFG), CFG)


def test_identity_augmentation_is_a_no_op(demo):
    same = demo.transformed(Sim3.identity())
    for f in ("cloud", "pos", "action"):
        np.testing.assert_array_equal(getattr(same, f), getattr(demo, f))
    assert [s.to_dict() for s in same.states] == [s.to_dict() for s in demo.states]


def test_augmented_demo_replays(demo):
    for i in range(3):
        aug = augment(demo, Rng(15).spawn(i), CFG)
        for t in range(len(aug)):
            nxt, _ = step(aug.states[t], aug.action[t], CFG)
            want = aug.states[t + 1]
            assert np.abs(nxt.block_pos - want.block_pos).max() < 1e-6
            assert abs(nxt.block_yaw - want.block_yaw) < 1e-6
            assert np.abs(nxt.agent_pos - want.agent_pos).max() < 1e-6
        # observations are those of the transformed states
        np.testing.assert_allclose(aug.cloud[5], observe(aug.states[5], CFG).cloud, atol=1e-9)


def test_augmentation_ranges_and_offset_normality():
    center = np.array([CFG.workspace / 2, CFG.workspace / 2, 0.0])
    offsets, scales = [], []
    for i in range(2000):
        T = draw_augmentation(Rng(16).spawn(i), CFG)
        offsets.append((T.apply(center) - center)[:2])
        scales.append(T.s)
        assert abs(T.R[2, 2] - 1.0) < 1e-12
    offsets, scales = np.array(offsets), np.array(scales)
    assert scales.min() >= 0.5 and scales.max() <= 1.5
    for axis in range(2):
        assert stats.kstest(offsets[:, axis] / 51.2, "norm").pvalue > 0.01


# ------------------------------------------------------------------- files

def test_demo_round_trip(demo, tmp_path):
    p = tmp_path / "d.jsonl"
    save_demo(demo, p, CFG, 2, 16)
    back = load_demo(p, CFG, 2, 16)
    for f in ("cloud", "pos", "action"):
        np.testing.assert_array_equal(getattr(back, f), getattr(demo, f))
    assert [s.to_dict() for s in back.states] == [s.to_dict() for s in demo.states]
    assert back.meta == demo.meta
    save_demo(back, tmp_path / "e.jsonl", CFG, 2, 16)
    assert (tmp_path / "e.jsonl").read_bytes() == p.read_bytes()


def test_demo_header_checks(demo, tmp_path):
    p = tmp_path / "d.jsonl"
    save_demo(demo, p, CFG, 2, 16)
    with pytest.raises(ValueError, match="different task config"):
        load_demo(p, replace(CFG, max_speed=10.0))
    with pytest.raises(ValueError, match="obs_horizon"):
        load_demo(p, CFG, 3, 16)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "other"}\n')
    with pytest.raises(ValueError, match="not a version"):
        load_demo(bad)


def test_generate_demos_limits():
    with pytest.raises(ValueError, match="catalog holds"):
        generate_demos(len(load_catalog()) + 1)


def test_catalog_poses_are_clear_of_the_goal():
    for p in load_catalog():
        s = catalog_state(p, CFG)
        assert reward(s, CFG) <= 0.5
        assert signed_distance(s.agent_pos[:2], s, CFG)[1] >= 2 * CFG.agent_radius
        assert not any(inside_convex(s.agent_pos[:2], r) for r in _world_rects(s.block_pos, s.block_yaw, s, CFG))
        assert block_outline(s, CFG).shape == (8, 2)
