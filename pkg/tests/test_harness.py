import json

import numpy as np
import pytest

from sim3dp.harness import train as train_mod
from sim3dp.harness.checkpoint import Checkpoint, list_checkpoints, load_checkpoint, save_checkpoint
from sim3dp.harness.cli import main
from sim3dp.harness.config import RunConfig, load_config, save_config
from sim3dp.harness.equicheck import random_init_net, run_equicheck
from sim3dp.harness.evaluate import (ExpertPolicy, evaluate_checkpoint, read_metrics, run_episodes,
                                     summarize)
from sim3dp.harness.experiments import Plan, data_efficiency_check, fig4_checks, load_records
from sim3dp.harness.plots import aggregate, plot_metrics
from sim3dp.harness.train import build_net, load_policy_net, train
from sim3dp.pusht.demos import save_demo

from conftest import TINY_MODEL, tiny_config


@pytest.fixture(scope="module")
def demo_dir(demos25, tmp_path_factory):
    """Three expert demos written in the on-disk format with a manifest."""
    d = tmp_path_factory.mktemp("demos")
    cfg = RunConfig()
    names = []
    for i, demo in enumerate(demos25[:3]):
        p = d / f"demo_{i:03d}.jsonl"
        save_demo(demo, p, cfg.task_config(), cfg.model.obs_horizon, cfg.model.pred_horizon)
        names.append(p.name)
    (d / "manifest.json").write_text(json.dumps({"n_demos": 3, "files": names}))
    return d


@pytest.fixture(scope="module")
def short_run(demo_dir, tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("run"), **{"task.demo_dir": str(demo_dir)})
    return cfg, train(cfg, log=lambda *_: None)


# ------------------------------------------------------------------ config

def test_config_yaml_round_trip(tmp_path):
    cfg = RunConfig().with_overrides(**{"variant": "dp-baseline+aug", "optim.lr": 3e-4, "seed": 7,
                                        "model.down_dims": [8, 16]})
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.model.down_dims == (8, 16)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"colour": 1})
    with pytest.raises(ValueError, match=r"unknown keys in \[optim\]"):
        RunConfig.from_dict({"optim": {"learning_rate": 1}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("optim: [unclosed\n")
    with pytest.raises(ValueError, match="not valid YAML"):
        load_config(bad)


def test_variants_differ_only_in_name():
    a, b = RunConfig(variant="equibot").to_dict(), RunConfig(variant="dp-baseline").to_dict()
    diff = {k for k in a if a[k] != b[k]}
    assert diff == {"variant"}


def test_baseline_parameter_count_same_order_of_magnitude():
    counts = {}
    for v in ("equibot", "dp-baseline"):
        net = build_net(RunConfig(variant=v))
        counts[v] = sum(p.data.size for p in net.parameters().values())
    ratio = counts["equibot"] / counts["dp-baseline"]
    assert 1 / 3 < ratio < 3, counts
    assert getattr(build_net(RunConfig(variant="equibot")), "equivariant", False)
    assert not getattr(build_net(RunConfig(variant="dp-baseline")), "equivariant", False)


# -------------------------------------------------------------- checkpoint

def test_checkpoint_byte_identity(short_run, tmp_path):
    cfg, result = short_run
    path = result.checkpoints[-1]
    ck = load_checkpoint(path)
    save_checkpoint(ck, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    assert RunConfig.from_dict(ck.config) == cfg
    assert ck.epoch == 2 and len(ck.history) == 2 and ck.optimizer["t"] > 0


def test_checkpoint_rejects_foreign_bytes(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(p)


def test_checkpoint_restores_network(short_run):
    _, result = short_run
    net, _, epoch = load_policy_net(result.checkpoints[-1])
    assert epoch == 2
    for name, p in result.net.parameters().items():
        np.testing.assert_array_equal(net.parameters()[name].data, p.data)
    assert net.normalizer == result.normalizer


def test_resume_matches_uninterrupted(demo_dir, tmp_path):
    over = {"task.demo_dir": str(demo_dir), "optim.epochs": 4, "optim.checkpoint_every": 2}
    full = train(tiny_config(tmp_path / "full", **over), log=lambda *_: None)
    cfg = tiny_config(tmp_path / "split", **over)
    train(cfg, stop_epoch=2, log=lambda *_: None)
    mid = list_checkpoints(cfg.out)[-1]
    assert load_checkpoint(mid).epoch == 2
    resumed = train(cfg, resume=mid, log=lambda *_: None)
    for name, p in full.net.parameters().items():
        np.testing.assert_allclose(resumed.net.parameters()[name].data, p.data, rtol=0, atol=1e-12)
    assert resumed.history == full.history
    loss_lines = (tmp_path / "split" / "loss.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in loss_lines] == [1, 2, 3, 4]


def test_resume_rejects_other_config(short_run, tmp_path):
    cfg, result = short_run
    other = cfg.with_overrides(**{"optim.lr": 5e-4, "out": str(tmp_path)})
    with pytest.raises(ValueError, match="different run config"):
        train(other, resume=result.checkpoints[-1], log=lambda *_: None)


def test_train_rejects_mismatched_demos(demo_dir, tmp_path):
    cfg = tiny_config(tmp_path, **{"task.demo_dir": str(demo_dir), "model.pred_horizon": 12})
    with pytest.raises(ValueError, match="pred_horizon"):
        train(cfg, log=lambda *_: None)
    with pytest.raises(FileNotFoundError, match="gen-demos"):
        train(tiny_config(tmp_path, **{"task.demo_dir": str(tmp_path / "none")}), log=lambda *_: None)


# ------------------------------------------------------------ augmentation

def test_only_aug_variant_augments(demo_dir, tmp_path, monkeypatch):
    calls = []
    real = train_mod.augment_windows

    def spy(obs, act, rng, cfg):
        calls.append(cfg.variant)
        return real(obs, act, rng, cfg)

    monkeypatch.setattr(train_mod, "augment_windows", spy)
    for v in ("equibot", "dp-baseline", "dp-baseline+aug"):
        train(tiny_config(tmp_path / v, v, **{"task.demo_dir": str(demo_dir), "optim.epochs": 1}),
              log=lambda *_: None)
    assert calls and set(calls) == {"dp-baseline+aug"}


def test_augmented_windows_are_similarity_images(demos25):
    from sim3dp.pusht.demos import dataset_windows
    cfg = tiny_config("/tmp", "dp-baseline+aug")
    obs, act = dataset_windows(demos25[:1], 2, 16)
    aug_obs, aug_act = train_mod.augment_windows(obs, act, train_mod.Rng(3), cfg)
    for i in (0, 10, 40):
        # one similarity per window: pairwise distance ratios agree everywhere
        d0 = np.linalg.norm(obs.cloud[i, -1, 0] - obs.cloud[i, -1, 3])
        d1 = np.linalg.norm(aug_obs.cloud[i, -1, 0] - aug_obs.cloud[i, -1, 3])
        a0 = np.linalg.norm(act.v[i, 5, 0] - obs.pos[i, -1, 0])
        a1 = np.linalg.norm(aug_act.v[i, 5, 0] - aug_obs.pos[i, -1, 0])
        assert abs(d1 / d0 - a1 / a0) < 1e-9
        assert np.all(aug_obs.cloud[i, ..., 2] == 0)


# -------------------------------------------------------------------- eval

def test_expert_policy_through_harness():
    cfg = RunConfig()
    recs = run_episodes(ExpertPolicy(cfg), cfg, "Original", range(10))
    assert np.mean([r["final_reward"] for r in recs]) >= 0.9
    assert {r["episode"] for r in recs} == set(range(10))


def test_eval_is_deterministic(short_run):
    _, result = short_run
    a = evaluate_checkpoint(result.checkpoints[-1], ["Original", "R+Sn+P"], 3, eval_seed=5)
    b = evaluate_checkpoint(result.checkpoints[-1], ["Original", "R+Sn+P"], 3, eval_seed=5)
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time"} for r in rs]
    assert strip(a) == strip(b)
    for r in a:
        assert {"setup", "episode", "final_reward", "length", "wall_time", "config"} <= set(r)
        assert 0 <= r["final_reward"] <= 1 and r["length"] <= 300


def test_eval_cli_appends_metrics(short_run, tmp_path, capsys):
    _, result = short_run
    out = tmp_path / "m.jsonl"
    args = ["eval", "--checkpoint", str(result.checkpoints[-1]), "--setup", "R+Su", "--episodes", "2",
            "--out", str(out)]
    assert main(args) == 0
    assert main(args) == 0
    recs = read_metrics(out)
    assert len(recs) == 4 and recs[0]["final_reward"] == recs[2]["final_reward"]
    assert "R+Su" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", "x", "--setup", "Bogus"])


def test_eval_run_mode_uses_last_checkpoints(short_run, capsys):
    cfg, _ = short_run
    assert main(["eval", "--run", cfg.out, "--last", "5", "--setup", "Original", "--episodes", "1"]) == 0
    assert "2 checkpoint(s)" in capsys.readouterr().out


# --------------------------------------------------------------- equicheck

def test_equicheck_random_init_passes_and_baseline_fails():
    eq = run_equicheck(random_init_net(RunConfig().with_overrides(**TINY_MODEL)), trials=5, seed=1)
    assert [r.name for r in eq] == ["encoder", "eps", "sampler"] and all(r.passed for r in eq)
    bl = run_equicheck(random_init_net(RunConfig(variant="dp-baseline").with_overrides(**TINY_MODEL)),
                       trials=5, seed=1)
    assert all(r.max_rel_error > 0.1 for r in bl)


def test_equicheck_cli_exit_codes(capsys):
    assert main(["equicheck", "--random-init", "--trials", "0"]) == 0
    assert "no trials" in capsys.readouterr().out
    assert main(["equicheck", "--random-init", "--variant", "dp-baseline", "--trials", "2"]) == 1
    assert "FAIL" in capsys.readouterr().out


# -------------------------------------------------------------------- plot

def rec(variant, setup, seed, reward, n_demos=25):
    return {"variant": variant, "setup": setup, "run_seed": seed, "final_reward": reward,
            "n_demos": n_demos, "episode": 0}


def test_plot_single_record(tmp_path):
    agg = aggregate([rec("equibot", "Original", 0, 0.7)])
    assert agg == {("equibot", "Original"): (0.7, 0.0, 1)}
    png, txt = plot_metrics([rec("equibot", "Original", 0, 0.7)], tmp_path)
    assert png.exists() and "0.700 ± 0.000 (1)" in txt.read_text()


def test_plot_means_by_hand(tmp_path):
    records = [rec("equibot", "R+Su", 0, 0.2), rec("equibot", "R+Su", 0, 0.4),   # seed 0 mean 0.3
               rec("equibot", "R+Su", 1, 0.5),                                     # seed 1 mean 0.5
               rec("dp-baseline", "R+Su", 0, 0.1)]
    agg = aggregate(records)
    m, sd, n = agg[("equibot", "R+Su")]
    assert abs(m - 0.4) < 1e-15 and abs(sd - 0.1) < 1e-15 and n == 2
    assert agg[("dp-baseline", "R+Su")] == (0.1, 0.0, 1)


def test_plot_outputs_are_byte_identical(tmp_path):
    records = [rec(v, s, seed, 0.1 * seed + 0.05 * i) for i, v in enumerate(("equibot", "dp-baseline"))
               for s in ("Original", "R+Su") for seed in range(3)]
    a = plot_metrics(records, tmp_path / "a")
    b = plot_metrics(records, tmp_path / "b")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_plot_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"setup": "Original"}\n')
    assert main(["plot", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json\n")
    assert main(["plot", str(bad), "--out", str(tmp_path)]) == 2
    assert "malformed" in capsys.readouterr().err
    good = tmp_path / "good.jsonl"
    good.write_text(json.dumps(rec("equibot", "Original", 0, 0.5)) + "\n")
    assert main(["plot", str(good), "--out", str(tmp_path), "--name", "x"]) == 0
    assert (tmp_path / "x.png").exists()


# ------------------------------------------------------------ trend checks

def fig4_records(eq_o, eq_r, dp_r, aug_r):
    out = []
    for s in range(3):
        out += [rec("equibot", "Original", s, eq_o[s]), rec("equibot", "R+Su", s, eq_r[s]),
                rec("dp-baseline", "R+Su", s, dp_r[s]), rec("dp-baseline+aug", "R+Su", s, aug_r[s])]
    return out


def test_fig4_checks_by_hand():
    ok = fig4_checks(fig4_records([0.5] * 3, [0.45, 0.5, 0.41], [0.1, 0.2, 0.3], [0.3] * 3))
    assert [c.passed for c in ok] == [True, True, True]
    bad = fig4_checks(fig4_records([0.5] * 3, [0.39, 0.5, 0.5], [0.1, 0.6, 0.1], [0.05] * 3))
    assert [c.passed for c in bad] == [False, False, False]
    assert not any(c.passed for c in fig4_checks([]))


def test_data_efficiency_check_by_hand():
    records = []
    for s in range(3):
        records += [rec("equibot", "Original", s, 0.6, 50), rec("equibot", "Original", s, 0.5, 10),
                    rec("dp-baseline", "Original", s, 0.6, 50), rec("dp-baseline", "Original", s, 0.2, 10)]
    assert data_efficiency_check(records).passed
    flipped = [dict(r, variant={"equibot": "dp-baseline", "dp-baseline": "equibot"}[r["variant"]])
               for r in records]
    assert not data_efficiency_check(flipped).passed


def test_load_records_reads_metrics_layout(tmp_path):
    (tmp_path / "metrics").mkdir()
    (tmp_path / "metrics" / "equibot-d25-s0.jsonl").write_text(json.dumps(rec("equibot", "R+Su", 0, 0.4)) + "\n")
    got = load_records(tmp_path, Plan(("equibot", "dp-baseline"), 25, (0,), ("R+Su",)))
    assert len(got) == 1 and summarize(got)["R+Su"][0] == 0.4


# -------------------------------------------------------------------- CLI

def test_gen_demos_cli_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-demos", "-n", "3", "--out", str(a)]) == 0
    assert main(["gen-demos", "-n", "3", "--out", str(b)]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["n_demos"] == 3 and len(manifest["files"]) == 3
    assert min(manifest["final_rewards"]) >= 0.9
    for name in manifest["files"] + ["manifest.json"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-demos", "-n", "1", "--out", str(blocker / "sub")]) == 2
    assert "cannot write" in capsys.readouterr().err


def test_train_cli_smoke(demo_dir, tmp_path, capsys):
    cfg = tiny_config(tmp_path / "run", **{"task.demo_dir": str(demo_dir)})
    save_config(cfg, tmp_path / "c.yaml")
    assert main(["train", "--config", str(tmp_path / "c.yaml"), "--epochs", "1"]) == 0
    assert "final loss" in capsys.readouterr().out
    ck = list_checkpoints(tmp_path / "run")
    assert [c.name for c in ck] == ["epoch_00001.ckpt"]
    assert isinstance(load_checkpoint(ck[0]), Checkpoint)
    assert (tmp_path / "run" / "config.yaml").exists()


def test_full_pipeline_determinism(demo_dir, tmp_path):
    import shutil

    def run():
        cfg = tiny_config(tmp_path / "run", **{"task.demo_dir": str(demo_dir), "optim.epochs": 1})
        res = train(cfg, log=lambda *_: None)
        recs = evaluate_checkpoint(res.checkpoints[-1], ["R+Su"], 2)
        out = res.checkpoints[-1].read_bytes(), [(r["final_reward"], r["length"]) for r in recs]
        shutil.rmtree(tmp_path / "run")
        return out
    assert run() == run()
