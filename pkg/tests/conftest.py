"""Shared fixtures: expert demos and a small trained equivariant policy."""
import sys

import pytest

from sim3dp.harness.config import RunConfig
from sim3dp.harness.train import train
from sim3dp.pusht.demos import generate_demos

TINY_MODEL = {"model.encoder_hidden": 8, "model.down_dims": [8, 16], "model.cond_vectors": 8,
              "model.cond_hidden": 32, "model.gram_cap": 4}


def tiny_config(tmp, variant="equibot", **over) -> RunConfig:
    base = {"variant": variant, "out": str(tmp), "optim.lr": 1e-3, "optim.batch_size": 32,
            "optim.epochs": 2, "optim.checkpoint_every": 1, "task.n_demos": 3, **TINY_MODEL}
    base.update(over)
    return RunConfig().with_overrides(**base)


@pytest.fixture(scope="session")
def demos25():
    return generate_demos(25)


@pytest.fixture(scope="session")
def toy_model(demos25, tmp_path_factory):
    """Equibot trained briefly on five demos: enough for a non-trivial action distribution."""
    cfg = tiny_config(tmp_path_factory.mktemp("toy"), **{"optim.epochs": 30, "optim.checkpoint_every": 30,
                                                         "task.n_demos": 5})
    result = train(cfg, demos=demos25[:5], log=lambda *_: None)
    return result.net, cfg


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(acceptance.VERDICTS):
        terminalreporter.write_line(line)
