import logging
import re

import numpy as np
import pytest

from cmr.dataset import load_dataset
from cmr.encoders import HyperParams, init_params
from cmr.pipeline import ExperimentConfig, make_bank
from cmr.synthetic import SyntheticSpec, generate, write_dataset

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = CRITERION.search(getattr(rep, "nodeid", ""))
            if m and rep.when in ("call", "setup"):
                key = int(m.group(1))
                if outcome != "passed" or key not in rows:
                    rows[key] = ("PASS" if outcome == "passed" else "FAIL", m.group(2))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(rows):
        status, name = rows[key]
        terminalreporter.write_line(f"criterion {key:>2}: {status}  {name.replace('_', ' ')}")


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="cmr")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic inductive dataset on disk, shared read-only."""
    spec = SyntheticSpec(num_types=3, entities_per_type=10, groups_per_type=2, num_relations=3,
                         visual_dim=8, unseen_fraction=0.3)
    path = write_dataset(generate(spec, 7), tmp_path_factory.mktemp("tiny"), spec, 7)
    return load_dataset(path)


@pytest.fixture(scope="session")
def tiny_hp():
    return HyperParams(embed_dim=8, prefix_len=2, desc_tokens=2, hidden=16)


@pytest.fixture(scope="session")
def tiny_cfg(tiny_hp):
    from cmr.featurize import FeaturizerConfig

    return ExperimentConfig(featurizer=FeaturizerConfig(hash_dim=32), hyper=tiny_hp)


@pytest.fixture(scope="session")
def tiny_bank(tiny_dataset, tiny_cfg):
    return make_bank(tiny_dataset, tiny_cfg)


@pytest.fixture(scope="session")
def tiny_params(tiny_bank, tiny_hp):
    params = init_params(tiny_hp, tiny_bank.text_dim, tiny_bank.visual_dim, seed=3)
    # unit-gain text weights so random embeddings are well spread
    rng = np.random.default_rng(3)
    params["q.w1"] = rng.normal(0, 0.5, params["q.w1"].shape)
    params["desc.w"] = rng.normal(0, 0.5, params["desc.w"].shape)
    return params
