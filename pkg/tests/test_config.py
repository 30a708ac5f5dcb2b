import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsiseg import config as cfgmod


def test_defaults_round_trip():
    cfg = cfgmod.ExperimentConfig()
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_empty_file_is_all_defaults():
    assert cfgmod.loads("") == cfgmod.ExperimentConfig()


def test_partial_override():
    cfg = cfgmod.loads("training:\n  epochs: 3\nschedule:\n  k: 2\n")
    assert cfg.training.epochs == 3 and cfg.schedule.k == 2.0
    assert cfg.training.lr == cfgmod.TrainingSection().lr


@pytest.mark.parametrize("text", [
    "bogus: 1\n",
    "training:\n  epoch: 3\n",
    "data:\n  domains:\n    - {domain_id: 0, colour: 1}\n",
])
def test_unknown_keys_rejected(text):
    with pytest.raises(cfgmod.ConfigError, match="unknown"):
        cfgmod.loads(text)


@pytest.mark.parametrize("text", [
    "training:\n  epochs: three\n",
    "training:\n  lr: true\n",
    "seed: 1.5\n",
    "method: hsi_plus\n",
    "schedule:\n  lambda0: 0\n",
    "schedule:\n  decay: cosine\n",
    "schedule:\n  eta: 2\n",
    "data:\n  num_stages: 4\n",
    "metrics:\n  hd_percentile: 0\n",
    "[1, 2]\n",
    "a: [\n",
])
def test_bad_values_rejected(text):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.loads(text)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), epochs=st.integers(1, 50), lr=st.floats(1e-5, 1.0),
       k=st.floats(0.0, 10.0))
def test_round_trip_property(seed, epochs, lr, k):
    cfg = cfgmod.ExperimentConfig(seed=seed)
    cfg.training.epochs, cfg.training.lr, cfg.schedule.k = epochs, lr, k
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_exponent_literals_accepted():
    assert cfgmod.loads("training:\n  lr: 1e-3\n").training.lr == 1e-3
