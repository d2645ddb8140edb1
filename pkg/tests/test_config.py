from pathlib import Path

import pytest

from fedper.config import load_config, parse_config
from fedper.errors import ConfigError

GOOD = """\
# comment
[federation]
C = 0.5
E = 2
B = 8
F = 3
lr = 0.01
alpha = 0.2
regimes = rnd,PFDL
seeds = 4,5

[cohort]
n_test_clients = 2
sessions_per_client = 2-3
positive_rate_range = 0.1,0.3

[protocol]
n_per_class = 10
balanced_test = yes

[model]
filters = 4,8,8
dtype = float32

[output]
dir = out/x
"""


def test_parse_good():
    cfg = parse_config(GOOD)
    f = cfg.federation
    assert (f.client_fraction, f.local_epochs, f.batch_size, f.finetune_epochs) == (0.5, 2, 8, 3)
    assert (f.lr, f.finetune_decay) == (0.01, 0.2)
    assert cfg.regimes == ("RND", "PFDL") and cfg.seeds == (4, 5)
    assert cfg.cohort.n_test_clients == 2 and cfg.cohort.positive_rate_range == (0.1, 0.3)
    assert cfg.protocol.n_per_class == 10 and cfg.protocol.balanced_test is True
    assert cfg.model.filters == (4, 8, 8) and cfg.model.dtype == "float32"
    assert cfg.out_dir == Path("out/x") and len(cfg.digest) == 64


def test_defaults_from_empty_file():
    cfg = parse_config("")
    assert cfg.federation.client_fraction == 1.0 and cfg.federation.lr == 1e-4
    assert cfg.cohort.n_pretrain_clients == 13 and cfg.cohort.n_test_clients == 12
    assert cfg.protocol.n_per_class == 200 and cfg.model.filters == (32, 32, 64)


@pytest.mark.parametrize("text, line", [
    ("[federation]\nC = 2\n", 2),
    ("[federation]\nE = one\n", 2),
    ("[federation]\n\nbogus = 1\n", 3),
    ("[nope]\n", 1),
    ("C = 1\n", 1),
    ("[federation]\nC\n", 2),
    ("[federation]\nC = 1\nC = 1\n", 3),
    ("[federation]\nregimes = RND,XX\n", 2),
    ("[cohort]\nn_test_clients = 0\n", 2),
    ("[protocol]\nbalanced_test = maybe\n", 2),
    ("[output]\nwhere = x\n", 2),
])
def test_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.cfg")
    assert exc.value.line == line
    assert str(exc.value).startswith(f"run.cfg:{line}:")


def test_corpus_relative_to_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[cohort]\ncorpus = data\nn_pretrain_clients = 3\n")
    cfg = load_config(p)
    assert cfg.corpus == tmp_path / "data" and cfg.n_pretrain_clients == 3


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_overrides():
    cfg = parse_config(GOOD).with_overrides(seeds=[9], out_dir="elsewhere")
    assert cfg.seeds == (9,) and cfg.out_dir == Path("elsewhere")
