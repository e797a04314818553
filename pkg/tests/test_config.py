import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from moerlab.config import ConfigError, dump_config, load_config, parse_config
from moerlab.trainer import TrainConfig

configs = st.builds(
    TrainConfig,
    task=st.sampled_from(["char_lm", "synthetic_regression"]),
    d=st.integers(1, 512),
    num_experts=st.just(16),
    top_k=st.integers(1, 16),
    router=st.sampled_from(["softmax", "sigmoid", "tanh", "kern", "kern_no_relu", "kern_after_topk"]),
    eps=st.floats(1e-12, 1e-3),
    lr=st.floats(1e-6, 1.0),
    beta2=st.floats(0.5, 0.9999),
    seeds=st.lists(st.integers(0, 10**6), min_size=1, max_size=4).map(tuple),
    corpus=st.sampled_from(["", "corpus.txt", "/data/books.txt"]),
    name=st.sampled_from(["", "run-a", "kern_16"]),
    checkpoint=st.booleans(),
)


@settings(max_examples=100, deadline=None)
@given(configs)
def test_round_trip_is_lossless(cfg):
    text = dump_config(cfg)
    back = parse_config(text)
    assert back == cfg
    assert dump_config(back) == text


def test_defaults_and_partial_files():
    cfg = parse_config("[model]\nnum_experts = 8\n\n[train]\nseeds = 1, 2,3\n")
    assert cfg.num_experts == 8 and cfg.seeds == (1, 2, 3)
    assert cfg.d == TrainConfig().d
    assert parse_config("") == TrainConfig()


def test_comments_and_booleans():
    cfg = parse_config("[router]\nrouter = softmax  # baseline\nrenormalize_after_topk = yes\n")
    assert cfg.router == "softmax" and cfg.renormalize_after_topk is True


@pytest.mark.parametrize("text,line,needle", [
    ("[model]\nd = 8\nfoo = 1\n", 3, "foo"),
    ("[model]\nsteps = 10\n", 2, "steps"),
    ("[optim]\nlr = 1\n", 1, "optim"),
    ("[train]\n\nlr = fast\n", 3, "lr"),
    ("[router]\nrouter = magic\n", 2, "router"),
    ("[model]\ntop_k = 99\n", 2, "top_k"),
    ("[report]\ncheckpoint = maybe\n", 2, "checkpoint"),
])
def test_errors_name_key_and_line(text, line, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text, source="x.ini")
    assert info.value.line == line
    assert needle in str(info.value)
    assert str(info.value).startswith(f"x.ini:{line}:")


def test_duplicate_key_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("[model]\nd = 8\nd = 9\n")
    assert info.value.line == 3


def test_every_field_has_a_section():
    text = dump_config(TrainConfig())
    for f in dataclasses.fields(TrainConfig):
        assert f"\n{f.name} = " in "\n" + text


def test_load_from_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(dump_config(TrainConfig(name="x")))
    assert load_config(p).name == "x"
