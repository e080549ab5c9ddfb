import json
import math

import numpy as np
import pytest

import lgen


def test_tokenize_round_trip():
    ids = lgen.tokenize("abc=xyz")
    assert ids == [97, 98, 99, 61, 120, 121, 122]
    assert lgen.detokenize(ids) == "abc=xyz"


def test_tasks_and_examples():
    tasks = {t["task_id"]: t for t in lgen.builtin_tasks()}
    assert tasks["reverse"]["family"] == "seen"
    assert tasks["caesar2"]["family"] == "unseen"
    ex = lgen.make_examples("reverse", 5, seed=3)
    assert len(ex) == 5
    assert all(e["target"] == e["input"][::-1] for e in ex)
    assert lgen.make_examples("reverse", 5, seed=3) == ex
    prompt = lgen.format_fewshot("reverse", 2, seed=1)
    assert prompt.count("=") == 2


def test_keeptopk_rows():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(32, 8))
    g = lgen.gates_keeptopk(logits, 3)
    assert g.shape == (32, 8)
    assert np.all((g > 0).sum(axis=1) == 3)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
    top = np.argsort(-logits, axis=1, kind="stable")[:, :3]
    for r in range(32):
        assert set(np.nonzero(g[r])[0]) == set(top[r])
    with pytest.raises(Exception):
        lgen.gates_keeptopk(logits, 0)


def test_cv_and_entropy():
    assert lgen.cv_aux_loss(np.full((4, 8), 0.125)) == 0.0
    hot = np.zeros((4, 8))
    hot[:, 0] = 1.0
    assert lgen.cv_aux_loss(hot, 0.01) == pytest.approx(0.07, rel=1e-6)
    assert lgen.load_entropy([1.0] * 8) == pytest.approx(math.log(8))
    ave, har = lgen.ave_har([0.5, 1.0])
    assert ave == pytest.approx(0.75)
    assert har == pytest.approx(2 / 3)
    assert lgen.compression_ratio(30, 10) == pytest.approx(4.0)


def test_cli_pipeline(tmp_path):
    cfg = {
        "out": str(tmp_path),
        "models": {
            "edge": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32},
            "cloud": {"n_layers": 2, "d_model": 24, "n_heads": 2, "d_ff": 48},
        },
        "pretrain": {
            "edge": {"max_steps": 10, "bare_only_steps": 5, "batch_size": 4, "eval_every": 5, "eval_sequences": 8},
            "cloud": {"max_steps": 10, "bare_only_steps": 5, "batch_size": 4, "eval_every": 5, "eval_sequences": 8},
        },
        "train": {"batch_size": 8, "group_size": 4, "epochs": 1, "n_experts": 4, "lora_r": 2,
                  "lora_alpha": 4.0, "router_hidden": 8, "examples_per_task": 8},
        "eval": {"examples_per_task": 4, "max_new": 8, "kshot": 1},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    for args in (["pretrain"], ["train"], ["eval", "--mode", "specialized"]):
        code, out, err = lgen.run_cli(args + ["--config", str(path), "--seed", "1"])
        assert code == 0, err
    report = json.loads((tmp_path / "eval_specialized.json").read_text())
    assert 0.0 <= report["har"] <= report["ave"] <= 1.0
    assert (tmp_path / "eval_specialized.csv").read_text().startswith("task_id,condition,accuracy,latency_ms")

    tensors, meta = lgen.load_checkpoint(tmp_path / "generator.lgen")
    assert any(name.startswith("pool/") for name in tensors)
    gen = lgen.Generator(tmp_path / "generator.lgen", tmp_path / "edge.lgen")
    g = gen.gates(lgen.format_fewshot("reverse", 1))
    assert g.shape == (2, gen.n_experts)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-6)
    assert isinstance(gen.answer("Reverse the letters.\n", "abc", max_new=4), bytes)

    code, _, err = lgen.run_cli(["eval", "--config", str(path), "--mode", "nonsense"])
    assert code == 2
