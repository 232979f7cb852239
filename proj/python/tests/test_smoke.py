import json

import pytest

pisco = pytest.importorskip("pisco")


def test_metrics():
    assert pisco.normalize("An Apple a Day.") == "apple day"
    assert pisco.match_accuracy("It is in  PARIS.", ["Paris"]) == 1
    assert pisco.match_accuracy("forty-two", "42") == 0
    assert pisco.token_f1("red blue", ["green"]) == 0.0
    assert pisco.recall_3gram("xxabcxx", ["abcde"]) == pytest.approx(1 / 3)
    assert pisco.rouge_l("a b c d", "a b c d") == 1.0


def test_synthetic_world_and_retrieval():
    world = pisco.gen_synthetic(entities=12, seed=3)
    assert len(world.documents) == 12
    q = world.questions[0]
    assert q["answers"][0] in world.documents[q["gold_docs"][0]]
    vocab = pisco.synthetic_vocabulary(12)
    assert vocab.detokenize(vocab.tokenize(world.documents[0])) == world.documents[0]
    hits = pisco.bm25_retrieve(world.documents, q["question"], 3, vocab)
    assert hits[0][0] == q["gold_docs"][0]
    assert hits[0][1] >= hits[1][1]


def test_flops_shrink_with_compression():
    full = pisco.flops(2, 64, 256, 400, 5 * 128 + 150, 0, 32)
    small = pisco.flops(2, 64, 256, 400, 150, 40, 32)
    assert full > 3 * small


def test_config_rejects_unknown_keys():
    cfg = pisco.RunConfig(**{"distill.lr": 5e-4})
    assert float(cfg["distill.lr"]) == 5e-4
    with pytest.raises(pisco.PiscoError, match="unknown config key"):
        cfg.set("no.such.key", 1)
    assert "compress.l" in pisco.RunConfig.keys()
    other = pisco.RunConfig()
    assert other.hash() != cfg.hash()


def test_missing_prerequisite_names_the_step(tmp_path):
    cfg = pisco.RunConfig(**{"run.dir": tmp_path})
    with pytest.raises(pisco.PiscoError, match="gen-data"):
        pisco.Pipeline(cfg).distill()


def tiny_config(run_dir):
    return pisco.RunConfig(**{
        "run.dir": run_dir,
        "data.entities": 10,
        "data.extra_worlds": 0,
        "data.k": 2,
        "model.layers": 1,
        "model.d_model": 16,
        "model.heads": 2,
        "model.d_ff": 32,
        "teacher.warm_epochs": 0,
        "teacher.epochs": 1,
        "distill.epochs": 1,
        "eval.max_new_tokens": 8,
        "eval.limit": 4,
    })


def test_tiny_pipeline_end_to_end(tmp_path):
    p = pisco.Pipeline(tiny_config(tmp_path))
    data = p.gen_data()
    assert data["metrics"]["retrieval_top1"] == 1.0
    p.train_teacher()
    with pytest.raises(pisco.PiscoError, match="distill"):
        p.eval()
    m = p.distill()
    assert m["stage"] == "distill"
    with pytest.raises(pisco.PiscoError, match="compress"):
        p.eval()
    again = p.distill()
    assert again["config_hash"] == m["config_hash"]
    p.compress()
    summary = p.eval()
    assert summary["count"] == 4
    manifest = json.loads((tmp_path / "manifests" / "eval_skd.json").read_text())
    assert manifest["config_hash"]
    report = json.loads((tmp_path / "reports" / "eval_skd.json").read_text())
    assert report["config_hash"] == manifest["config_hash"]
