import json

import pytest

from sparsemem.harness import cli
from sparsemem.harness.checkpoint import load_checkpoint

from test_harness import TINY


@pytest.fixture(scope="module")
def base(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY.to_dict()))
    assert cli.main(["pretrain", "--seed", "0", "--config", str(d / "tiny.json"), "--out", str(d / "base.ckpt")]) == 0
    return d


def _stream(d, name, *extra):
    cli.main(["stream", "--seed", "3", "--checkpoint", str(d / "base.ckpt"), "--out", str(d / name), *extra])
    return (d / name).read_bytes()


def test_stream_is_byte_identical(base):
    assert _stream(base, "a.jsonl") == _stream(base, "b.jsonl")


def test_flags_override_and_label(base):
    lines = [json.loads(x) for x in _stream(base, "z.jsonl", "--stream.method.optimizer.lr", "0").splitlines()]
    assert len({(r["target_acc"], r["heldout_nll"]) for r in lines}) == 1
    assert lines[0]["method"].startswith("sparse_memory")


def test_flag_beats_config_file(base):
    (base / "over.json").write_text(json.dumps({"stream": {"eval_every": 1}}))
    args = cli.build_parser().parse_args(["stream", "--seed", "0", "--checkpoint", "x", "--config", str(base / "over.json"),
                                          "--stream.eval_every", "4"])
    assert cli.build_config(args).stream.eval_every == 4
    args = cli.build_parser().parse_args(["stream", "--seed", "0", "--checkpoint", "x", "--config", str(base / "over.json")])
    assert cli.build_config(args).stream.eval_every == 1


def test_lora_flags(base):
    out = _stream(base, "l.jsonl", "--stream.method.method", "lora", "--stream.method.t", "null",
                  "--stream.method.optimizer.kind", "adamw", "--stream.method.optimizer.lr", "0.001",
                  "--stream.method.lora.rank", "2")
    assert json.loads(out.splitlines()[0])["method"].startswith("lora")


def test_save_round_trips(base):
    _stream(base, "s.jsonl", "--save", str(base / "tuned.ckpt"))
    tuned, orig = load_checkpoint(base / "tuned.ckpt"), load_checkpoint(base / "base.ckpt")
    assert tuned.params["memory.values"].tobytes() != orig.params["memory.values"].tobytes()
    assert tuned.params["embed"].tobytes() == orig.params["embed"].tobytes()


def test_sweep_ablate_coreset_report(base):
    ck = str(base / "base.ckpt")
    (base / "grid.json").write_text(json.dumps([{"method": "sparse_memory", "t": 5, "optimizer": {"kind": "sgd", "lr": 1.0}},
                                                {"method": "full", "optimizer": {"kind": "adamw", "lr": 1e-3}}]))
    cli.main(["sweep", "--checkpoint", ck, "--grid", str(base / "grid.json"), "--out", str(base / "sweep.csv")])
    assert len((base / "sweep.csv").read_text().splitlines()) == 3
    cli.main(["ablate", "--checkpoint", ck, "--arms", "tfidf", "tf_only", "--out", str(base / "abl.csv")])
    assert len((base / "abl.csv").read_text().splitlines()) == 3
    cli.main(["coreset", "--checkpoint", ck, "--facts", "2", "--out", str(base / "core.jsonl")])
    assert len((base / "core.jsonl").read_text().splitlines()) == 2
    _stream(base, "r.jsonl")
    cli.main(["report", str(base / "r.jsonl"), str(base / "sweep.csv"), "--out", str(base / "report.csv")])
    assert len((base / "report.csv").read_text().splitlines()) == 4


def test_seed_is_required(base):
    with pytest.raises(SystemExit):
        cli.main(["stream", "--checkpoint", str(base / "base.ckpt")])
