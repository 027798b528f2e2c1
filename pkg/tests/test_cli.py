import json

import numpy as np
import pytest
import torch
from PIL import Image as PILImage

from licadapt.cli import main
from licadapt.errors import CodecError, ConfigurationError, DataError


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--size", "64", "--count", "6", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def runs(tree, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    args = ["--dataset", str(tree), "--M", "8", "--N", "8", "--epochs", "1", "--lr", "3e-3"]
    assert main(["pretrain", "--out", str(out), "--warm-start", *args]) == 0
    assert main(["adapt", "--backbone", str(out), "--out", str(out), "--dataset", str(tree),
                 "--epochs", "1", "--quality", "2"]) == 0
    return out


def test_synth_tree(tree):
    for name in ("natural", "sketch", "comic"):
        assert len(list((tree / name).glob("*.png"))) == 6
    cfg = json.loads((tree / "resolved_config.json").read_text())
    assert cfg["seed"] == 1 and cfg["size"] == [64, 64]


def test_pretrain_and_adapt_outputs(runs):
    assert sorted(p.name for p in runs.glob("backbone_q*.pt")) == [f"backbone_q{q}.pt" for q in range(4)]
    assert (runs / "adapted_proposed_q2.pt").is_file()
    cfg = json.loads((runs / "resolved_config.json").read_text())
    assert cfg["pretrain"]["epochs"] == 1 and cfg["data"]["domain_order"] == ["natural", "comic", "sketch"]
    assert cfg["pretrain_chain"]["epochs"] == 1
    meta = torch.load(runs / "backbone_q3.pt", weights_only=False)["meta"]
    assert meta["init_from_quality"] == 2
    assert (runs / "resolved_config_adapt_proposed.json").is_file()


def test_encode_decode_round_trip(runs, tree, tmp_path, capsys):
    img = sorted((tree / "sketch").glob("*.png"))[0]
    stream = tmp_path / "a.licb"
    assert main(["encode", str(img), "--checkpoint", str(runs / "adapted_proposed_q2.pt"), "--out", str(stream)]) == 0
    reported = float(capsys.readouterr().out.split()[-1])
    assert reported == pytest.approx(8 * stream.stat().st_size / (64 * 64), abs=1e-6)
    assert (tmp_path / "a.licb.config.json").is_file()
    out = tmp_path / "a.png"
    assert main(["decode", str(stream), "--checkpoint", str(runs / "adapted_proposed_q2.pt"),
                 "--out", str(out), "--reference", str(img)]) == 0
    psnr = float(capsys.readouterr().out.split()[-1])
    assert np.isfinite(psnr) and psnr > 5
    assert PILImage.open(out).size == (64, 64)


def test_decode_without_adapters_warns(runs, tree, tmp_path):
    img = sorted((tree / "natural").glob("*.png"))[0]
    stream = tmp_path / "b.licb"
    assert main(["encode", str(img), "--checkpoint", str(runs / "adapted_proposed_q2.pt"), "--out", str(stream)]) == 0
    with pytest.warns(RuntimeWarning, match="no adapters"):
        code = main(["decode", str(stream), "--checkpoint", str(runs / "backbone_q2.pt"),
                     "--out", str(tmp_path / "b.png")])
    assert code == 0 and (tmp_path / "b.png").is_file()


def test_oracle_needs_label(runs, tree, tmp_path):
    img = sorted((tree / "natural").glob("*.png"))[0]
    args = ["encode", str(img), "--checkpoint", str(runs / "adapted_proposed_q2.pt"), "--out", str(tmp_path / "c.licb")]
    assert main(args + ["--blend", "oracle"]) == ConfigurationError.exit_code
    assert main(args + ["--blend", "oracle", "--label", "1"]) == 0


def test_exit_codes(tmp_path, runs):
    assert main(["pretrain", "--out", str(tmp_path), "--dataset", str(tmp_path / "missing")]) == 2
    assert main(["pretrain", "--out", str(tmp_path)]) == 2
    assert main(["report", str(tmp_path / "nothing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert main(["report", str(bad), "--config", str(bad)]) == 2
    junk = tmp_path / "junk.licb"
    junk.write_bytes(b"not a stream at all")
    assert main(["decode", str(junk), "--checkpoint", str(runs / "backbone_q2.pt"),
                 "--out", str(tmp_path / "j.png")]) == CodecError.exit_code
    gray = tmp_path / "gray.png"
    PILImage.fromarray(np.zeros((64, 64), np.uint8), "L").save(gray)
    assert main(["encode", str(gray), "--checkpoint", str(runs / "backbone_q2.pt"),
                 "--out", str(tmp_path / "g.licb")]) == DataError.exit_code


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_eval_report(runs, tree, tmp_path, capsys):
    out = tmp_path / "eval"
    code = main(["eval", "--runs", str(runs), "--dataset", str(tree), "--out", str(out),
                 "--split", "train", "--policy-quality", "2", "--no-plot"])
    assert code == 0
    text = capsys.readouterr().out
    assert "PSNR by blending policy" in text
    report = json.loads((out / "report.json").read_text())
    assert set(report["datasets"]) == {"natural", "sketch", "comic"}
    assert "proposed" in report["datasets"]["sketch"]["policies"]
    assert main(["report", str(out / "report.json")]) == 0
    assert capsys.readouterr().out == text
