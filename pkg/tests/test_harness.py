import json
import struct
import zlib

import numpy as np
import pytest

from dsd import data_synth as ds
from dsd.adapt import init_prompts
from dsd.diffusion import init_model
from dsd.errors import FormatError, UsageError
from dsd.harness import (
    RunReport,
    canonical_json,
    format_table,
    load_checkpoint,
    main,
    save_checkpoint,
    strict_subsets,
)
from dsd.harness.checkpoint import TAG_MODEL, decode, encode
from dsd.harness.experiments import axis_settings, run_ablation
from dsd.scoring import ScoreConfig, score_matrix


@pytest.fixture(scope="module")
def model():
    return init_model(seed=2).freeze()


@pytest.fixture(scope="module")
def ckpt(model, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "model.dsd"
    save_checkpoint(model, None, path)
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--n-train", "12", "--n-eval", "6", "--candidates", "3", "--seed", "4"]) == 0
    return out


# -- canonical JSON and reports ------------------------------------------------------


def test_canonical_json_format():
    text = canonical_json({"b": 0.1, "a": [1, 2.0, np.float64(1 / 3)], "c": {"z": None, "y": True}})
    assert text == '{"a":[1,2.0,0.33333333333333331],"b":0.10000000000000001,"c":{"y":true,"z":null}}'
    assert json.loads(text)["b"] == 0.1


def test_canonical_json_roundtrips_floats():
    xs = np.random.default_rng(0).standard_normal(50).tolist()
    assert json.loads(canonical_json(xs)) == xs


def test_canonical_json_rejects_nan():
    with pytest.raises(FormatError):
        canonical_json({"x": float("nan")})


def test_report_is_deterministic():
    a = RunReport("eval", {"lam": 5.0}, 1, {"top1": 0.5}, {}, {"tune": [0.25, 0.125]})
    b = RunReport("eval", {"lam": 5.0}, 1, {"top1": 0.5}, {}, {"tune": [0.25, 0.125]})
    assert a.to_json() == b.to_json() and a.to_text() == b.to_text()
    assert json.loads(a.to_json())["config"] == {"lam": 5.0}


def test_format_table_alignment():
    text = format_table([{"setting": "all", "top1": 0.5}, {"setting": "0,1", "top1": 0.25}], ["setting", "top1"])
    lines = text.splitlines()
    assert len({len(line) for line in lines}) == 1
    assert lines[0].split() == ["setting", "top1"]


# -- checkpoints ------------------------------------------------------------------------------


def test_roundtrip_bit_exact_and_zero_score_delta(model, ckpt):
    loaded = load_checkpoint(ckpt).model()
    for (k, a), (j, b) in zip(sorted(model.named_parameters().items()), sorted(loaded.named_parameters().items())):
        assert k == j and np.array_equal(a.data, b.data)
    _, ev = ds.build_dataset(0, 4, 3, 1)
    delta = score_matrix(loaded, ev, ScoreConfig()) - score_matrix(model, ev, ScoreConfig())
    assert np.all(delta == 0.0)


def test_prompt_roundtrip(model, tmp_path):
    p = init_prompts(model, seed=1)
    p.base_k[0].data[:] = 0.125
    save_checkpoint(None, p, tmp_path / "p.dsd", {"backbone_checksum": model.checksum()})
    q = load_checkpoint(tmp_path / "p.dsd").prompts()
    for a, b in zip(p.named_parameters().values(), q.named_parameters().values()):
        assert np.array_equal(a.data, b.data)


def test_payload_byte_flip_is_detected(ckpt):
    buf = bytearray(ckpt.read_bytes())
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(FormatError, match="checksum mismatch"):
        decode(bytes(buf))


def test_truncation_names_offset(ckpt):
    buf = ckpt.read_bytes()
    with pytest.raises(FormatError, match="offset"):
        decode(buf[: len(buf) - 9])
    with pytest.raises(FormatError, match="offset"):
        decode(buf[:6])


def test_bad_magic_and_version(ckpt):
    buf = ckpt.read_bytes()
    with pytest.raises(FormatError, match="magic"):
        decode(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="version 2"):
        decode(buf[:4] + struct.pack("<I", 2) + buf[8:])


def _resealed(blob: bytes) -> bytes:
    return blob + struct.pack("<I", zlib.crc32(blob))


def test_unknown_dtype_names_offset():
    good = encode({}, {TAG_MODEL: {"x": np.zeros(2)}})
    # Locate the dtype byte: it follows the single rank-1 extent of "x".
    marker = b"x" + struct.pack("<I", 1) + struct.pack("<Q", 2)
    at = good.index(marker) + len(marker)
    bad = good[:at] + b"\x07" + good[at + 1 : -4]
    with pytest.raises(FormatError, match=f"dtype tag 7 .* offset {at}"):
        decode(_resealed(bad))


def test_empty_model_rejected_at_scoring(tmp_path):
    path = tmp_path / "empty.dsd"
    path.write_bytes(encode({"model": {}}, {TAG_MODEL: {}}))
    ck = load_checkpoint(path)
    with pytest.raises(UsageError, match="no model tensors"):
        ck.model()


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "absent.dsd")


# -- experiments ----------------------------------------------------------------------------------


def test_strict_subsets_of_four_layers():
    subs = strict_subsets(4)
    assert len(subs) == 14 and len(set(subs)) == 14
    assert (0, 1, 2, 3) not in subs and () not in subs


def test_noise_axis_has_figure_shape():
    names = [name for name, _ in axis_settings("noise", ScoreConfig(), 4)]
    assert names == ["0.4", "0.8", "ensemble"]


def test_run_ablation_rows(model):
    _, ev = ds.build_dataset(0, 3, 3, 2)
    rows = run_ablation(model, ev, "pooling", ScoreConfig())
    assert [r["setting"] for r in rows] == ["lse", "max", "cosine"]
    assert all(0.0 <= r["top1"] <= 1.0 for r in rows)


# -- CLI ---------------------------------------------------------------------------------------------


SCENE = {"seed": 5, "subject": {"color": "red", "shape": "circle"}, "object": {"color": "blue", "shape": "square"}, "predicate": "left_of"}


def test_gen_data_files(data_dir):
    assert len(ds.load_split(data_dir, "train")) == 12
    assert len(ds.load_split(data_dir, "eval")) == 6


def test_score_lse_and_max(ckpt, capsys):
    out = {}
    for pool in ("lse", "max"):
        code = main(["score", "--ckpt", str(ckpt), "--scene-json", json.dumps(SCENE), "--caption", "red circle left_of blue square", "--pool", pool])
        assert code == 0
        out[pool] = json.loads(capsys.readouterr().out)
    assert out["lse"]["raw"] >= out["max"]["raw"]
    assert 0 < out["lse"]["calibrated"] < 1
    assert out["max"]["config"]["pooling"] == "max"


def test_score_flag_errors(ckpt, capsys):
    base = ["score", "--ckpt", str(ckpt), "--scene-json", json.dumps(SCENE), "--caption", "red circle left_of blue square"]
    with pytest.raises(SystemExit) as e:
        main(base + ["--noise", "0.4", "--ensemble"])
    assert e.value.code == 2
    assert main(base + ["--noise", "1.5"]) == 2
    assert main(base + ["--layers", "0,9"]) == 2
    assert main(base[:-1] + ["red circle"]) == 1
    capsys.readouterr()


def test_corrupt_checkpoint_exit_code(ckpt, tmp_path, capsys):
    bad = tmp_path / "bad.dsd"
    buf = bytearray(ckpt.read_bytes())
    buf[100] ^= 0xFF
    bad.write_bytes(bytes(buf))
    assert main(["score", "--ckpt", str(bad), "--scene-json", json.dumps(SCENE), "--caption", "red circle left_of blue square"]) == 3
    assert "format error" in capsys.readouterr().err


def test_eval_twice_byte_identical(ckpt, data_dir, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir), "--report", str(a)]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir), "--report", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(a.read_text())
    assert rep["metrics"]["n"] == 6 and set(rep["metrics"]["per_slot"]) == {"subject", "object", "predicate"}
    assert "top1" in capsys.readouterr().out


def test_ablate_noise_report(ckpt, data_dir, tmp_path, capsys):
    out = tmp_path / "ab.json"
    assert main(["ablate", "--ckpt", str(ckpt), "--data", str(data_dir), "--axis", "noise", "--report", str(out)]) == 0
    rows = json.loads(out.read_text())["ablations"]["noise"]
    assert [r["setting"] for r in rows] == ["0.4", "0.8", "ensemble"]
    capsys.readouterr()


def test_pretrain_tune_eval_pipeline(data_dir, tmp_path, capsys):
    m, p = tmp_path / "m.dsd", tmp_path / "p.dsd"
    assert main(["pretrain", "--data", str(data_dir), "--steps", "2", "--batch-size", "4", "--seed", "1", "--out", str(m)]) == 0
    assert main(["tune", "--ckpt", str(m), "--data", str(data_dir), "--shots", "4", "--steps", "2", "--batch-size", "2", "--seed", "0", "--out", str(p)]) == 0
    assert main(["eval", "--ckpt", str(m), "--prompts", str(p), "--data", str(data_dir), "--report", str(tmp_path / "r.json")]) == 0
    other = tmp_path / "other.dsd"
    save_checkpoint(init_model(seed=9).freeze(), None, other)
    assert main(["eval", "--ckpt", str(other), "--prompts", str(p), "--data", str(data_dir), "--report", str(tmp_path / "x.json")]) == 2
    capsys.readouterr()


def test_missing_required_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--data", "x"])
    assert e.value.code == 2
    capsys.readouterr()
