import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from congestnet import binio, infer
from congestnet.cli import build_parser, main
from congestnet.config import TrainConfig, write_config
from congestnet.errors import ConfigError, FormatError
from congestnet.grid import GridMap, QueryLocation, read_raster, split_dataset
from congestnet.mfgm import MetaRepresentation
from congestnet.tensor import Tensor
from congestnet.train import train

from conftest import random_layers, random_records, tiny_config

GOLDEN = Path(__file__).parent / "golden" / "cli_help.txt"


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    rng = np.random.default_rng(77)
    cfg = tiny_config()
    layers = random_layers(cfg, rng)
    records = random_records(cfg, 30, rng)
    split = split_dataset(records, 0)
    tcfg = TrainConfig(epochs=2, batch_size=8)
    result = train(layers, records, split, cfg, tcfg)
    out = tmp_path_factory.mktemp("run")
    paths = infer.save_run(out, result, cfg, tcfg, split)
    return cfg, layers, paths, result


# ------------------------------------------------------------- meta cache

def test_meta_cache_roundtrip_bitwise(tmp_path, rng):
    value = rng.standard_normal((5, 6, 4)).astype(np.float32)
    meta = MetaRepresentation(Tensor(value)).freeze()
    path = tmp_path / "m.gmeta"
    infer.save_meta_cache(path, meta, "c" * 64, "r" * 64)
    back, header = infer.load_meta_cache(path)
    assert back.tensor.value.tobytes() == value.tobytes()
    assert back.frozen and header["d_meta"] == 4 and header["run_id"] == "r" * 64
    infer.save_meta_cache(tmp_path / "again.gmeta", back, "c" * 64, "r" * 64)
    assert (tmp_path / "again.gmeta").read_bytes() == path.read_bytes()


def test_meta_cache_tamper_detected(tmp_path, rng):
    meta = MetaRepresentation(Tensor(rng.standard_normal((3, 3, 2)).astype(np.float32))).freeze()
    raw = infer.meta_bytes(meta, "c", "r")
    for pos in (len(raw) - 1, len(raw) - 17):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(FormatError, match="digest"):
            infer.decode_meta(bytes(bad))
    with pytest.raises(FormatError):
        infer.decode_meta(raw[:-4])
    with pytest.raises(FormatError):
        infer.decode_meta(b"GMETA2" + raw[6:])


# ---------------------------------------------------------------- fast path

def test_fast_path_bitwise_equals_full_path(tiny_run):
    cfg, layers, paths, _ = tiny_run
    queries = GridMap(cfg.height, cfg.width).locations()
    fast = infer.fast_predict(paths["meta_cache"], paths["checkpoint"], queries)
    full = infer.full_predict(paths["checkpoint"], layers, queries)
    assert [p.location for p in fast] == queries
    for a, b in zip(fast, full):
        assert a.scores.tobytes() == b.scores.tobytes()


def test_fast_path_keeps_input_order(tiny_run, rng):
    cfg, _, paths, _ = tiny_run
    queries = [QueryLocation(int(h), int(w)) for h, w in rng.integers(1, 9, (100, 2))]
    out = infer.fast_predict(paths["meta_cache"], paths["checkpoint"], queries)
    assert len(out) == 100 and [p.location for p in out] == queries


def test_fast_path_loads_no_mfgm_parameters(tiny_run):
    _, _, paths, _ = tiny_run
    model, _ = infer.load_model(paths["checkpoint"], ("qlmm.", "rfpm."))
    assert model.params and not any(k.startswith("mfgm.") for k in model.params)


def test_stale_cache_refused(tiny_run, tmp_path):
    cfg, layers, paths, result = tiny_run
    other = MetaRepresentation(Tensor(result.meta.tensor.value.copy())).freeze()
    stale = tmp_path / "stale.gmeta"
    infer.save_meta_cache(stale, other, "0" * 64, infer.run_id(result.model.params))
    with pytest.raises(ConfigError, match="stale"):
        infer.fast_predict(stale, paths["checkpoint"], [QueryLocation(1, 1)])
    infer.save_meta_cache(stale, other, cfg.config_hash(), "0" * 64)
    with pytest.raises(ConfigError, match="stale"):
        infer.fast_predict(stale, paths["checkpoint"], [QueryLocation(1, 1)])


def test_checkpoint_header_contents(tiny_run):
    cfg, _, paths, result = tiny_run
    header = binio.read_checkpoint_header(paths["checkpoint"])
    assert header["config_hash"] == cfg.config_hash()
    assert header["run_id"] == infer.run_id(result.model.params)
    assert infer.load_split(header).to_dict() == json.loads(Path(paths["split"]).read_text())


def test_parse_locations():
    assert infer.parse_locations("1,2, 3,4") == [QueryLocation(1, 2), QueryLocation(3, 4)]
    with pytest.raises(ConfigError):
        infer.parse_locations("1,2,3")
    with pytest.raises(ConfigError):
        infer.parse_locations("a,b")


# ---------------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def cli_city(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    city = root / "city"
    assert main(["gen-synth", "--seed", "1", "--height", "10", "--width", "10", "--time-points", "8",
                 "--out", str(city)]) == 0
    cfg_path = root / "tiny.cfg"
    write_config(cfg_path, tiny_config(height=10, width=10, time_points=8, d_mt=32),
                 TrainConfig(epochs=2, batch_size=8))
    return root, city, cfg_path


def _manifest(directory, command):
    return json.loads((Path(directory) / f"manifest.{command}.json").read_text())


def test_gen_synth_files_and_manifest(cli_city):
    _, city, _ = cli_city
    for name in ("poi.gfl", "real_estate.gfl", "media_text.gfl", "traffic.gtr", "oracle.bin"):
        assert (city / name).is_file()
    man = _manifest(city, "gen-synth")
    assert man["command"] == "gen-synth" and man["seed"] == 1
    assert set(man["outputs"]) == {"media_text", "real_estate", "poi", "records", "oracle"}
    assert all(v >= 0 for v in man["timings_ms"].values())


def test_train_eval_predict_pipeline(cli_city, capsys):
    root, city, cfg_path = cli_city
    run = root / "run"
    assert main(["train", "--data", str(city), "--config", str(cfg_path), "--out", str(run)]) == 0
    assert "[Ours test]" in (run / "metrics.full.txt").read_text()
    assert main(["eval", "--ckpt", str(run), "--split", "test"]) == 0
    text = (run / "metrics.eval.test.txt").read_text()
    assert "accuracy =" in text and "f1 =" in text
    assert main(["eval", "--ckpt", str(run), "--split", "validation", "--tune-threshold"]) == 0
    assert main(["predict", "--ckpt", str(run), "--loc", "1,1,10,10", "--dump-heatmap", "3",
                 "--data", str(city)]) == 0
    lines = (run / "predictions.txt").read_text().splitlines()
    assert len(lines) == 2 * 8 and lines[0].startswith("1 1 1 ")
    header, heat = read_raster(run / "heatmap_t3.gfl")
    assert header["time_point"] == 3
    assert heat.shape == (10, 10, 1) and set(np.unique(heat)) <= {0.0, 1.0}
    man = _manifest(run, "predict")
    assert "fast_ms_per_query" in man["timings_ms"] and "full_ms_per_query" in man["timings_ms"]
    assert "identical=True" in capsys.readouterr().out


def test_baseline_two_rows(cli_city):
    root, city, _ = cli_city
    out = root / "base"
    assert main(["baseline", "--data", str(city), "--k", "3", "--k", "5", "--out", str(out)]) == 0
    text = (out / "metrics.baseline.txt").read_text()
    assert "Baseline_1 (k=3)" in text and "Baseline_2 (k=5)" in text


def test_ablate_and_dump_mask(cli_city):
    root, city, cfg_path = cli_city
    out = root / "abl"
    assert main(["ablate", "--mode", "zero_meta", "--data", str(city), "--config", str(cfg_path),
                 "--out", str(out)]) == 0
    assert (out / "metrics.zero_meta.txt").is_file()
    masks = root / "masks"
    assert main(["dump-mask", "--loc", "3,4", "--sigma", "2", "--height", "10", "--width", "10",
                 "--out", str(masks)]) == 0
    _, mask = read_raster(masks / "mask_3_4.gfl")
    assert mask[2, 3, 0] == mask.max()
    assert abs(float(mask.sum()) - 1.0) < 1e-5
    assert main(["dump-mask", "--loc", "3,4", "--ckpt", str(out), "--out", str(masks)]) == 0
    assert (masks / "mapped_3_4.gfl").is_file()


def test_manifest_rerun_is_byte_identical(cli_city, tmp_path):
    root, city, cfg_path = cli_city
    first = tmp_path / "first"
    argv = ["train", "--data", str(city), "--config", str(cfg_path), "--seed", "2", "--out", str(first)]
    assert main(argv) == 0
    man = _manifest(first, "train")
    shutil.rmtree(first)
    assert main(man["argv"]) == 0
    again = _manifest(first, "train")
    assert {k: v["sha256"] for k, v in again["outputs"].items()} == \
        {k: v["sha256"] for k, v in man["outputs"].items()}
    assert again["inputs"] == man["inputs"]


def test_exit_codes(cli_city, tmp_path, capsys):
    root, city, _ = cli_city
    assert main(["train", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "badcity"
    shutil.copytree(city, bad)
    (bad / "poi.gfl").write_bytes(b"XXXX")
    assert main(["baseline", "--data", str(bad), "--k", "3", "--out", str(tmp_path)]) == 2
    assert main(["dump-mask", "--loc", "30,30", "--height", "10", "--width", "10", "--out", str(tmp_path)]) == 2
    assert main(["predict", "--ckpt", str(tmp_path / "nothing")]) == 2


def test_exit_code_numeric(cli_city, tmp_path):
    root, city, _ = cli_city
    cfg_path = tmp_path / "diverge.cfg"
    write_config(cfg_path, tiny_config(height=10, width=10, time_points=8, d_mt=32),
                 TrainConfig(epochs=1, batch_size=8, learning_rate=1e30, optimizer="sgd"))
    assert main(["train", "--data", str(city), "--config", str(cfg_path), "--out", str(tmp_path / "r")]) == 3


def _all_help() -> str:
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    parts = [parser.format_help()]
    for name, p in sub.choices.items():
        parts.append(f"==== {name}\n" + p.format_help())
    return "\n".join(parts)


def test_help_golden(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    text = _all_help()
    assert text == GOLDEN.read_text()


def test_help_lists_every_flag(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
    required = {
        "gen-synth": ["--seed", "--height", "--width", "--record-fraction", "--noise", "--out"],
        "train": ["--data", "--config", "--seed", "--out"],
        "eval": ["--ckpt", "--data", "--split", "--tune-threshold"],
        "predict": ["--ckpt", "--meta-cache", "--loc", "--dump-heatmap"],
        "baseline": ["--data", "--k"],
        "ablate": ["--mode", "--data", "--config", "--out"],
        "dump-mask": ["--loc", "--sigma", "--out"],
    }
    for name, flags in required.items():
        opts = {f for a in sub.choices[name]._actions for f in a.option_strings}
        assert set(flags) <= opts, name


def test_shipped_default_config_matches_defaults():
    from congestnet.config import ModelConfig, parse_config
    text = (Path(__file__).parent.parent / "configs" / "default.cfg").read_text()
    assert parse_config(text) == (ModelConfig(), TrainConfig())
