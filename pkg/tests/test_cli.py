import json

import numpy as np
import pytest
from PIL import Image

from triplee.cli import main
from triplee.config import load_config

CONFIG = """# tiny run
classes = 3
per_domain = 60
image_size = 16
data_seed = 3
channels = 4,4,8,8
proj_dim = 8
b = 4
r = 2
m = 2
epochs = 2
target_domain = 1
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "c.txt"
    path.write_text(CONFIG)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("runs") / "a"
    assert main(["train", "--config", str(config_file), "--seed", "7", "--out", str(out), "--trace"]) == 0
    return out


def test_train_writes_run_layout(trained):
    for name in ("config-resolved.txt", "metrics.jsonl", "report.csv", "trace.jsonl",
                 "checkpoints/model_0.trpe", "checkpoints/model_1.trpe", "checkpoints/manifest.txt"):
        assert (trained / name).is_file(), name
    resolved = load_config(trained / "config-resolved.txt")
    assert resolved.seed == 7 and resolved.m == 2
    rows = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 2 * 2 * 2
    assert set(rows[0]) == {"epoch", "model", "split", "loss_ce", "loss_sup", "acc", "lr"}
    head, row = (trained / "report.csv").read_text().splitlines()
    assert head == "held_out,d0_clean,d1_inverted,d2_texture,d3_dilated,avg"
    assert row.startswith("d1_inverted,")


def test_trace_has_no_target_ids(trained):
    from triplee.datakit import generate_synthetic
    target = set(generate_synthetic(3, 60, 16, 3).domain_indices(1).tolist())
    for line in (trained / "trace.jsonl").read_text().splitlines():
        step = json.loads(line)
        assert not target.intersection(step["anchors"] + step["partners"])


def test_rerun_is_byte_identical(trained, config_file, tmp_path):
    again = tmp_path / "b"
    assert main(["train", "--config", str(config_file), "--seed", "7", "--out", str(again)]) == 0
    assert (again / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()
    for i in range(2):
        name = f"checkpoints/model_{i}.trpe"
        assert (again / name).read_bytes() == (trained / name).read_bytes()


def test_eval_writes_json(trained, capsys):
    assert main(["eval", "--ensemble", str(trained), "--target", "2"]) == 0
    payload = json.loads((trained / "eval.json").read_text())
    assert payload["target_name"] == "d2_texture"
    assert payload["counts"] == {"2": 60}
    assert 0 <= payload["per_domain"]["2"] <= 100
    assert "top-1" in capsys.readouterr().out


def test_eval_matches_training_metrics(trained):
    assert main(["eval", "--ensemble", str(trained), "--out", str(trained / "held.json")]) == 0
    payload = json.loads((trained / "held.json").read_text())
    row = (trained / "report.csv").read_text().splitlines()[1].split(",")
    assert abs(payload["per_domain"]["1"] - float(row[2])) < 1e-4


def test_missing_seed_fails(config_file, tmp_path, capsys):
    assert main(["train", "--config", str(config_file), "--out", str(tmp_path / "x")]) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and "seed" in err and len(err.splitlines()) == 1


def test_unknown_key_lists_valid_keys(config_file, tmp_path, capsys):
    code = main(["train", "--config", str(config_file), "--seed", "1", "--set", "bogus=3", "--out", str(tmp_path)])
    assert code != 0
    err = capsys.readouterr().err
    assert "bogus" in err and "epochs" in err and "ereplay_d" in err


def test_generate_then_train_from_directory(tmp_path, config_file):
    data = tmp_path / "data"
    assert main(["generate", "--out", str(data), "--seed", "3", "--classes", "3",
                 "--per-domain", "60", "--image-size", "16"]) == 0
    assert (data / "config-resolved.txt").is_file()
    assert len(list(data.glob("*/*/*.png"))) == 240
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--seed", "1", "--set", "epochs=1",
                 "--data", str(data), "--out", str(out)]) == 0
    assert load_config(out / "config-resolved.txt").data_dir == str(data)


def test_ablate_writes_reports(config_file, tmp_path):
    out = tmp_path / "abl"
    cells = tmp_path / "cells.txt"
    cells.write_text("base: ereplay_b=false esaug=false ereplay_d=false\nfull: ereplay_b=true\n")
    code = main(["ablate", "--config", str(config_file), "--set", "epochs=1", "--matrix", str(cells),
                 "--seeds", "1,2", "--targets", "0", "--workers", "1", "--out", str(out)])
    assert code == 0
    runs = [json.loads(line) for line in (out / "runs.jsonl").read_text().splitlines()]
    assert len(runs) == 4
    assert (out / "report.csv").read_text().startswith("cell,d0_clean,avg")
    assert "published reference" in (out / "report.md").read_text()


def test_ablate_requires_seeds(config_file, tmp_path):
    assert main(["ablate", "--config", str(config_file), "--matrix", "flags", "--out", str(tmp_path)]) != 0


def _png(path, seed):
    rng = np.random.default_rng(seed)
    Image.fromarray((rng.random((16, 16, 3)) * 255).astype(np.uint8)).save(path)


def test_augment_preview(tmp_path):
    src, partner = tmp_path / "a.png", tmp_path / "b.png"
    _png(src, 0)
    _png(partner, 1)
    out = tmp_path / "o" / "rot.png"
    assert main(["augment-preview", "--input", str(src), "--op", "Rotate", "--strength", "30",
                 "--seed", "1", "--out", str(out)]) == 0
    assert Image.open(out).size == (16, 16)
    mixed = tmp_path / "mix.png"
    assert main(["augment-preview", "--input", str(src), "--op", "FourierMix", "--partner", str(partner),
                 "--lam", "0.5", "--seed", "1", "--out", str(mixed)]) == 0
    for suffix in ("_amp_input", "_amp_partner", "_amp_mixed"):
        assert (tmp_path / f"mix{suffix}.png").is_file()
    same = tmp_path / "same.png"
    assert main(["augment-preview", "--input", str(src), "--op", "FourierMix", "--partner", str(partner),
                 "--lam", "0", "--seed", "1", "--out", str(same)]) == 0
    assert np.array_equal(np.asarray(Image.open(same)), np.asarray(Image.open(src)))


def test_augment_preview_errors(tmp_path):
    src = tmp_path / "a.png"
    _png(src, 0)
    assert main(["augment-preview", "--input", str(src), "--op", "Nope", "--seed", "1",
                 "--out", str(tmp_path / "x.png")]) != 0
    assert main(["augment-preview", "--input", str(src), "--op", "StyleMix", "--seed", "1",
                 "--out", str(tmp_path / "x.png")]) != 0
