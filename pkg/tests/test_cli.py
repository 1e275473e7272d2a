import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from mnnca import seeds
from mnnca.automaton import AutomatonConfig, MixStrategy
from mnnca.checkpoint import load_checkpoint, to_bytes
from mnnca.cli import main
from mnnca.imageio import save_png, synthetic_texture, to_uint8
from mnnca.perception import NeighborhoodSpec
from mnnca.texture import BankLevel, LossSpec
from mnnca.trainer import LossCurve, TrainConfig, initial_checkpoint


@pytest.fixture
def target_png(tmp_path):
    p = tmp_path / "target.png"
    save_png(synthetic_texture(32)[0], p)
    return p


@pytest.fixture
def tiny_config(tmp_path):
    cfg = TrainConfig(
        automaton=AutomatonConfig(6, (NeighborhoodSpec(1), NeighborhoodSpec(2, ("laplacian",))),
                                  8, MixStrategy("env")),
        seed=seeds.PerlinSeed(frequency=2, octaves=2),
        loss=LossSpec("sw", 8, (BankLevel(1, 4, 3), BankLevel(2, 4, 3))),
        batch_size=1, steps_min=4, steps_max=8, batch_count=3, resolution=16, master_seed=3)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_json(), indent=2))
    return p


def test_train_missing_target(tmp_path, capsys):
    code = main(["train", "--target", str(tmp_path / "nope.png"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "nope.png" in capsys.readouterr().err


def test_train_bad_config(tmp_path, target_png, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "batch_sise": 2\n}')
    assert main(["train", "--config", str(bad), "--target", str(target_png),
                 "--out", str(tmp_path / "o")]) == 2
    assert "bad.json:2" in capsys.readouterr().err


def test_train_zero_batches_is_initialisation(tmp_path, target_png, tiny_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--target", str(target_png),
                 "--out", str(out), "--batches", "0"]) == 0
    ckpt = load_checkpoint(out / "checkpoint.mnca")
    cfg = TrainConfig.from_json(ckpt.config)
    assert to_bytes(ckpt) == to_bytes(initial_checkpoint(cfg))


def test_train_outputs_and_manifest_replay(tmp_path, target_png, tiny_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--target", str(target_png),
                 "--out", str(out)]) == 0
    curve = LossCurve.read_csv(out / "loss.csv")
    assert len(curve) == 3
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["batch_count"] == 3 and m["master_seed"] == 3
    assert m["started"] and m["finished"] and m["version"]
    again = tmp_path / "again"
    assert main(["train", "--manifest", str(out / "manifest.json"), "--out", str(again)]) == 0
    assert (again / "checkpoint.mnca").read_bytes() == (out / "checkpoint.mnca").read_bytes()


def test_generate(tmp_path, target_png, tiny_config, capsys):
    run = tmp_path / "run"
    main(["train", "--config", str(tiny_config), "--target", str(target_png), "--out", str(run)])
    ck = str(run / "checkpoint.mnca")
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["generate", "--checkpoint", ck, "--size", "48x32", "--steps", "30",
                     "--snap", "10,30", "--out", str(d)]) == 0
    for name in ("frame_0010.png", "frame_0030.png"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
        im = Image.open(a / name)
        assert im.size == (48, 32) and im.mode == "RGB"
    # default size is twice the training resolution
    c = tmp_path / "c"
    assert main(["generate", "--checkpoint", ck, "--steps", "5", "--snap", "5",
                 "--out", str(c)]) == 0
    assert Image.open(c / "frame_0005.png").size == (32, 32)
    d = tmp_path / "d"
    assert main(["generate", "--manifest", str(a / "manifest.json"), "--out", str(d)]) == 0
    assert (d / "frame_0030.png").read_bytes() == (a / "frame_0030.png").read_bytes()
    assert main(["generate", "--checkpoint", ck, "--steps", "5", "--snap", "10",
                 "--out", str(tmp_path / "e")]) == 2
    assert "exceed" in capsys.readouterr().err


def test_generate_zero_init_frame_is_seed(tmp_path, target_png, tiny_config):
    run = tmp_path / "run"
    main(["train", "--config", str(tiny_config), "--target", str(target_png), "--out", str(run),
          "--batches", "0"])
    spec = '{"kind": "uniform", "lo": -0.2, "hi": 1.2}'
    assert main(["generate", "--checkpoint", str(run / "checkpoint.mnca"), "--size", "24x24",
                 "--seed-spec", spec, "--seed", "5", "--out", str(tmp_path / "g")]) == 0
    x0 = seeds.make_seed(seeds.UniformSeed(-0.2, 1.2, 5), (1, 6, 24, 24))
    frame = np.asarray(Image.open(tmp_path / "g" / "frame_0600.png"))
    np.testing.assert_array_equal(frame, to_uint8(x0[0, :3]))


def test_generate_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "x.mnca"
    bad.write_bytes(b"MNCA" + b"\0" * 40)
    assert main(["generate", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["generate", "--checkpoint", str(tmp_path / "missing.mnca"),
                 "--out", str(tmp_path / "o")]) == 2


def test_verify_exit_codes(capsys):
    assert main(["verify", "--trials", "1"]) == 0
    assert "[FAIL]" not in capsys.readouterr().out
    assert main(["verify", "--trials", "1", "--perturb-conv-backward"]) == 1
    assert "[FAIL] grad conv2d_circular" in capsys.readouterr().out


def test_usage_errors():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_thread_count_does_not_change_results(tmp_path, target_png, tiny_config):
    outs = []
    for n in ("1", "2"):
        out = tmp_path / f"t{n}"
        env = dict(os.environ, MNNCA_THREADS=n, NUMBA_NUM_THREADS="2")
        r = subprocess.run([sys.executable, "-m", "mnnca", "train", "--config", str(tiny_config),
                            "--target", str(target_png), "--out", str(out)],
                           env=env, capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        outs.append((out / "checkpoint.mnca").read_bytes())
    assert outs[0] == outs[1]
