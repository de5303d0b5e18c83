import pytest

from relnov import config as cf
from relnov.model import ModelConfig
from relnov.training import TrainConfig


def test_roundtrip(tmp_path):
    secs = {"model": ModelConfig(num_blocks=2), "train": TrainConfig(iterations=7, loss="mse")}
    path = cf.write_resolved(secs, tmp_path)
    raw = cf.read_config_file(path)
    assert cf.build_section("model", raw["model"]) == secs["model"]
    assert cf.build_section("train", raw["train"]) == secs["train"]


def test_unknown_key_and_section(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("[model]\nnum_layers = 3\n")
    with pytest.raises(cf.ConfigFileError, match="num_layers"):
        cf.read_config_file(p)
    p.write_text("[optim]\nlr = 3\n")
    with pytest.raises(cf.ConfigFileError, match="optim"):
        cf.read_config_file(p)


def test_bad_values(tmp_path):
    with pytest.raises(cf.ConfigFileError):
        cf.build_section("train", {"iterations": "many"})
    with pytest.raises(cf.ConfigFileError):
        cf.build_section("model", {"num_blocks": "0"})
    with pytest.raises(cf.ConfigFileError):
        cf.build_section("run", {"normalize": "maybe"})


def test_overrides_win():
    tc = cf.build_section("train", {"iterations": "10"}, {"iterations": 3, "loss": None})
    assert tc.iterations == 3 and tc.loss == "mse"


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.cfg"))
    assert files
    for f in files:
        raw = cf.read_config_file(f)
        for section, values in raw.items():
            cf.build_section(section, values)


def test_full_scale_recipe_matches_published_schedule():
    from pathlib import Path
    from relnov.training import FULL_SCALE_TRAIN
    published = dict(iterations=13000, batch_size=4096, base_lr=0.008, warmup_iters=500,
                     optimizer="lars", momentum=0.9, weight_decay=5e-5)
    assert FULL_SCALE_TRAIN == published
    raw = cf.read_config_file(Path(__file__).resolve().parents[1] / "configs" / "full_scale.cfg")
    tc = cf.build_section("train", raw["train"])
    for k, v in published.items():
        assert getattr(tc, k) == v
