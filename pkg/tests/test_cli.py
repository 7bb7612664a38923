import json

import pytest

from ctreport.cli import exact_line_fit, main
from ctreport.config import RunConfig, parse_value, read_config_file
from ctreport.extractor import ConfigError

TINY_CONFIG = """\
# tiny end-to-end run
volume_dims = 16,16,16
patch = 8
d_model = 16
spatial_layers = 1
causal_layers = 1
generator_layers = 1
memory_slots = 8
knowledge_dim = 32
top_k = 2
epochs = 2
lr_extractor = 1e-3
lr_other = 1e-3
n_pairs = 6
"""


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY_CONFIG)
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "data")]) == 0
    manifest = tmp_path / "data" / "manifest.jsonl"
    assert main(["bank", "build", "--config", str(cfg), "--manifest", str(manifest),
                 "--out", str(tmp_path / "bank.bin")]) == 0
    return tmp_path, cfg, manifest


def test_param_count_is_linear(capsys):
    assert main(["param-count", "--grids", "4,8,16,32", "--widths", "6,4,3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [line.split() for line in lines if line.strip()[:1].isdigit()]
    grids = [int(r[0]) for r in rows]
    counts = [int(r[1]) for r in rows]
    assert grids == [4, 8, 16, 32]
    assert counts == [int(r[2]) for r in rows]  # measured == closed form
    slope, _, residual = exact_line_fit(grids, counts)
    assert residual == 0 and slope == 6 * 4 + 4 * 3
    assert lines[-1].endswith("max residual 0")


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["param-count", "--no-such-flag"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["synth"])  # --out missing
    assert exc.value.code != 0


def test_evaluate_identical_files(tmp_path, capsys):
    refs = tmp_path / "refs.txt"
    refs.write_text("a nodule is seen in the upper left lung .\nno obvious abnormality was found .\n")
    assert main(["evaluate", "--predictions", str(refs), "--references", str(refs)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["pairs"] == 2
    for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL"):
        assert payload[key] == 1.0
    assert 0.99 < payload["meteor_lite"] < 1.0


def test_retrieve_and_k_too_large(workspace, capsys):
    tmp_path, cfg, _ = workspace
    volume = tmp_path / "data" / "volumes" / "syn00000.vol"
    assert main(["retrieve", "--config", str(cfg), "--bank", str(tmp_path / "bank.bin"), "--volume", str(volume),
                 "--k", "3", "--out", str(tmp_path / "hits.json")]) == 0
    hits = json.loads((tmp_path / "hits.json").read_text())
    assert [h["rank"] for h in hits] == [1, 2, 3]
    capsys.readouterr()
    assert main(["retrieve", "--config", str(cfg), "--bank", str(tmp_path / "bank.bin"), "--volume", str(volume),
                 "--k", "7"]) != 0
    assert "1 <= k <= N_r = 6" in capsys.readouterr().err


def test_train_generate_resume(workspace, capsys):
    tmp_path, cfg, manifest = workspace
    ckpt = tmp_path / "m.ckpt"
    common = ["--config", str(cfg), "--manifest", str(manifest), "--bank", str(tmp_path / "bank.bin")]
    assert main(["train", *common, "--out", str(ckpt)]) == 0
    first = capsys.readouterr().out
    assert main(["train", *common, "--out", str(tmp_path / "again.ckpt")]) == 0
    assert capsys.readouterr().out == first  # same seed, same log
    assert ckpt.read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    volume = tmp_path / "data" / "volumes" / "syn00001.vol"
    assert main(["generate", "--config", str(cfg), "--checkpoint", str(ckpt), "--volume", str(volume),
                 "--bank", str(tmp_path / "bank.bin")]) == 0
    text = capsys.readouterr().out.strip()
    assert len(text.split()) <= 150


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--targets", "kan", "cmke", "--samples", "50"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS: 50 coordinates") == 2


def test_config_parsing(tmp_path):
    assert parse_value("3") == 3 and parse_value("1e-3") == 1e-3 and parse_value("true") is True
    assert parse_value("32,32,32") == (32, 32, 32) and parse_value("beam") == "beam"
    path = tmp_path / "c.cfg"
    path.write_text("epochs = 5  # comment\nstrategy=greedy\nfusion_kind = mlp\n")
    cfg = RunConfig.load(path, seed=9)
    assert cfg.train.epochs == 5 and cfg.train.seed == 9 and cfg.decode.strategy == "greedy"
    assert cfg.ablation("Ours").fusion_kind == "mlp"
    assert read_config_file(path)["epochs"] == 5
    path.write_text("learning_speed = 3\n")
    with pytest.raises(ConfigError, match="learning_speed"):
        RunConfig.load(path)
    path.write_text("just words\n")
    with pytest.raises(ConfigError, match=":1:"):
        RunConfig.load(path)
