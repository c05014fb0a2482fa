import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from ssp_sam import cli
from ssp_sam.errors import NumericalError
from ssp_sam.metrics import aggregate, read_per_sample

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["gen-data", "train", "eval", "predict", "plot", "ablate"]

TINY = {
    "backbone": {"image_size": 32, "feat_dim": 32, "prompt_dim": 32, "warmstart_samples": 0, "seed": 7},
    "model": {"n_res": 4, "encoder_layers": 1, "encoder_heads": 4, "adapter_heads": 4, "ffn_mult": 2},
    "train": {"pretrain_epochs": 1, "finetune_epochs": 2, "decoder_freeze_epochs": 1, "lr": 0.001,
              "warmup_epochs": 0, "batch_size": 16},
}


def subparser(name):
    parser = cli.build_parser()
    if name is None:
        return parser
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices[name]


@pytest.mark.parametrize("name", [None] + COMMANDS)
def test_help_matches_golden(name):
    got = subparser(name).format_help()
    assert got == (GOLDEN / f"help_{name or 'main'}.txt").read_text()


@pytest.mark.parametrize("name", COMMANDS)
def test_help_lists_every_flag_with_default(name):
    parser = subparser(name)
    text = parser.format_help()
    for action in parser._actions:
        if action.dest == "help":
            continue
        assert action.option_strings[-1] in text
        assert action.help and "%(default)s" not in action.help
    assert text.count("(default:") == len(parser._actions) - 1


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert cli.main(["gen-data", "--out", str(root / "data"), "--size", "60", "--regime", "gres", "--seed", "1",
                     "--image-size", "32"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_size_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / name), "--size", "100", "--seed", "3",
                         "--image-size", "32"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "train=80 val=10 test=10"
    lines = (tmp_path / "a" / "annotations.jsonl").read_bytes()
    assert len(lines.splitlines()) == 100
    assert lines == (tmp_path / "b" / "annotations.jsonl").read_bytes()


def test_gen_data_seed_from_environment(tmp_path, monkeypatch):
    cli.main(["gen-data", "--out", str(tmp_path / "flag"), "--size", "12", "--seed", "9", "--image-size", "32"])
    monkeypatch.setenv("SSP_SEED", "9")
    cli.main(["gen-data", "--out", str(tmp_path / "env"), "--size", "12", "--image-size", "32"])
    assert (tmp_path / "flag" / "annotations.jsonl").read_bytes() == (tmp_path / "env" / "annotations.jsonl").read_bytes()
    monkeypatch.setenv("SSP_SEED", "x")
    assert cli.main(["gen-data", "--out", str(tmp_path / "bad"), "--size", "12"]) == cli.EXIT_CONFIG


def test_gres_no_target_fraction(tmp_path):
    cli.main(["gen-data", "--out", str(tmp_path), "--size", "10000", "--regime", "gres", "--seed", "2",
              "--image-size", "32"])
    anns = [json.loads(line) for line in (tmp_path / "annotations.jsonl").read_text().splitlines()]
    frac = np.mean([a["is_no_target"] for a in anns])
    assert abs(frac - 0.2) <= 0.02


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("config.yaml", "train_log.jsonl", "val_metrics.txt", "val_metrics.json", "best/manifest.json",
                 "last/weights.bin"):
        assert (run / name).exists(), name
    saved = yaml.safe_load((run / "config.yaml").read_text())
    assert saved["model"]["n_res"] == 4 and saved["data"]["root"] == str(workspace / "data")


def test_train_seed_precedence(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("SSP_SEED", "11")
    args = cli.build_parser().parse_args(["train", "--config", str(workspace / "tiny.yaml")])
    assert cli.resolve_config(args).train.seed == 11
    args = cli.build_parser().parse_args(["train", "--config", str(workspace / "tiny.yaml"), "--seed", "3"])
    assert cli.resolve_config(args).train.seed == 3
    seeded = tmp_path / "seeded.yaml"
    seeded.write_text(yaml.safe_dump({**TINY, "train": {**TINY["train"], "seed": 6}}))
    args = cli.build_parser().parse_args(["train", "--config", str(seeded), "--set", "train.lr=0.01"])
    cfg = cli.resolve_config(args)
    assert cfg.train.seed == 6 and cfg.train.lr == 0.01


def test_finetune_without_init_warns(workspace, tmp_path, capsys):
    rc = cli.main(["train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                   "--out", str(tmp_path / "ft"), "--phase", "finetune", "--set", "train.finetune_epochs=1",
                   "--set", "train.decoder_freeze_epochs=0"])
    assert rc == 0
    assert "without --init" in capsys.readouterr().err


def test_finetune_from_init(workspace, tmp_path, capsys):
    rc = cli.main(["train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                   "--out", str(tmp_path / "ft"), "--phase", "finetune", "--init", str(workspace / "run" / "last")])
    assert rc == 0
    assert "without --init" not in capsys.readouterr().err


def run_eval(workspace, out):
    assert cli.main(["eval", "--ckpt", str(workspace / "run" / "best"), "--data", str(workspace / "data"),
                     "--split", "val", "--out", str(out)]) == 0
    return json.loads((out / "metrics.json").read_text())


def test_eval_reports(workspace, tmp_path):
    first = run_eval(workspace, tmp_path / "a")
    assert first == run_eval(workspace, tmp_path / "b")
    assert set(first["pr_at"]) == {"0.5", "0.7", "0.8", "0.9"}
    text = (tmp_path / "a" / "metrics.txt").read_text()
    assert all(f"pr@{x}" in text for x in ("0.5", "0.7", "0.8", "0.9"))
    results = read_per_sample(tmp_path / "a" / "per_sample.jsonl")
    assert aggregate(results).giou == pytest.approx(json.loads((tmp_path / "a" / "metrics.json").read_text())["giou"])
    assert len(list((tmp_path / "a" / "masks").glob("*.png"))) == len(results)
    assert (tmp_path / "a" / "config.yaml").exists()


def test_predict_matches_eval_mask(workspace, tmp_path, capsys):
    run_eval(workspace, tmp_path / "ev")
    anns = [json.loads(line) for line in (workspace / "data" / "annotations.jsonl").read_text().splitlines()]
    for ann in [a for a in anns if a["split"] == "val"][:3]:
        out, mask = tmp_path / f"{ann['id']}.png", tmp_path / f"{ann['id']}_mask.png"
        assert cli.main(["predict", "--ckpt", str(workspace / "run" / "best"), "--image",
                         str(workspace / "data" / "images" / f"{ann['id']}.png"), "--expr", ann["expression"],
                         "--out", str(out), "--mask-out", str(mask)]) == 0
        assert mask.read_bytes() == (tmp_path / "ev" / "masks" / f"{ann['id']}.png").read_bytes()
        with Image.open(out) as im:
            assert im.size == (32, 32)
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("positive_pixels=") for line in lines)


def test_predict_no_target_verdict(workspace, tmp_path, capsys, monkeypatch):
    anns = [json.loads(line) for line in (workspace / "data" / "annotations.jsonl").read_text().splitlines()]
    ann = next(a for a in anns if a["is_no_target"])
    image = str(workspace / "data" / "images" / f"{ann['id']}.png")
    args = ["predict", "--ckpt", str(workspace / "run" / "best"), "--image", image, "--expr", ann["expression"],
            "--out", str(tmp_path / "o.png")]
    for pixels, verdict in ((49, "verdict=no-target"), (50, "verdict=target")):
        monkeypatch.setattr(cli, "predict_mask", lambda m, i, e, n=pixels: np.arange(32 * 32).reshape(32, 32) < n)
        assert cli.main(args) == 0
        out = capsys.readouterr().out
        assert f"positive_pixels={pixels}" in out and verdict in out


def test_overlay_blends_red():
    image = np.zeros((3, 4, 4), dtype=np.float32)
    mask = np.zeros((4, 4), bool)
    mask[0, 0] = True
    rgb = cli.overlay(image, mask)
    assert rgb.shape == (4, 4, 3)
    assert tuple(rgb[0, 0]) == (128, 0, 0) and not rgb[1:].any()


def test_predict_rejects_wrong_size(workspace, tmp_path):
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "small.png")
    rc = cli.main(["predict", "--ckpt", str(workspace / "run" / "best"), "--image", str(tmp_path / "small.png"),
                   "--expr", "the red circle", "--out", str(tmp_path / "o.png")])
    assert rc == cli.EXIT_DATA


def test_plot(workspace, tmp_path):
    assert cli.main(["plot", "--log", str(workspace / "run"), "--out", str(tmp_path / "all")]) == 0
    assert sorted(p.name for p in (tmp_path / "all").glob("*.png")) == ["loss_curves.png", "pr_at.png", "val_giou.png"]
    assert cli.main(["plot", "--log", str(workspace / "run"), "--out", str(tmp_path / "one"), "--charts", "giou"]) == 0
    assert [p.name for p in (tmp_path / "one").glob("*.png")] == ["val_giou.png"]
    data = json.loads((tmp_path / "all" / "plot_data.json").read_text())
    log = [json.loads(line) for line in (workspace / "run" / "train_log.jsonl").read_text().splitlines()]
    last = [r["val_giou"] for r in log if r.get("event") == "epoch" and r.get("val_giou") is not None][-1]
    assert data["final_giou"] == last


def test_plot_empty_log_fails(tmp_path, capsys):
    (tmp_path / "train_log.jsonl").write_text("")
    assert cli.main(["plot", "--log", str(tmp_path), "--out", str(tmp_path / "p")]) == cli.EXIT_DATA
    assert "empty" in capsys.readouterr().err
    assert cli.main(["plot", "--log", str(tmp_path / "missing"), "--out", str(tmp_path / "p")]) == cli.EXIT_DATA


def test_exit_codes(workspace, tmp_path, monkeypatch):
    cfg = str(workspace / "tiny.yaml")
    assert cli.main(["train", "--config", str(tmp_path / "nope.yaml")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", cfg, "--set", "train.bogus=1"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", cfg, "--set", "noequals"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", cfg, "--data", str(tmp_path / "none")]) == cli.EXIT_DATA
    assert cli.main(["eval", "--ckpt", str(tmp_path), "--data", str(workspace / "data")]) == cli.EXIT_DATA
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--phase", "bogus"])
    assert info.value.code == 2

    def explode(self, phases):
        raise NumericalError("loss became nan", {"focal": float("nan")})

    monkeypatch.setattr("ssp_sam.trainer.Trainer.run", explode)
    assert cli.main(["train", "--config", cfg, "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "nan")]) == cli.EXIT_NUMERICAL


def test_ablate_command(workspace, tmp_path, capsys):
    spec = tmp_path / "ablations.json"
    spec.write_text(json.dumps({"base": {"train.finetune_epochs": 1, "train.decoder_freeze_epochs": 0},
                                "variants": [{"name": "full", "seeds": [0]},
                                             {"name": "mlp", "overrides": {"model.pg_type": "mlp"}, "seeds": [0]}]}))
    rc = cli.main(["ablate", "--spec", str(spec), "--config", str(workspace / "tiny.yaml"),
                   "--data", str(workspace / "data"), "--out", str(tmp_path / "abl")])
    assert rc == 0
    table = capsys.readouterr().out
    assert table == (tmp_path / "abl" / "ablation_results.txt").read_text()
    assert [line.split()[0] for line in table.splitlines()[1:]] == ["full", "mlp"]
    spec.write_text(json.dumps({"variants": [{"name": "b", "overrides": {"backbone.feat_dim": 16}}]}))
    assert cli.main(["ablate", "--spec", str(spec), "--config", str(workspace / "tiny.yaml"),
                     "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
