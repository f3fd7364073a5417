import numpy as np
import pytest
from PIL import Image

from scanscd.cli import main
from scanscd.data import ScdDataset, open_dataset, read_stats
from scanscd.trainer import evaluate_maps

TINY_OVERRIDES = [
    "model.height=16", "model.width=16", "model.channels_u=8", "model.channels_v=8",
    "model.change_layers=2", "model.stripe_width=2", "model.attention_layers=1",
    "model.heads_per_group=2", "train.batch_size=4",
]


def overrides(*extra):
    out = []
    for item in [*TINY_OVERRIDES, *extra]:
        out += ["--override", item]
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "gen.cfg"
    spec.write_text("height = 16\nwidth = 16\n")
    assert main(["generate", "--spec", str(spec), "--count", "12", "--seed", "4",
                 "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--seed", "1",
                 *overrides("train.epochs=2")]) == 0
    return out


def test_generate_outputs_and_report(data_dir, tmp_path, capsys):
    assert (data_dir / "index.txt").exists() and (data_dir / "stats.cfg").exists()
    assert len(open_dataset(data_dir, "all").ids) == 12
    spec = tmp_path / "gen.cfg"
    spec.write_text("height = 16\nwidth = 16\n")
    assert main(["generate", "--spec", str(spec), "--count", "12", "--seed", "4",
                 "--out", str(tmp_path / "again")]) == 0
    printed = capsys.readouterr().out
    assert "change fraction" in printed and "->" in printed
    for sub in ("im1", "label1", "label2"):
        for f in (data_dir / sub).glob("*.png"):
            assert f.read_bytes() == (tmp_path / "again" / sub / f.name).read_bytes()


def test_generate_refuses_non_empty_out(tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep.txt").write_text("x")
    args = ["generate", "--count", "2", "--out", str(tmp_path / "x")]
    assert main(args) == 1
    assert main(args + ["--force"]) == 0


def test_train_writes_checkpoints_and_logs(trained):
    for name in ("best.ckpt", "last.ckpt", "train.log", "metrics.log", "config.cfg"):
        assert (trained / name).exists()
    assert len((trained / "metrics.log").read_text().splitlines()) == 2


def test_train_rejects_unknown_key(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path),
                 "--override", "train.bogus=1"]) == 1
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path),
                 "--override", "model.num_classes=3", *overrides()]) == 1


def test_eval_ground_truth_scores_one(data_dir, tmp_path, capsys):
    assert main(["eval", "--data", str(data_dir), "--use-gt", "--out", str(tmp_path)]) == 0
    flat = dict(line.split("=", 1) for line in (tmp_path / "metrics.txt").read_text().splitlines())
    for key in ("oa", "miou", "sek", "f_scd"):
        assert float(flat[key]) == 1.0
    assert "SeK" in capsys.readouterr().out
    assert (tmp_path / "confusion.csv").exists()


def test_eval_report_matches_library(data_dir, trained, tmp_path):
    assert main(["eval", "--data", str(data_dir), "--checkpoint", str(trained / "best.ckpt"),
                 "--split", "all", "--out", str(tmp_path)]) == 0
    from scanscd.model import load_checkpoint
    from scanscd.trainer import predict

    ds = ScdDataset(open_dataset(data_dir, "all"))
    model, _ = load_checkpoint(trained / "best.ckpt")
    res = evaluate_maps(predict(model, ds), [(s.label1, s.label2) for s in ds], ds.num_classes)
    assert (tmp_path / "metrics.txt").read_text() == res.report.to_flat_text()


def test_eval_empty_split_and_missing_predictor(data_dir, tmp_path):
    assert main(["eval", "--data", str(data_dir), "--use-gt", "--split", "nope",
                 "--out", str(tmp_path)]) == 2
    assert main(["eval", "--data", str(data_dir), "--out", str(tmp_path)]) == 1
    assert main(["eval", "--data", str(tmp_path / "missing"), "--use-gt",
                 "--out", str(tmp_path)]) == 2


def test_analyze_ground_truth_reproduces_generator(data_dir, tmp_path, capsys):
    assert main(["analyze", "--data", str(data_dir), "--split", "all", "--use-gt",
                 "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert "false change percentage: 0.00%" in printed
    lines = (tmp_path / "transitions.csv").read_text().splitlines()
    assert lines[0] == "from_class,to_class,count,proportion"
    got = {(int(a), int(b)): int(n) for a, b, n, _ in (ln.split(",") for ln in lines[1:])}
    stats = read_stats(data_dir)
    expected = {tuple(map(int, k.split(".")[1].split("_"))): int(v)
                for k, v in stats.items() if k.startswith("pixels.") and int(v) > 0}
    assert got == expected


def test_analyze_prediction_directory(data_dir, tmp_path, capsys):
    pred = tmp_path / "pred"
    for sub in ("label1", "label2"):
        (pred / sub).mkdir(parents=True)
    label = np.array([[1, 2], [3, 0]], dtype=np.uint8)
    Image.fromarray(label, mode="L").save(pred / "label1" / "a.png")
    Image.fromarray(label, mode="L").save(pred / "label2" / "a.png")
    assert main(["analyze", "--data", str(data_dir), "--pred-dir", str(pred),
                 "--out", str(tmp_path / "out")]) == 0
    assert "false change percentage: 100.00%" in capsys.readouterr().out


def test_pseudo_preview(data_dir, trained, tmp_path):
    args = ["pseudo-preview", "--data", str(data_dir), "--checkpoint", str(trained / "last.ckpt"),
            "--out", str(tmp_path)]
    for t in ("0.5", "0.8", "0.95"):
        args += ["--threshold", t]
    assert main(args) == 0
    lines = (tmp_path / "coverage.txt").read_text().splitlines()
    cov = [float(line.split("coverage=")[1]) for line in lines]
    assert [line.split()[0] for line in lines] == ["T=0.5", "T=0.8", "T=0.95"]
    assert cov == sorted(cov, reverse=True) and all(0 <= c <= 1 for c in cov)
    ds = ScdDataset(open_dataset(data_dir, "train"))
    for s in ds:
        with Image.open(tmp_path / "T0.5" / f"{s.sample_id}.png") as im:
            assert im.mode == "P"
            labels = np.array(im)
        assert (labels[s.label1 != 0] == 0).all()
        assert labels.max() <= ds.num_classes


def test_help_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    for sub in ("generate", "train", "eval", "analyze", "pseudo-preview"):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0
        assert "--out" in capsys.readouterr().out
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--use-gt"])
    assert exc.value.code == 1
