"""CLI subcommands: flows, determinism, exit codes, file outputs."""

import hashlib
import json

import pytest

from abutmesh.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    code = main(
        [
            "generate",
            "--n",
            "24",
            "--seed",
            "3",
            "--out",
            str(root),
            "--resolution",
            "0.35",
        ]
    )
    assert code == 0
    return root


DESK_INI = """
[train]
paradigm = ssat
epochs = 50
pretrain_epochs = 2
batch_size = 6
lr = 0.005
seed = 0
steps = {steps}

[model]
embed_dim = 64
encoder_blocks = 2
decoder_blocks = 1
heads = 4
text_width = 64
base_faces = 64
levels = 2
mask_ratio = 0.5

[loss]
recon_weight = 0.1
"""


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    ini = run / "desk.ini"
    ini.write_text(DESK_INI.format(steps=12))
    ckpt = run / "model.ckpt"
    code = main(
        [
            "train",
            "--config",
            str(ini),
            "--manifest",
            str(dataset / "manifest.jsonl"),
            "--cache-dir",
            str(run / "cache"),
            "--checkpoint",
            str(ckpt),
            "--runlog",
            str(run / "runlog.jsonl"),
        ]
    )
    assert code == 0
    return run, ckpt, ini


def test_generate_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert (
            main(
                [
                    "generate",
                    "--n",
                    "20",
                    "--seed",
                    "5",
                    "--out",
                    str(tmp_path / sub),
                    "--resolution",
                    "0.35",
                ]
            )
            == 0
        )
    h = [
        hashlib.sha256((tmp_path / sub / "manifest.jsonl").read_bytes()).hexdigest()
        for sub in ("a", "b")
    ]
    assert h[0] == h[1]


def test_generate_small_n_fails(tmp_path, capsys):
    code = main(["generate", "--n", "10", "--out", str(tmp_path)])
    assert code != 0
    assert "at least 20" in capsys.readouterr().err


def test_preprocess_levels_zero(dataset, tmp_path, capsys):
    code = main(
        [
            "preprocess",
            "--manifest",
            str(dataset / "manifest.jsonl"),
            "--base-faces",
            "64",
            "--levels",
            "0",
            "--out",
            str(tmp_path / "cache0"),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "64 faces, 64 patches" in out
    assert len(list((tmp_path / "cache0").glob("*.bin"))) == 24


def test_preprocess_corrupt_mesh(dataset, tmp_path, capsys):
    manifest = json.loads((dataset / "manifest.jsonl").read_text().splitlines()[1])
    bad_dir = tmp_path / "bad"
    bad_dir.mkdir()
    (bad_dir / "meshes").mkdir()
    rel = manifest["mesh"]
    (bad_dir / rel).parent.mkdir(parents=True, exist_ok=True)
    (bad_dir / rel).write_text("v 0 0 0\nf 1 2 9\n")
    lines = (dataset / "manifest.jsonl").read_text().splitlines()
    (bad_dir / "manifest.jsonl").write_text("\n".join(lines[:2]) + "\n")
    code = main(
        [
            "preprocess",
            "--manifest",
            str(bad_dir / "manifest.jsonl"),
            "--base-faces",
            "64",
            "--levels",
            "1",
            "--out",
            str(tmp_path / "cachebad"),
        ]
    )
    assert code != 0
    err = capsys.readouterr().err
    assert rel in err


def test_train_then_eval_reproduces_final_row(trained, dataset, capsys):
    run, ckpt, _ = trained
    runlog_lines = (run / "runlog.jsonl").read_text().splitlines()
    final = json.loads(runlog_lines[-1])["final_eval"]
    code = main(
        [
            "eval",
            "--checkpoint",
            str(ckpt),
            "--manifest",
            str(dataset / "manifest.jsonl"),
            "--cache-dir",
            str(run / "cache"),
            "--out",
            str(run / "eval.json"),
        ]
    )
    assert code == 0
    report = json.loads((run / "eval.json").read_text())
    for key in ("transgingival", "diameter", "height", "count"):
        assert report[key] == pytest.approx(final[key], abs=1e-12)


def test_eval_missing_checkpoint_exit_2(dataset, capsys):
    code = main(
        [
            "eval",
            "--checkpoint",
            "/nonexistent/model.ckpt",
            "--manifest",
            str(dataset / "manifest.jsonl"),
        ]
    )
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_predict_cli(trained, dataset, capsys):
    run, ckpt, _ = trained
    rec = json.loads((dataset / "manifest.jsonl").read_text().splitlines()[1])
    code = main(
        [
            "predict",
            "--checkpoint",
            str(ckpt),
            "--mesh",
            str(dataset / rec["mesh"]),
            "--location",
            rec["location"],
            "--system",
            rec["system"],
            "--series",
            rec["series"],
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "transgingival=" in out and "height=" in out


def test_sweep_mask_ratios_csv(trained, dataset, tmp_path, capsys):
    run, _, ini = trained
    csv_path = tmp_path / "mask.csv"
    code = main(
        [
            "sweep",
            "--config",
            str(ini),
            "--manifest",
            str(dataset / "manifest.jsonl"),
            "--cache-dir",
            str(run / "cache"),
            "--steps",
            "3",
            "--mask-ratios",
            "0.3,0.5",
            "--out",
            str(csv_path),
        ]
    )
    assert code == 0
    rows = csv_path.read_text().splitlines()
    assert rows[0].startswith("mask_ratio,")
    assert len(rows) == 3


def test_sweep_fractions(trained, dataset, tmp_path, capsys):
    run, _, ini = trained
    csv_path = tmp_path / "frac.csv"
    code = main(
        [
            "sweep",
            "--config",
            str(ini),
            "--manifest",
            str(dataset / "manifest.jsonl"),
            "--cache-dir",
            str(run / "cache"),
            "--steps",
            "3",
            "--fractions",
            "0.2,0.4,0.6,0.8,1.0",
            "--out",
            str(csv_path),
        ]
    )
    assert code == 0
    rows = csv_path.read_text().splitlines()
    assert len(rows) == 6  # header + one row per fraction


def test_sweep_requires_exactly_one_mode(trained, dataset, capsys):
    _, _, ini = trained
    code = main(
        [
            "sweep",
            "--config",
            str(ini),
            "--manifest",
            str(dataset / "manifest.jsonl"),
        ]
    )
    assert code == 2
    assert "exactly one" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--n", "20", "--out", "/tmp/x", "--bogus", "1"])
    assert exc.value.code == 2
