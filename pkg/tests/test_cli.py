"""Command-line surface: exit codes, file outputs, and idempotency."""

import subprocess
import sys
import time

import pytest

from nestrec.checkpoint import load_checkpoint
from nestrec.cli import main


SYNTH_ARGS = ["--users", "80", "--items", "40", "--noise", "0.1",
              "--d-lang", "8", "--d-img", "4", "--max-len", "16",
              "--seed", "3"]
TRAIN_ARGS = ["--d-model", "8", "--ladder-min", "4", "--blocks", "1",
              "--dropout", "0.1", "--epochs", "3", "--batch-size", "32",
              "--max-len", "16", "--seed", "0", "--deterministic"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--out", str(data)] + SYNTH_ARGS) == 0
    assert main(["train", "--data", str(data), "--out", str(run)]
                + TRAIN_ARGS) == 0
    return data, run


def test_train_writes_loadable_checkpoint_and_history(pipeline):
    data, run = pipeline
    model, manifest, opt_blobs = load_checkpoint(run / "checkpoint.ckpt")
    assert model.width == 8
    assert list(model.ladder) == [4, 8]
    assert manifest["stop_reason"] in ("max_epochs", "early_stop")
    assert int(manifest["opt_step"]) > 0
    assert opt_blobs
    lines = (run / "history.tsv").read_text().splitlines()
    assert lines[0].startswith("# epoch\ttrain_loss")
    assert len(lines) >= 2


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1


def test_unknown_flag_is_usage_error():
    assert main(["train", "--does-not-exist", "x"]) == 1


def test_missing_dataset_is_data_error(tmp_path):
    rc = main(["train", "--data", str(tmp_path / "nope"),
               "--out", str(tmp_path / "out")])
    assert rc == 2


def test_corrupt_checkpoint_is_data_error(pipeline, tmp_path):
    data, _ = pipeline
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    rc = main(["evaluate", "--data", str(data), "--checkpoint", str(bad)])
    assert rc == 2


def test_size_outside_ladder_is_usage_error(pipeline):
    data, run = pipeline
    rc = main(["evaluate", "--data", str(data),
               "--checkpoint", str(run / "checkpoint.ckpt"), "--size", "5"])
    assert rc == 1


def test_unknown_config_key_is_usage_error(pipeline, tmp_path):
    data, _ = pipeline
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus_knob = 1\n")
    rc = main(["train", "--data", str(data), "--out", str(tmp_path / "o"),
               "--config", str(cfg)])
    assert rc == 1


def test_extract_then_evaluate_matches_size_flag(pipeline, tmp_path, capsys):
    data, run = pipeline
    ckpt = run / "checkpoint.ckpt"
    assert main(["evaluate", "--data", str(data), "--checkpoint", str(ckpt),
                 "--size", "4"]) == 0
    direct = capsys.readouterr().out

    sub = tmp_path / "sub4.ckpt"
    assert main(["extract", "--checkpoint", str(ckpt), "--size", "4",
                 "--out", str(sub)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--data", str(data),
                 "--checkpoint", str(sub)]) == 0
    extracted = capsys.readouterr().out
    assert direct == extracted

    model, manifest, _ = load_checkpoint(sub)
    assert model.width == 4
    assert manifest["extracted_size"] == "4"
    assert manifest["extracted_from_width"] == "8"


def test_extraction_composes_through_files(pipeline, tmp_path, capsys):
    _, run = pipeline
    mid = tmp_path / "mid8.ckpt"
    leaf = tmp_path / "leaf4.ckpt"
    ckpt = run / "checkpoint.ckpt"
    assert main(["extract", "--checkpoint", str(ckpt), "--size", "8",
                 "--out", str(mid)]) == 0
    assert main(["extract", "--checkpoint", str(mid), "--size", "4",
                 "--out", str(leaf)]) == 0
    direct = tmp_path / "direct4.ckpt"
    assert main(["extract", "--checkpoint", str(ckpt), "--size", "4",
                 "--out", str(direct)]) == 0
    a, _, _ = load_checkpoint(leaf)
    b, _, _ = load_checkpoint(direct)
    import numpy as np
    for (na, ta, _), (nb, tb, _) in zip(a.named_parameters(),
                                        b.named_parameters()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


def test_curve_writes_table_and_series(pipeline, tmp_path, capsys):
    data, run = pipeline
    out = tmp_path / "curve"
    rc = main(["curve", "--data", str(data),
               "--checkpoint", str(run / "checkpoint.ckpt"),
               "--out", str(out), "--deterministic"])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "popularity baseline" in stdout
    table = (out / "curve.tsv").read_text().splitlines()
    assert table[0] == "metric\t4\t8"
    series = (out / "ndcg_at_10.series.tsv").read_text().splitlines()
    widths = [int(line.split("\t")[0]) for line in series]
    values = [float(line.split("\t")[1]) for line in series]
    assert widths == [4, 8]
    assert all(0.0 <= v <= 1.0 for v in values)
    for name in ("recall_at_5", "recall_at_10", "ndcg_at_5"):
        assert (out / f"{name}.series.tsv").exists()


def test_outputs_idempotent_and_inputs_untouched(pipeline, tmp_path):
    data, run = pipeline
    before = {p.name: p.read_bytes() for p in sorted(data.iterdir())}

    rerun = tmp_path / "rerun"
    assert main(["train", "--data", str(data), "--out", str(rerun)]
                + TRAIN_ARGS) == 0
    assert (rerun / "checkpoint.ckpt").read_bytes() == \
        (run / "checkpoint.ckpt").read_bytes()
    assert (rerun / "history.tsv").read_text() == \
        (run / "history.tsv").read_text()

    data2 = tmp_path / "data2"
    assert main(["synth", "--out", str(data2)] + SYNTH_ARGS) == 0
    for name, blob in before.items():
        assert (data2 / name).read_bytes() == blob

    after = {p.name: p.read_bytes() for p in sorted(data.iterdir())}
    assert before == after


def test_timestamp_header_toggles(pipeline, tmp_path, capsys):
    data, run = pipeline
    ckpt = str(run / "checkpoint.ckpt")
    stamped = tmp_path / "eval_stamped.tsv"
    plain = tmp_path / "eval_plain.tsv"
    assert main(["evaluate", "--data", str(data), "--checkpoint", ckpt,
                 "--out", str(stamped)]) == 0
    assert main(["evaluate", "--data", str(data), "--checkpoint", ckpt,
                 "--out", str(plain), "--deterministic"]) == 0
    assert stamped.read_text().startswith("# generated ")
    body = plain.read_text()
    assert not body.startswith("#")
    assert stamped.read_text().splitlines()[1:] == body.splitlines()


def test_config_file_with_flag_override(pipeline, tmp_path, capsys):
    data, _ = pipeline
    cfg = tmp_path / "train.cfg"
    cfg.write_text("\n".join([
        "# two-rung ladder",
        "d_model = 16",
        "ladder_spec = 8,16",
        "n_blocks = 1",
        "dropout = 0.1",
        "max_epochs = 2",
        "batch_size = 32",
        "max_len = 16",
    ]) + "\n")
    out = tmp_path / "cfg_run"
    started = time.monotonic()
    rc = main(["train", "--data", str(data), "--out", str(out),
               "--config", str(cfg), "--epochs", "1", "--seed", "0",
               "--deterministic"])
    elapsed = time.monotonic() - started
    assert rc == 0
    assert elapsed < 120.0
    model, manifest, _ = load_checkpoint(out / "checkpoint.ckpt")
    assert list(model.ladder) == [8, 16]
    # the --epochs flag beat the config file's max_epochs
    assert manifest["train.max_epochs"] == "1"
    history = (out / "history.tsv").read_text().splitlines()
    assert len(history) == 2


def test_evaluate_valid_split(pipeline, capsys):
    data, run = pipeline
    rc = main(["evaluate", "--data", str(data),
               "--checkpoint", str(run / "checkpoint.ckpt"),
               "--split", "valid"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("split valid")


def test_analyze_memory_prints_worked_savings(capsys):
    assert main(["analyze-memory", "--layers", "4", "--gamma", "2",
                 "--batch", "32", "--len", "50", "--ladder", "8:512"]) == 0
    out = capsys.readouterr().out
    weight_line = next(l for l in out.splitlines()
                       if l.startswith("weight entries saved"))
    act_line = next(l for l in out.splitlines()
                    if l.startswith("activation entries saved"))
    weights = float(weight_line.split(": ")[1].split(" ")[0])
    acts = float(act_line.split(": ")[1].split(" ")[0])
    assert abs(weights - 4 * 0.33 * 512 * 1024) / (4 * 0.33 * 512 * 1024) \
        < 0.05
    assert abs(acts - 4 * 0.33 * 32 * 50 * 1024) / (4 * 0.33 * 32 * 50 * 1024) \
        < 0.05


def test_analyze_memory_bad_ladder_is_usage_error():
    assert main(["analyze-memory", "--ladder", "7,13"]) == 1


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "nestrec.cli",
                           "analyze-memory", "--ladder", "8:64"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "width" in proc.stdout
