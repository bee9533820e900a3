import json
import shutil
from pathlib import Path

import pytest

from adscribe.cli import dispatch, read_predictions

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert dispatch(["synth", "--out", str(root / "data"), "--config", SMOKE]) == 0
    assert dispatch(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config", SMOKE]) == 0
    return root


def test_usage_errors(capsys):
    assert dispatch([]) == 1
    assert dispatch(["frobnicate"]) == 1
    assert dispatch(["synth"]) == 1
    assert dispatch(["synth", "--out", "x", "--bogus"]) == 1


def test_config_errors(tmp_path):
    assert dispatch(["synth", "--out", str(tmp_path), "--set", "nope=1"]) == 1
    assert dispatch(["synth", "--out", str(tmp_path), "--set", "tau"]) == 1
    assert dispatch(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "missing.cfg")]) == 1


def test_invalid_input_is_exit_1(tmp_path):
    (tmp_path / "p.json").write_text("{}")
    (tmp_path / "a.jsonl").write_text("")
    assert dispatch(["eval", "--pred", str(tmp_path / "p.json"), "--annotations", str(tmp_path / "a.jsonl"),
                     "--out", str(tmp_path / "o")]) == 1
    assert dispatch(["infer", "--data", str(tmp_path), "--ckpt", "x", "--out", str(tmp_path / "o")]) == 1


def test_train_outputs(workdir):
    run = workdir / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["clip_len"] == 8 and manifest["seed"] == 0
    assert len(manifest["checkpoint_sha1"]) == 40
    log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    assert set(log[0]) == {"step", "lr", "loss_det", "loss_gen", "loss_total"}
    assert len(log) == manifest["steps"]


def test_infer_and_self_eval(workdir, capsys):
    out = workdir / "infer"
    assert dispatch(["infer", "--data", str(workdir / "data"), "--ckpt", str(workdir / "run" / "model.ckpt"),
                     "--out", str(out), "--config", SMOKE, "--iterations", "3"]) == 0
    rows = json.loads((out / "iterations.json").read_text())
    assert [r["iteration"] for r in rows] == [1, 2, 3]
    preds = json.loads((out / "predictions.json").read_text())
    modes = [it["mode"] for m in preds["movies"] for w in m["per_window"] for it in w["iterations"]]
    assert set(modes) == {"vod", "lgd"}
    first = (out / "predictions.json").read_bytes()
    assert dispatch(["infer", "--data", str(workdir / "data"), "--ckpt", str(workdir / "run" / "model.ckpt"),
                     "--out", str(out), "--config", SMOKE, "--iterations", "3"]) == 0
    assert (out / "predictions.json").read_bytes() == first


def test_eval_of_annotations_is_perfect(workdir, tmp_path):
    data = workdir / "data"
    movies = {}
    for line in (data / "annotations.jsonl").read_text().splitlines():
        rec = json.loads(line)
        movies.setdefault(rec["movie_id"], []).append(
            {"start": rec["start_frame"], "end": rec["end_frame"], "score": 1.0, "script_text": rec["script"]})
    pred = tmp_path / "pred.json"
    pred.write_text(json.dumps({"movies": [{"movie_id": k, "events": v} for k, v in movies.items()]}))
    assert dispatch(["eval", "--pred", str(pred), "--annotations", str(data / "annotations.jsonl"),
                     "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["precision"] == report["recall"] == report["f1"] == 1.0
    assert report["rouge_l"] == 1.0
    assert "f1" in (tmp_path / "ev" / "report.txt").read_text()
    assert len(read_predictions(pred)) == len(movies)


def test_gradcheck(capsys):
    assert dispatch(["gradcheck", "--tiny"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "max relative error" in out
    assert dispatch(["gradcheck"]) == 1


def test_kernel_bench(capsys):
    assert dispatch(["kernel-bench", "--len", "64", "--state", "4", "--trials", "1"]) == 0
    assert capsys.readouterr().out.split()[:4] == ["L", "fft_us", "recurrence_us", "max_rel_err"]


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "adscribe", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "kernel-bench" in res.stdout
