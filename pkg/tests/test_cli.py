import csv
import json

import numpy as np
import pytest

from hcpose.cli import main
from hcpose.io import write_pgm


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("HCPOSE_CACHE_DIR", str(tmp_path / "cache"))
    return tmp_path


def _run(*argv):
    return main(["--threads", "1", *argv])


SYNTH = ("synth", "--templates", "car", "duck", "--objects", "2", "--pose-step", "60",
         "--layers", "2", "--width", "64", "--height", "64", "--seed", "4")


def test_unknown_flag_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_missing_input_is_exit_1(workdir, capsys):
    assert _run("train", "--out", "m.json") == 1
    assert "--manifest or --parts" in capsys.readouterr().err
    assert _run("train", "--parts", "missing.jsonl", "--out", "m.json") == 1


def test_lambda_zero_reproduces_training_targets(workdir):
    assert _run("synth", "--templates", "car", "--objects", "1", "--pose-step", "30",
                "--layers", "1", "--width", "64", "--height", "64", "--out", "ds") == 0
    assert _run("train", "--manifest", "ds/manifest.json", "--lambda", "0", "--M", "2",
                "--bsize", "45", "--tol", "1e-12", "--max-iter", "100000",
                "--out", "m.json") == 0
    assert _run("predict", "--manifest", "ds/manifest.json", "--model", "m.json",
                "--out", "p.csv") == 0
    rows = list(csv.DictReader(open(workdir / "p.csv")))
    assert len(rows) == 12
    for r in rows:
        assert abs(float(r["prediction"]) - float(r["pose_deg"])) <= 1e-6


def test_pipeline_is_byte_identical(workdir):
    def pipeline(tag):
        out = workdir / tag
        assert _run(*SYNTH, "--out", str(out / "ds")) == 0
        m = str(out / "ds" / "manifest.json")
        assert _run("features", "--manifest", m, "--M", "2", "--out", str(out / "f.npz")) == 0
        assert _run("train", "--manifest", m, "--M", "2", "--alpha", "0.1",
                    "--out", str(out / "m.json")) == 0
        assert _run("train", "--manifest", m, "--M", "2", "--task", "category",
                    "--alpha", "0.1", "--out", str(out / "c.json")) == 0
        assert _run("predict", "--manifest", m, "--model", str(out / "m.json"), "--wrap",
                    "--out", str(out / "p.csv")) == 0
        assert _run("predict", "--manifest", m, "--model", str(out / "c.json"),
                    "--out", str(out / "c.csv")) == 0
        return {p.relative_to(out).as_posix(): p.read_bytes()
                for p in sorted(out.rglob("*")) if p.is_file() and p.suffix != ".npz"}

    a = pipeline("a")
    b = pipeline("b")
    assert a.keys() == b.keys()
    for name in a:
        if name.endswith(".run.json") or name.endswith("run.json"):
            da, db = json.loads(a[name]), json.loads(b[name])
            assert da["command"] == db["command"] and da["seed"] == db["seed"]
            continue
        assert a[name] == b[name], name
    pred = list(csv.DictReader(open(workdir / "a" / "p.csv")))
    assert all(0 <= float(r["prediction"]) < 360 for r in pred)
    cats = {r["prediction"] for r in csv.DictReader(open(workdir / "a" / "c.csv"))}
    assert cats <= {"1", "2"}


def test_feature_cache_is_reused(workdir):
    assert _run(*SYNTH, "--out", "ds") == 0
    args = ("features", "--manifest", "ds/manifest.json", "--M", "2")
    assert _run(*args, "--out", "f1.npz") == 0
    cached = list((workdir / "cache").glob("features-*.npz"))
    assert len(cached) == 1
    assert _run(*args, "--out", "f2.npz") == 0
    assert _run(*args, "--no-cache", "--out", "f3.npz") == 0
    assert list((workdir / "cache").glob("features-*.npz")) == cached
    x = [np.load(workdir / f"f{i}.npz")["X"] for i in (1, 2, 3)]
    assert np.array_equal(x[0], x[1]) and np.array_equal(x[0], x[2])
    assert _run(*args, "--bsize", "90", "--out", "f4.npz") == 0
    assert len(list((workdir / "cache").glob("features-*.npz"))) == 2


def test_config_file_and_flag_precedence(workdir):
    (workdir / "synth.json").write_text(json.dumps({"templates": ["box"], "objects": 1,
                                                    "pose_step": 90, "width": 64,
                                                    "height": 64, "seed": 1}))
    assert _run("synth", "--config", "synth.json", "--seed", "2", "--out", "ds") == 0
    run = json.loads((workdir / "ds" / "run.json").read_text())
    assert run["config"]["templates"] == ["box"] and run["seed"] == 2
    assert "git_describe" in run
    (workdir / "bad.json").write_text(json.dumps({"colour": 1}))
    assert _run("synth", "--config", "bad.json", "--out", "ds2") == 1


def test_detect_on_pgm_images(workdir):
    imgs = workdir / "imgs"
    imgs.mkdir()
    for i, shift in enumerate((0, 4)):
        img = np.zeros((32, 32))
        img[8:24, 10 + shift:20 + shift] = 1.0
        write_pgm(imgs / f"view{i}.pgm", img)
    (workdir / "labels.csv").write_text(
        "file,object_id,category,pose_deg\nview0.pgm,o1,2,0\nview1.pgm,o1,2,90\n")
    assert _run("detect", "--images", "imgs", "--labels", "labels.csv", "--out", "p.jsonl") == 0
    lines = (workdir / "p.jsonl").read_text().splitlines()
    assert lines
    docs = [json.loads(l) for l in lines]
    assert {d["image_id"] for d in docs} == {"view0", "view1"}
    assert all(d["layer"] == 1 and d["category"] == 2 for d in docs)
    first = (workdir / "p.jsonl").read_bytes()
    assert _run("detect", "--images", "imgs", "--labels", "labels.csv", "--out", "p.jsonl") == 0
    assert (workdir / "p.jsonl").read_bytes() == first
    (workdir / "short.csv").write_text("file,object_id,category,pose_deg\nview0.pgm,o1,2,0\n")
    assert _run("detect", "--images", "imgs", "--labels", "short.csv", "--out", "q.jsonl") == 1


def test_eval_small_config(workdir):
    cfg = {"protocol": "object-wise", "task": "pose", "n_train": [1], "n_test": 1,
           "repeats": 1, "seed": 0, "n_layers": 2, "grid_bsize": [45], "grid_m": [2],
           "grid_alpha": [0.1], "methods": ["proposed"],
           "dataset": {"templates": ["car"], "objects_per_category": 2, "pose_step": 60,
                       "width": 64, "height": 64}}
    (workdir / "exp.json").write_text(json.dumps(cfg))
    assert _run("eval", "--config", "exp.json", "--out", "r1") == 0
    assert _run("eval", "--config", "exp.json", "--out", "r2") == 0
    for name in ("results.csv", "results.json", "errors_bar.svg", "errors_line.svg"):
        assert (workdir / "r1" / name).read_bytes() == (workdir / "r2" / name).read_bytes()
    header = (workdir / "r1" / "results.csv").read_text().splitlines()[0]
    assert header == "protocol,C,n_train,method,repeat,metric,value"
    assert _run("eval", "--config", "exp.json", "--seed", "1", "--out", "r3") == 0
    assert (workdir / "r3" / "results.csv").read_bytes() != \
        (workdir / "r1" / "results.csv").read_bytes()
