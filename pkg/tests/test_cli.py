import json

import pytest

from mixcurv.cli import main

SMALL = json.dumps({"branching": 2, "depth": 2, "items_per_cluster": 4, "ads_per_cluster": 3})


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthetic logs, graph, a short training run and its indices, built once through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "data"), "--spec", SMALL]) == 0
    assert main(["build-graph", "--logs", str(d / "data/sessions_day1.ndjson"),
                 "--catalog", str(d / "data/catalog.ndjson"), "--bids", str(d / "data/bids.ndjson"),
                 "--out", str(d / "graph.ndjson")]) == 0
    assert main(["train", "--graph", str(d / "graph.ndjson"), "--out", str(d / "ckpt.zip"), "--steps", "6",
                 "--batch-size", "16", "--buckets", "1024", "--d", "4", "--metrics", str(d / "metrics.ndjson")]) == 0
    assert main(["build-index", "--graph", str(d / "graph.ndjson"), "--checkpoint", str(d / "ckpt.zip"),
                 "--out", str(d / "idx"), "--workers", "2", "--k-layer1", "5", "--k-layer2", "10"]) == 0
    return d


def test_pipeline_files(workdir):
    assert len((workdir / "metrics.ndjson").read_text().splitlines()) == 6
    names = sorted(p.name for p in (workdir / "idx").glob("*.ndjson"))
    assert names == sorted(f"{t}.ndjson" for t in ("Q2Q", "Q2I", "I2Q", "I2I", "Q2A", "I2A"))
    assert (workdir / "idx/store/manifest.json").exists()


def test_retrieve_prints_json(workdir, capsys):
    capsys.readouterr()
    assert main(["retrieve", "--indices", str(workdir / "idx"), "--query", "q.0", "--preclick", "i0_0,nope",
                 "--k", "3", "--verbose"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 < len(out["ads"]) <= 3
    assert all(a["provenance"] for a in out["ads"])
    assert any("nope" in w for w in out["warnings"])


def test_resume_continues_step_count(workdir, capsys):
    capsys.readouterr()
    assert main(["train", "--graph", str(workdir / "graph.ndjson"), "--out", str(workdir / "ckpt2.zip"),
                 "--steps", "2", "--batch-size", "16", "--resume", str(workdir / "ckpt.zip")]) == 0
    assert json.loads(capsys.readouterr().out)["step"] == 8


def test_gradcheck_command(workdir, capsys):
    capsys.readouterr()
    code = main(["gradcheck", "--graph", str(workdir / "graph.ndjson"), "--samples", "2", "--buckets", "256",
                 "--d", "3", "--K", "2"])
    out = capsys.readouterr().out
    assert code == 0, out
    assert "kappa_node" in out


def test_report_renders_figures(workdir, tmp_path, capsys):
    capsys.readouterr()
    assert main(["report", "--metrics", str(workdir / "metrics.ndjson"), "--out", str(tmp_path)]) == 0
    figs = [ln.split("\t")[1] for ln in capsys.readouterr().out.splitlines() if ln.startswith("# figure")]
    assert figs and all(p.endswith(".png") for p in figs)
    for p in figs:
        with open(p, "rb") as fh:
            assert fh.read(8) == b"\x89PNG\r\n\x1a\n"


def test_experiment_and_report(tmp_path, capsys):
    grid = {"synthetic": json.loads(SMALL), "configs": [
        {"name": "euclidean", "model": {"M": 2, "d": 4}, "euclidean": True},
        {"name": "unified-M2", "model": {"M": 2, "d": 4}}], "buckets": 1024, "train": {"batch_size": 16}}
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    capsys.readouterr()
    assert main(["experiment", "--grid", str(tmp_path / "grid.json"), "--out", str(tmp_path / "exp"),
                 "--steps", "3", "--seeds", "0"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split("\t")[0] == "config" and len(table) == 3
    assert main(["report", "--experiment", str(tmp_path / "exp"), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out
    assert "unified-M2" in out and "# figure" in out


def test_bad_input_exits_2(tmp_path, capsys):
    (tmp_path / "bad.ndjson").write_text("{not json\n")
    assert main(["build-graph", "--logs", str(tmp_path / "bad.ndjson"), "--catalog", str(tmp_path / "bad.ndjson"),
                 "--out", str(tmp_path / "g")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert main(["retrieve", "--indices", str(tmp_path / "none"), "--query", "q", "--k", "0"]) == 2
