import csv

import numpy as np
import pytest

from dnt import cli
from dnt.synthetic import make_sequence, write_otb

FAST = ["train.learning_rate=1e-2", "train.iterations=3", "train.update_iterations=1",
        "train.num_random=2", "tracker.num_candidates=40"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("otb")
    seq = make_sequence(n_frames=5, occlusion=None, seed=3)
    seq.name = "toy"
    write_otb(seq, root)
    return root


def test_track_then_eval(dataset, tmp_path, capsys):
    out = tmp_path / "res" / "toy.txt"
    assert cli.main(["track", "--sequence", str(dataset / "toy"), "--out", str(out),
                     "--backbone", "test", "--seed", "1", "--set", *FAST]) == 0
    rects = np.loadtxt(out, delimiter=",")
    assert rects.shape == (5, 4) and np.all(rects[:, 2:] > 0)
    assert out.with_suffix(".jsonl").is_file()

    assert cli.main(["eval", "--results", str(out.parent), "--data", str(dataset),
                     "--protocol", "ope", "--out", str(tmp_path / "rep")]) == 0
    assert "OPE over 1 sequences" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "rep" / "per_sequence.csv")))
    assert rows[0]["sequence"] == "toy"


def test_eval_uses_env_root(dataset, tmp_path, monkeypatch):
    res = tmp_path / "res"
    res.mkdir()
    gt = (dataset / "toy" / "groundtruth_rect.txt").read_text()
    (res / "toy.txt").write_text(gt)
    monkeypatch.setenv("DNT_DATA", str(dataset))
    assert cli.main(["eval", "--results", str(res), "--out", str(tmp_path / "rep")]) == 0


def test_config_file_and_errors(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("tracker.lam = 3\n")
    code = cli.main(["track", "--sequence", str(dataset / "toy"), "--out", str(tmp_path / "r.txt"),
                     "--config", str(cfg)])
    assert code == 2 and "lam" in capsys.readouterr().err
    code = cli.main(["eval", "--results", str(tmp_path), "--data", str(dataset), "--out", str(tmp_path / "o")])
    assert code == 2 and "missing result log" in capsys.readouterr().err


def test_bench_command(dataset, tmp_path):
    assert cli.main(["bench", "--data", str(dataset), "--protocol", "ope", "--out", str(tmp_path),
                     "--set", *FAST]) == 0
    assert (tmp_path / "results" / "toy.txt").is_file()
    assert (tmp_path / "aggregate.csv").is_file()
    assert "train.iterations = 3" in (tmp_path / "config.cfg").read_text()


def test_parser_lists_commands():
    sub = cli.build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"track", "eval", "bench", "selftest"}
