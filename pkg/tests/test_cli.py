import csv
import json
import subprocess
import sys

import pytest

from sanreid.cli import ABLATION_ROWS, main
from sanreid.config import RunConfig
from sanreid.datamodel import load_manifest
from sanreid.evaluation import DescriptorSet, EvalReport


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--num-ids", "5", "--imgs-per-id", "4",
                 "--num-attrs", "2", "--size", "128", "--holdout", "2", "--withhold", "0.5"]) == 0
    cfg = RunConfig(backbone="tiny", backbone_width=8, input_size=128, q=8, d=8, optimizer="adam",
                    lr=1e-3, epochs=1, batch_size=8, predictor_epochs=1,
                    manifest=str(root / "data" / "manifest.jsonl"), out_dir=str(root / "run"))
    cfg.save(root / "cfg.json")
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_wrote_withheld(workspace):
    withheld = json.loads((workspace / "data/withheld.json").read_text())
    m = load_manifest(workspace / "data/manifest.jsonl")
    assert len(withheld) == 5 and all(m.records[int(i)].attribute is None for i in withheld)


def test_softlabel_then_train_eval_extract(workspace, capsys):
    cfg = workspace / "cfg.json"
    soft = workspace / "soft.jsonl"
    assert run("softlabel", "--config", cfg, "--manifest", workspace / "data/manifest.jsonl",
               "--predictor", workspace / "pred.pt", "--train", "--out", soft) == 0
    m = load_manifest(soft)
    assert all(r.attribute is not None for r in m.records)
    assert len(soft.with_suffix(".audit.jsonl").read_text().splitlines()) == 5
    # reuse the saved predictor
    assert run("softlabel", "--manifest", soft, "--predictor", workspace / "pred.pt", "--out", workspace / "soft2.jsonl") == 0

    assert run("train", "--config", cfg, "--manifest", soft, "--out", workspace / "run") == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] > 0

    ckpt = workspace / "run/model.pt"
    assert run("eval", "--config", cfg, "--checkpoint", ckpt, "--manifest", soft, "--out", workspace / "ev") == 0
    rep = EvalReport.load(workspace / "ev/report.json")
    assert len(rep.cmc) == 20 and rep.protocol["name"] == "plain"
    assert (workspace / "ev/cmc.csv").read_text().startswith("rank,rate")

    assert run("eval", "--config", cfg, "--checkpoint", ckpt, "--manifest", soft, "--protocol", "vehicleid",
               "--repeats", "3", "--out", workspace / "ev_vid") == 0
    assert EvalReport.load(workspace / "ev_vid/report.json").map_std is not None

    assert run("extract", "--config", cfg, "--checkpoint", ckpt, "--manifest", soft, "--out", workspace / "d.npz") == 0
    d = DescriptorSet.load(workspace / "d.npz")
    assert d.features.shape == (10, 8 * 8 + 8)


def test_ablate_six_rows(workspace):
    out = workspace / "abl"
    assert run("ablate", "--config", workspace / "cfg.json", "--out", out) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert [r["setting"] for r in table] == [row[0] for row in ABLATION_ROWS]
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and set(rows[0]) == {"setting", "branch", "q", "rank1", "rank5", "mAP"}


@pytest.mark.parametrize("n", [1, 4])
def test_plot(tmp_path, n):
    paths = []
    for i in range(n):
        rep = EvalReport([0.2 + 0.1 * i] * 10 + [0.9] * 10, 0.5, {}, [], 1, 0)
        paths.append(rep.save(tmp_path / f"r{i}" / "report.json"))
    assert run("plot", *paths, "--out", tmp_path / "fig.png") == 0
    assert (tmp_path / "fig.png").stat().st_size > 0
    rows = list(csv.DictReader(open(tmp_path / "fig.csv")))
    assert len(rows) == 20 * n and {r["report"] for r in rows} == {f"r{i}" for i in range(n)}


def test_plot_label_mismatch(tmp_path):
    p = EvalReport([1.0], 1.0, {}, [], 1, 0).save(tmp_path / "a/report.json")
    assert run("plot", p, "--labels", "x", "y", "--out", tmp_path / "f.png") == 2


def test_exit_codes(tmp_path, workspace):
    (tmp_path / "bad.json").write_text('{"epochs": 0}')
    assert run("train", "--config", tmp_path / "bad.json") == 2
    assert run("train", "--config", workspace / "cfg.json", "--manifest", tmp_path / "none.jsonl") == 3
    (tmp_path / "empty.jsonl").write_text("")
    assert run("train", "--config", workspace / "cfg.json", "--manifest", tmp_path / "empty.jsonl") == 3
    assert run("eval", "--checkpoint", tmp_path / "missing.pt", "--manifest", workspace / "data/manifest.jsonl") == 2
    assert run("plot", tmp_path / "nope.json", "--out", tmp_path / "f.png") == 3


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "sanreid.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "eval", "extract", "softlabel", "ablate", "plot", "synth"):
        assert cmd in out.stdout
