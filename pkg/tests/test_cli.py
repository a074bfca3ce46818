from __future__ import annotations

import pytest

from textcbr.cli import main
from textcbr.config import Config

SMALL = Config(d=8, heads=2, layers=2, dropout=0.0, hidden=8, text_d=8, K=8, D=4,
               max_steps=15, episodes=3, train_games=3, test_games=2, seeds=(0, 1))


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL.to_text())
    return path


def test_gen_writes_catalog_and_manifests(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert main(["gen", "--config", str(cfg_file), "--difficulty", "medium", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["catalog.json", "test_in_medium.tsv", "test_ood_medium.tsv", "train_medium.tsv"]


def test_train_eval_report_round_trip(tmp_path, cfg_file, capsys):
    runs = tmp_path / "runs"
    for variant in ("text", "text+cbr"):
        assert main(["train", "--config", str(cfg_file), "--variant", variant, "--out", str(runs)]) == 0
    for run in ("text_easy", "text+cbr_easy"):
        for split in ("in", "ood"):
            assert main(["eval", "--run", str(runs / run), "--split", split]) == 0
    assert (runs / "text+cbr_easy" / "eval_ood_seed1.csv").exists()
    out = capsys.readouterr().out
    assert "text+cbr ood easy" in out
    assert main(["report", str(runs), "--audit"]) == 0
    assert "audit: every summary number matches" in capsys.readouterr().out
    assert (runs / "report" / "summary.md").exists()


def test_eval_single_seed_marker(tmp_path, cfg_file, capsys):
    runs = tmp_path / "runs"
    main(["train", "--config", str(cfg_file), "--variant", "cbr-only", "--seed", "3", "--out", str(runs)])
    capsys.readouterr()
    assert main(["eval", "--run", str(runs / "cbr-only_easy")]) == 0
    assert "(1 seed)" in capsys.readouterr().out


def test_pretrain_then_train_with_retriever(tmp_path, cfg_file, capsys):
    out = tmp_path / "pre"
    cfg = SMALL.replace(pretrain_epochs=2, seeds=(0,), difficulty="medium", max_steps=50, train_games=8)
    cfg_path = tmp_path / "pre.cfg"
    cfg_path.write_text(cfg.to_text())
    assert main(["pretrain", "--config", str(cfg_path), "--episodes", "30", "--out", str(out)]) == 0
    assert "margin" in capsys.readouterr().out
    params = out / "retriever_seed0.params"
    assert params.exists()
    assert main(["train", "--config", str(cfg_path), "--retriever", str(params), "--out", str(tmp_path / "r")]) == 0
    assert main(["train", "--config", str(cfg_path), "--variant", "text", "--retriever", str(params),
                 "--out", str(tmp_path / "r")]) == 1


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train", "--backend", "faiss"],
    ["eval", "--split", "in"],
    ["train", "--seed", "x"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_unknown_variant_and_missing_run(tmp_path, cfg_file):
    assert main(["train", "--config", str(cfg_file), "--variant", "bike", "--out", str(tmp_path)]) == 1
    assert main(["eval", "--run", str(tmp_path / "nothing")]) == 1
    assert main(["pretrain", "--config", str(cfg_file), "--variant", "text", "--out", str(tmp_path)]) == 1


def test_runtime_errors_exit_2(tmp_path, cfg_file):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key=1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["report", str(tmp_path / "empty")]) == 2
    run = tmp_path / "runs"
    main(["train", "--config", str(cfg_file), "--variant", "text+cbr", "--out", str(run)])
    (run / "text+cbr_easy" / "memory_seed0.mem").write_bytes(b"TCBR")
    assert main(["eval", "--run", str(run / "text+cbr_easy")]) == 2


def test_audit_failure_exit_3(tmp_path, cfg_file, monkeypatch):
    runs = tmp_path / "runs"
    main(["train", "--config", str(cfg_file), "--variant", "text", "--out", str(runs)])
    main(["eval", "--run", str(runs / "text_easy")])
    from textcbr import bench

    monkeypatch.setattr(bench, "audit_report", lambda root, files: ["forced mismatch"])
    assert main(["report", str(runs), "--audit"]) == 3
