import csv
import hashlib
import json
import logging

import numpy as np
import pytest

from activemeta import cli, segnet
from activemeta.synthdata import load_split


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_hashes(root, skip=("run.json",)):
    return {str(p.relative_to(root)): sha(p) for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pretrained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert cli.main(["-q", "pretrain", "--data", str(small_data / "src"), "--out", str(out),
                     "--epochs", "2", "--width", "4"]) == 0
    return out / "params.mtp"


def finetune_argv(small_data, params, out, *extra):
    return ["finetune", "-q", "--params", str(params), "--source", str(small_data / "src"),
            "--target", str(small_data / "tgt"), "--out", str(out), *extra]


def test_gen_data_split_and_determinism(tmp_path, capsys):
    argv = ["gen-data", "--domain", "mets", "--patients", "30", "--seed", "7", "--image-size", "16",
            "--slices", "2"]
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert "24 train, 6 val" in capsys.readouterr().out
    lines = (tmp_path / "a" / "dataset.txt").read_text().splitlines()
    assert [l.split("\t")[1] for l in lines].count("train") == 24
    assert len([p for p in (tmp_path / "a").iterdir() if p.is_dir()]) == 30
    assert cli.main(argv + ["--out", str(tmp_path / "b")]) == 0
    assert tree_hashes(tmp_path / "a") == tree_hashes(tmp_path / "b")


def test_missing_out_is_usage_error(capsys):
    assert cli.main(["gen-data", "--domain", "mets"]) == 2
    assert "missing required --out" in capsys.readouterr().err


def test_unknown_domain_is_runtime_error(tmp_path):
    assert cli.main(["gen-data", "--domain", "lymphoma", "--out", str(tmp_path)]) == 1


def test_pretrain_zero_epochs(small_data, tmp_path):
    assert cli.main(["-q", "pretrain", "--data", str(small_data / "src"), "--out", str(tmp_path),
                     "--epochs", "0", "--width", "4", "--seed", "3"]) == 0
    params, net = segnet.load_params(tmp_path / "params.mtp")
    assert params.equals(segnet.init_params(net, 3))
    rows = read_csv(tmp_path / "pretrain.csv")
    assert rows[0] == ["epoch", "train_loss", "source_val_dsc"] and len(rows) == 2 and rows[1][0] == "0"
    manifest = json.loads((tmp_path / "run.json").read_text())
    assert manifest["status"] == "complete" and manifest["outputs"]["params.mtp"] == sha(tmp_path / "params.mtp")


def test_pretrain_missing_dataset_names_file(tmp_path, capsys):
    assert cli.main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "nope" in capsys.readouterr().err


def test_finetune_active_trajectory_and_order_log(small_data, pretrained, tmp_path):
    argv = finetune_argv(small_data, pretrained, tmp_path / "run", "--method", "active", "--meta-steps", "3",
                         "--order-log", str(tmp_path / "run" / "order.csv"))
    assert cli.main(argv) == 0
    rows = read_csv(tmp_path / "run" / "trajectory.csv")
    assert rows[0] == ["step", "outer_loss", "source_val_dsc", "target_val_dsc"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert all(len(v.split(".")[1]) == 6 for r in rows[1:] for v in r[1:])
    order = read_csv(tmp_path / "run" / "order.csv")
    assert {r[0] for r in order[1:]} == {"0", "1", "2"}
    results = json.loads((tmp_path / "run" / "run.json").read_text())["results"]
    assert results["method"] == "active"
    assert results["forgetting"] == pytest.approx(results["initial_source_val_dsc"] - results["final_source_val_dsc"])


def test_finetune_naive_warns_about_beta(small_data, pretrained, tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert cli.main(finetune_argv(small_data, pretrained, tmp_path, "--method", "naive", "--beta", "0.1",
                                      "--meta-steps", "1")) == 0
    assert "ignores --beta" in caplog.text


@pytest.mark.parametrize("flags,message", [
    (["--tau", "1.5"], "DSC threshold must be in [0, 1]"),
    (["--method", "greedy"], "naive"),
    (["--mode", "third"], "second"),
])
def test_finetune_flag_validation(small_data, pretrained, tmp_path, capsys, flags, message):
    assert cli.main(finetune_argv(small_data, pretrained, tmp_path, *flags)) == 2
    assert message in capsys.readouterr().err


def test_eval_oracle_and_zero_params(small_data, tmp_path, monkeypatch, capsys):
    samples = [s for v in load_split(small_data / "tgt", "val") for s in v.slices]
    rows, summary = cli.eval_rows([s.y for s in samples], samples)
    assert all(r[3] == "1.000000" for r in rows)
    assert all(r[1] == "1.000000" and r[2] == "0.000000" for r in summary)

    # zero parameters predict background everywhere
    net = segnet.NetworkConfig(4, 4, 2, 32)
    segnet.save_params(tmp_path / "z.mtp", segnet.zeros_like_params(net), net)
    assert cli.main(["eval", "--params", str(tmp_path / "z.mtp"), "--data", str(small_data / "tgt"),
                     "--out", str(tmp_path / "e.csv"), "--summary", str(tmp_path / "s.csv")]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "class,mean,std,n"
    per_slice = read_csv(tmp_path / "e.csv")[1:]
    lesion = {(s.patient, str(s.index)) for s in samples if (s.y > 0).any()}
    assert lesion
    for patient, idx, cls, dsc in per_slice:
        if (patient, idx) in lesion and cls != "0":
            truth = next(s.y for s in samples if s.patient == patient and str(s.index) == idx)
            if (truth == int(cls)).any():
                assert dsc == "0.000000"
    # summary std is the n-1 sample std of the per-slice values
    values = [float(r[3]) for r in per_slice if r[2] == "0"]
    summary_rows = read_csv(tmp_path / "s.csv")
    assert summary_rows[1][0] == "0"
    assert float(summary_rows[1][2]) == pytest.approx(np.std(values, ddof=1), abs=1e-6)


def fake_run(root, name, method, seed, target_enh, forgetting):
    d = root / name
    d.mkdir()
    results = {"method": method, "seed": seed, "initial_source_val_dsc": 0.9, "initial_target_val_dsc": 0.5,
               "initial_target_val_enhancing_dsc": 0.4, "final_source_val_dsc": 0.9 - forgetting,
               "final_target_val_dsc": target_enh + 0.1, "final_target_val_enhancing_dsc": target_enh,
               "forgetting": forgetting}
    (d / "run.json").write_text(json.dumps({"command": "finetune", "status": "complete", "results": results}))


def test_report_aggregates(tmp_path, capsys):
    for seed, (enh, fg) in enumerate([(0.5, 0.1), (0.6, 0.0), (0.8, 0.2)]):
        fake_run(tmp_path, f"active_s{seed}", "active", seed, enh, fg)
    (tmp_path / "junk").mkdir()
    assert cli.main(["report", "--runs", str(tmp_path), "--out", str(tmp_path / "r.csv")]) == 0
    rows = read_csv(tmp_path / "r.csv")
    assert rows[0] == list(cli.REPORT_HEADER)
    assert [r[0] for r in rows[1:]] == ["baseline", "run", "run", "run", "aggregate"]
    agg = rows[-1]
    assert agg[1:4] == ["active", "", "3"]
    assert float(agg[4]) == pytest.approx((0.5 + 0.6 + 0.8) / 3, abs=1e-6)
    assert float(agg[5]) == pytest.approx(np.std([0.5, 0.6, 0.8], ddof=1), abs=1e-6)
    assert float(agg[10]) == pytest.approx(0.1, abs=1e-6)
    assert "aggregate,active" in capsys.readouterr().out


def test_report_empty_dir(tmp_path, capsys):
    assert cli.main(["report", "--runs", str(tmp_path)]) == 1
    assert "no runs found" in capsys.readouterr().err


def test_config_file_sets_defaults(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# small set\npatients=3\nimage_size=16\nslices=2\nno-skull=true\n", encoding="utf-8")
    assert cli.main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "d"), "--patients", "2"]) == 0
    lines = (tmp_path / "d" / "dataset.txt").read_text().splitlines()
    assert len(lines) == 2  # the flag overrides the file
    assert cli.main(["gen-data", "--out", str(tmp_path / "f"), "--patients", "2", "--image-size", "16",
                     "--slices", "2", "--no-skull"]) == 0
    assert tree_hashes(tmp_path / "d") == tree_hashes(tmp_path / "f")
    cfg.write_text("bogus=1\n", encoding="utf-8")
    assert cli.main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "e")]) == 2


def test_parse_seeds():
    assert cli.parse_seeds("0-3,7") == [0, 1, 2, 3, 7]


def test_sweep_writes_report(small_data, pretrained, tmp_path):
    argv = ["sweep", "-q", "--params", str(pretrained), "--source", str(small_data / "src"),
            "--target", str(small_data / "tgt"), "--out", str(tmp_path), "--methods", "naive,active",
            "--seeds", "0-1", "--meta-steps", "1"]
    assert cli.main(argv) == 0
    assert sorted(p.name for p in tmp_path.iterdir() if p.is_dir()) == ["active_s0", "active_s1", "naive_s0",
                                                                      "naive_s1"]
    rows = read_csv(tmp_path / "report.csv")
    assert [r[:4] for r in rows if r[0] == "aggregate"] == [["aggregate", "naive", "", "2"],
                                                           ["aggregate", "active", "", "2"]]
