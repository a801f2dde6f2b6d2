import csv
import json

import numpy as np
import pytest

from udg.cli import main
from udg.config import ConfigError, load_config, parse_lines
from udg.data import write_cifar_binary
from udg.metrics import REPORT_KEYS

SMALL = """\
# tiny synthetic run
seed = 4
output_dir = {out}
data.kind = synthetic
data.dim = 8
data.n_id_classes = 3
data.n_ood_clusters = 3
data.samples_per_cluster = 40
data.test_per_cluster = 20
train.epochs = 3
train.k_groups = 8
train.hidden = 16
train.batch_labeled = 32
train.batch_unlabeled = 64
detectors = MSP, EBO
"""


def write_config(tmp_path, extra="", name="run.conf", out="out"):
    """SMALL plus ``extra`` lines; keys in ``extra`` replace the base value."""
    lines = dict(l.split(" = ", 1) for l in SMALL.format(out=out).splitlines() if " = " in l)
    lines.update(l.split(" = ", 1) for l in extra.splitlines() if " = " in l)
    path = tmp_path / name
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_train_writes_run_directory(tmp_path):
    assert main(["train", str(write_config(tmp_path))]) == 0
    out = tmp_path / "out"
    for name in ("model.ckpt", "epochs.jsonl", "config.resolved", "report.json"):
        assert (out / name).exists(), name
    assert len((out / "epochs.jsonl").read_text().splitlines()) == 3
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"MSP", "EBO"}
    assert list(report["MSP"]["mean"]) == list(REPORT_KEYS)
    assert list(report["MSP"]["synthetic"]) == list(REPORT_KEYS)


def test_resolved_config_reloads_identically(tmp_path):
    cfg = load_config(write_config(tmp_path))
    again = tmp_path / "again.conf"
    again.write_text(cfg.dumps())
    assert load_config(again).dumps() == cfg.dumps()


def test_missing_field_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.conf"
    path.write_text(SMALL.format(out="out").replace("train.epochs = 3\n", ""))
    assert main(["train", str(path)]) == 2
    assert "train.epochs" in capsys.readouterr().err


def test_unknown_key_and_bad_value(tmp_path, capsys):
    assert main(["train", str(write_config(tmp_path, "train.epoch = 3\n"))]) == 2
    assert "train.epoch" in capsys.readouterr().err
    assert main(["train", str(write_config(tmp_path, "train.tau = high\n"))]) == 2
    with pytest.raises(ConfigError):
        parse_lines(["no equals sign"])


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("UDG_SEED", "11")
    cfg = load_config(write_config(tmp_path))
    assert cfg.seed == 11 and cfg.train.seed == 11 and cfg.data.synthetic.seed == 11
    assert "seed = 11\n" in cfg.dumps()


def test_train_is_deterministic(tmp_path):
    main(["train", str(write_config(tmp_path, out="a", name="a.conf"))])
    main(["train", str(write_config(tmp_path, out="b", name="b.conf"))])
    for name in ("model.ckpt", "epochs.jsonl", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_numerical_abort_exit_code(tmp_path, capsys):
    with np.errstate(all="ignore"):
        assert main(["train", str(write_config(tmp_path, "train.lr0 = 1e200\n"))]) == 4


def test_eval_repeat_oracle_and_scores(tmp_path, capsys):
    conf = write_config(tmp_path)
    main(["train", str(conf)])
    ckpt = str(tmp_path / "out" / "model.ckpt")
    assert main(["eval", ckpt, str(conf), "--out", str(tmp_path / "e1")]) == 0
    assert main(["eval", ckpt, str(conf), "--out", str(tmp_path / "e2")]) == 0
    first = (tmp_path / "e1" / "report.json").read_bytes()
    assert first == (tmp_path / "e2" / "report.json").read_bytes()
    assert first == (tmp_path / "out" / "report.json").read_bytes()

    oracle = write_config(tmp_path, "eval.oracle = true\neval.write_scores = true\n", name="o.conf")
    assert main(["eval", ckpt, str(oracle), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["ORACLE"]["mean"]["auroc"] == 1.0
    assert rows(tmp_path / "o" / "scores_ORACLE_synthetic.csv")[0] == \
        ["sample_id", "score", "is_id", "true_class", "pred_class"]


def test_eval_bad_checkpoint(tmp_path):
    conf = write_config(tmp_path)
    main(["train", str(conf)])
    raw = bytearray((tmp_path / "out" / "model.ckpt").read_bytes())
    raw[4] = 2
    (tmp_path / "v2.ckpt").write_bytes(bytes(raw))
    assert main(["eval", str(tmp_path / "v2.ckpt"), str(conf)]) == 3
    assert main(["eval", str(tmp_path / "missing.ckpt"), str(conf)]) == 3


def test_eval_odin_search_on_validation_split(tmp_path):
    conf = write_config(tmp_path, "detectors = MSP, ODIN\neval.odin_search = true\n")
    assert main(["train", str(conf)]) == 0
    chosen = json.loads((tmp_path / "out" / "odin.json").read_text())
    assert chosen["temperature"] in (1.0, 10.0, 100.0, 1000.0)
    assert chosen["epsilon"] in (0.0, 0.0005, 0.001, 0.0014, 0.002, 0.005)


def test_sweep_k(tmp_path):
    conf = write_config(tmp_path, "sweep.K = 2, 8, 32, 128\n")
    assert main(["sweep", str(conf), "--axis", "K"]) == 0
    table = rows(tmp_path / "out" / "sweep_K.csv")
    assert table[0] == ["axis_value", "fpr95", "auroc", "aupr_in", "aupr_out", "accuracy"]
    assert [r[0] for r in table[1:]] == ["2", "8", "32", "128"]


def test_sweep_filter_strategy_parallel_matches_sequential(tmp_path):
    extra = "sweep.filter_strategy = UDG, THRESH, SORT\n"
    main(["sweep", str(write_config(tmp_path, extra, "s.conf", "seq")), "--axis", "filter_strategy"])
    main(["sweep", str(write_config(tmp_path, extra, "p.conf", "par")), "--axis", "filter_strategy",
          "--parallel", "2"])
    seq = rows(tmp_path / "seq" / "sweep_filter_strategy.csv")
    assert len(seq) == 4
    assert seq == rows(tmp_path / "par" / "sweep_filter_strategy.csv")
    for v in ("UDG", "THRESH", "SORT"):
        assert (tmp_path / "seq" / "sweep_filter_strategy" / f"filter_strategy={v}" / "model.ckpt").exists()


def test_sort_filters_more_as_tau_decreases(tmp_path):
    conf = write_config(tmp_path, "train.filter = SORT\nsweep.tau = 0.95, 0.8, 0.5, 0.2\n")
    assert main(["sweep", str(conf), "--axis", "tau"]) == 0
    counts = []
    for tau in ("0.95", "0.8", "0.5", "0.2"):
        log = (tmp_path / "out" / "sweep_tau" / f"tau={tau}" / "epochs.jsonl").read_text()
        counts.append(json.loads(log.splitlines()[-1])["n_filtered"])
    assert counts == sorted(counts) and counts[0] < counts[-1]


def test_sweep_odin_grid(tmp_path):
    conf = write_config(tmp_path, "sweep.odin = 1, 1000\nsweep.odin_epsilon = 0, 0.001\n")
    assert main(["sweep", str(conf), "--axis", "odin"]) == 0
    table = rows(tmp_path / "out" / "sweep_odin.csv")
    assert [r[0] for r in table[1:]] == ["T=1;eps=0", "T=1;eps=0.001", "T=1000;eps=0", "T=1000;eps=0.001"]


def test_sweep_requires_axis_values(tmp_path, capsys):
    assert main(["sweep", str(write_config(tmp_path)), "--axis", "tau"]) == 2
    assert "sweep.tau" in capsys.readouterr().err


def test_gen_synthetic_round_trip(tmp_path):
    conf = write_config(tmp_path)
    assert main(["gen-synthetic", str(conf)]) == 0
    syn = tmp_path / "out" / "synthetic"
    assert (syn / "test_truth.csv").read_text().startswith("sample_id,is_id\n")
    assert main(["train", str(syn / "records.conf")]) == 0
    assert main(["train", str(conf)]) == 0
    # identical data through the files gives an identical model
    assert (tmp_path / "out" / "records_run" / "model.ckpt").read_bytes() == \
        (tmp_path / "out" / "model.ckpt").read_bytes()


def test_records_with_cifar_format_and_manifest(tmp_path):
    rng = np.random.default_rng(0)
    write_cifar_binary(tmp_path / "lab.bin", [0, 1] * 6, rng.integers(0, 256, (12, 3072)))
    write_cifar_binary(tmp_path / "unl.bin", [0] * 10, rng.integers(0, 256, (10, 3072)))
    write_cifar_binary(tmp_path / "tin.bin", [0] * 6, rng.integers(0, 256, (6, 3072)))
    write_cifar_binary(tmp_path / "c10.bin", [1, 0, 1, 0], rng.integers(0, 256, (4, 3072)))
    (tmp_path / "split.txt").write_text("tin/2 ID 1\ntin/4 ID 0\nc10/3 OOD  # mislabeled\n")
    (tmp_path / "c.conf").write_text(
        "seed = 0\noutput_dir = cout\ndata.kind = records\ndata.format = cifar\n"
        "data.labeled = lab.bin\ndata.unlabeled = unl.bin\ndata.test.tin = tin.bin\n"
        "data.test_default_id.tin = false\ndata.test.c10 = c10.bin\ndata.manifest = split.txt\n"
        "train.epochs = 1\ntrain.k_groups = 4\ntrain.hidden = 4\neval.write_scores = true\n")
    assert main(["train", str(tmp_path / "c.conf")]) == 0
    rep = json.loads((tmp_path / "cout" / "report.json").read_text())
    assert list(rep["MSP"]) == ["tin", "c10", "mean"]
    tin = rows(tmp_path / "cout" / "scores_MSP_tin.csv")[1:]
    assert [r[2] for r in tin] == ["0", "0", "1", "0", "1", "0"]
    assert [r[3] for r in tin][2] == "1"
    c10 = rows(tmp_path / "cout" / "scores_MSP_c10.csv")[1:]
    assert [(r[2], r[3]) for r in c10] == [("1", "1"), ("1", "0"), ("1", "1"), ("0", "-1")]


def test_records_unknown_manifest_sample(tmp_path, capsys):
    conf = write_config(tmp_path)
    main(["gen-synthetic", str(conf)])
    syn = tmp_path / "out" / "synthetic"
    (syn / "m.txt").write_text("synthetic/999999 ID 0\n")
    with open(syn / "records.conf", "a") as fh:
        fh.write("data.manifest = m.txt\n")
    assert main(["train", str(syn / "records.conf")]) == 3
    assert "synthetic/999999" in capsys.readouterr().err
