import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlprompt import report
from vlprompt.cli import main as cli_main
from vlprompt.exceptions import ConfigError, FrozenError, PlotError
from vlprompt.experiments import (CSV_COLUMNS, ExperimentConfig, LossCurve, ResultRecord, ablate_tokens,
                                  curves_csv, read_curves, read_records, records_csv, run)
from vlprompt.selftest import tiny_model
from vlprompt.vlm import save


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.vlmc"
    save(tiny_model(0).freeze(), path)
    return str(path)


def small_config(ckpt, **kw):
    base = dict(methods=["zero_shot", "knn", "prol"], shifts=["in_dist", "sketch", "adv_filtered"],
                seeds=[0], checkpoint=ckpt, n_context=4, n_query=2, n_test_per_class=2,
                probe_pool_per_class=4, adv_pool_per_class=6, train={"epochs": 1, "batch_size": 8})
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_rejects_bad_fields_together():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig(methods=["nope"], n_base=[9], seeds=[], shifts=["corruption:blur:9"])
    msg = str(info.value)
    assert "nope" in msg and "n_base" in msg and "seeds" in msg and "blur" in msg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"methods": ["prol"], "colour": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=["robust_prol"], n_context=7)
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=["prol"], train={"lr": -1})
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=["prol"], schema_version=2)


def test_result_record_accounting():
    r = ResultRecord.from_counts("prol", "in_dist", "base", 8, 0, 137, 400)
    assert r.accuracy == 137 / 400 and r.correct == 137
    with pytest.raises(ValueError):
        ResultRecord.from_counts("prol", "in_dist", "base", 8, 0, 5, 4)


def test_run_grid_shape_and_regimes(ckpt, tmp_path):
    cfg = small_config(ckpt, out_dir=str(tmp_path))
    records = run(cfg)
    cells = {(r.method, r.shift, r.regime) for r in records}
    assert ("knn", "in_dist", "novel") not in cells            # base-only baseline
    assert sum(1 for r in records if r.method == "prol") == 6
    assert all(0 <= r.accuracy <= 1 and r.accuracy == r.correct / r.n_test for r in records)
    assert all(r.n_test == 16 for r in records if r.shift != "adv_filtered")
    with open(tmp_path / "results.csv") as fh:
        assert fh.readline().strip() == ",".join(CSV_COLUMNS)
    back = read_records(tmp_path / "results.csv")
    assert [(r.method, r.shift, r.regime, r.correct) for r in back] == \
        [(r.method, r.shift, r.regime, r.correct) for r in records]
    assert json.load(open(tmp_path / "results.json"))[0]["method"] == records[0].method


def test_run_is_byte_deterministic(ckpt):
    cfg = small_config(ckpt, methods=["zero_shot", "prol"], shifts=["rendition"])
    assert records_csv(run(cfg)) == records_csv(run(cfg))


def test_run_requires_frozen_checkpoint(tmp_path):
    path = tmp_path / "open.vlmc"
    save(tiny_model(0), path)
    with pytest.raises(FrozenError):
        run(small_config(str(path)))
    with pytest.raises(ConfigError):
        run(small_config(str(tmp_path / "missing.vlmc")))


def test_ablation_curves(ckpt):
    cfg = small_config(ckpt, methods=["prol", "robust_prol"], train={"epochs": 3, "batch_size": 8})
    curves = ablate_tokens(cfg, [2, 4], eval_per_class=1)
    assert len(curves) == 8 and all(len(c.losses) == 3 for c in curves)
    with pytest.raises(ConfigError):
        ablate_tokens(cfg, [3])
    text = curves_csv(curves)
    assert text.splitlines()[0] == "method,n_context,seed,split,epoch,loss"


# ------------------------------------------------------------ tables and plots

def _rec(method, acc, seed=0, shift="in_dist", regime="base", n=8):
    return ResultRecord.from_counts(method, shift, regime, n, seed, int(acc * 100), 100)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 5).map(float)), min_size=1, max_size=8))
def test_rank_marks_against_sort_oracle(values):
    marks = report.rank_marks(values)
    distinct = sorted({v for v in values if v is not None}, reverse=True)
    for v, m in zip(values, marks):
        expect = None
        if v is not None and v == distinct[0]:
            expect = "best"
        elif v is not None and len(distinct) > 1 and v == distinct[1]:
            expect = "second"
        assert m == expect


def test_tabulate_marks_and_means():
    recs = [_rec("a", 0.5), _rec("a", 0.7, seed=1), _rec("b", 0.9), _rec("c", 0.2)]
    md, csv_text, warnings = report.tabulate(recs, "base_table")
    assert "| a | <u>60.00</u> |" in md and "| b | **90.00** |" in md and "| c | 20.00 |" in md
    assert warnings == []
    assert "0.600000" in csv_text


def test_tabulate_missing_cells():
    md, _, warnings = report.tabulate([], "ensemble_table")
    assert md.count(report.MISSING) == 6 and len(warnings) == 6
    md, _, warnings = report.tabulate([_rec("prol", 0.5)], "ensemble_table")
    assert any("ensemble_ms" in w for w in warnings)
    with pytest.raises(ConfigError):
        report.tabulate([], "bogus")


def test_svg_deterministic_and_padded():
    recs = [_rec("prol", 0.5, n=8), _rec("prol", 0.3, n=16), _rec("knn", 0.4, n=8)]
    a = report.plot(recs, "accuracy_vs_nclasses")
    assert a == report.plot(list(recs), "accuracy_vs_nclasses")
    assert a.count("<circle") == 3 and a.count("<polyline") == 1
    assert report.padded_range([30.0, 50.0]) == (29.0, 51.0)
    one = report.plot([_rec("prol", 0.5)], "accuracy_vs_nclasses")
    assert one.count("<circle") == 1 and "<polyline" not in one


def test_plot_errors():
    with pytest.raises(PlotError):
        report.plot([], "accuracy_vs_nclasses")
    with pytest.raises(PlotError):
        report.plot([LossCurve("prol", 4, 0, "train", [1.0, float("nan")])], "loss_curves")
    with pytest.raises(PlotError):
        report.plot([_rec("a", 0.1)], "histogram")


def test_curves_round_trip(tmp_path):
    curves = [LossCurve("prol", 32, 0, "train", [1.5, 0.25]), LossCurve("prol", 32, 0, "test", [2.0, 1.0])]
    (tmp_path / "c.csv").write_text(curves_csv(curves))
    back = read_curves(tmp_path / "c.csv")
    assert [(c.split, c.losses) for c in back] == [("train", [1.5, 0.25]), ("test", [2.0, 1.0])]


# ------------------------------------------------------------ command line

def test_cli_run_tabulate_plot(ckpt, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"methods": ["zero_shot", "knn"], "shifts": ["in_dist", "sketch"],
                               "n_test_per_class": 2}))
    out = tmp_path / "out"
    assert cli_main(["run", "--config", str(cfg), "--checkpoint", ckpt, "--out", str(out), "--seed", "3"]) == 0
    assert {"results.csv", "results.json", "accuracy_base.svg", "accuracy_novel.svg"} <= set(os.listdir(out))
    assert {r.seed for r in read_records(out / "results.csv")} == {3}
    assert cli_main(["tabulate", "--out", str(out), "--layout", "novel_table"]) == 0
    assert "zero_shot" in (out / "novel_table.md").read_text()
    assert cli_main(["plot", "--out", str(out), "--shift", "sketch"]) == 0
    assert (out / "accuracy_vs_nclasses_base_sketch.svg").exists()


def test_cli_reports_config_errors(ckpt, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"methods": ["nope"]}))
    assert cli_main(["run", "--config", str(cfg), "--checkpoint", ckpt]) == 2
    assert "nope" in capsys.readouterr().err


def test_cli_pretrain_tiny(tmp_path):
    cfg = tmp_path / "pre.json"
    cfg.write_text(json.dumps({"lm": {"d_model": 8, "n_layers": 1, "n_heads": 2, "max_seq_len": 64},
                               "ve": {"channels": [2, 3], "kernel": 3},
                               "corpus": {"n_per_class": 1, "pack_len": 48},
                               "opt": {"epochs": 1, "warmup_steps": 0}}))
    path = tmp_path / "m.vlmc"
    assert cli_main(["pretrain", "--config", str(cfg), "--checkpoint", str(path)]) == 0
    from vlprompt.vlm import load
    assert load(path).frozen


def test_cli_ablate(ckpt, tmp_path):
    cfg = tmp_path / "ab.json"
    cfg.write_text(json.dumps({"methods": ["prol"], "n_query": 2, "train": {"epochs": 2}}))
    assert cli_main(["ablate", "--config", str(cfg), "--checkpoint", ckpt, "--out", str(tmp_path),
                     "--counts", "2,4"]) == 0
    curves = read_curves(tmp_path / "curves.csv")
    assert sorted({c.n_context for c in curves}) == [2, 4]
    assert (tmp_path / "loss_curves.svg").exists()


def _trend_records(table):
    """``table[(method, shift, regime)] = accuracy`` as two-seed records averaging to that value."""
    out = []
    for (method, shift, regime), acc in table.items():
        for seed, delta in ((0, -0.01), (1, 0.01)):
            out.append(ResultRecord(method, shift, regime, 8, seed, acc + delta, 100))
    return out


TREND_SHIFTS = ("corruption:blur:5", "sketch", "rendition")


def _trend_table(base, novel):
    methods = ("prol", "robust_prol", "icl_rice", "icl_random")
    table = {}
    for s in TREND_SHIFTS:
        for m, b, n in zip(methods, base, novel):
            table[(m, s, "base")] = b
            table[(m, s, "novel")] = n
    return table


def test_trend_checks_all_hold():
    records = _trend_records(_trend_table(base=(0.8, 0.85, 0.6, 0.4), novel=(0.3, 0.4, 0.5, 0.2)))
    checks = report.trend_checks(records)
    assert [p for _, p, _ in checks] == [True] * 4
    text, ok = report.trend_report(records)
    assert ok and "flagged" not in text and "FAIL" not in text


def test_trend_checks_flag_failures():
    table = _trend_table(base=(0.8, 0.85, 0.6, 0.4), novel=(0.3, 0.4, 0.5, 0.2))
    table[("icl_rice", "sketch", "base")] = 0.9          # breaks the base chain on one shift only
    table[("robust_prol", "rendition", "novel")] = 0.33  # novel gap of 3 points
    records = _trend_records(table)
    assert [p for _, p, _ in report.trend_checks(records)] == [True, True, True, False]
    text, ok = report.trend_report(records)
    assert not ok
    assert text.count("**(flagged)**") == 2
    assert "+3.00 points" in text


def test_trend_checks_missing_method():
    table = {k: v for k, v in _trend_table((0.8, 0.85, 0.6, 0.4), (0.3, 0.4, 0.5, 0.2)).items()
             if k[0] != "icl_random"}
    checks = report.trend_checks(_trend_records(table))
    assert checks[0][1] is False
    assert all("n/a" in detail for _, _, detail in checks[0][2])


def test_cli_trend_layout(tmp_path, capsys):
    records = _trend_records(_trend_table((0.8, 0.85, 0.6, 0.4), (0.3, 0.4, 0.5, 0.2)))
    path = tmp_path / "results.csv"
    path.write_text(records_csv(records))
    assert cli_main(["tabulate", "--results", str(path), "--layout", "trend", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trend_report.md").read_text().startswith("# Trend report")
