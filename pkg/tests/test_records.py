import json

import numpy as np
import pytest

from knaskit.archspace import decode
from knaskit.gramkernel import MgmScore
from knaskit.records import (
    RunReport,
    TrialRecord,
    dumps,
    read_report,
    read_trials_csv,
    report_from_dict,
    report_to_dict,
    trial_from_dict,
    trial_to_dict,
    trials_csv,
    write_report,
)
from knaskit.stats import spearman
from knaskit.trainer import EvalCurve


def _trial(i, value=1.5, acc=0.5, ok=True):
    g = decode(i)
    curve = EvalCurve([1.0, 0.5], [0.25, acc], [1.2, 1.1], wall_time=2.5)
    return dict(genotype=str(g), genotype_id=g.index, seed=3, mgm=MgmScore(value, "split_halves", 0.1, ok), mgm_rank=1, curve=curve)


def _report():
    trials = [TrialRecord(**_trial(i, value=float(i), acc=i / 10)) for i in (5, 77, 912)]
    trials.append(TrialRecord(**_trial(13, ok=False)))
    corr = spearman([1, 2, 3, 4.5], [0.1, 0.4, 0.3, 0.9])
    return RunReport({"seed": 1, "m": 50}, trials, corr, {"total": 3.2}, {"note": "x"})


def test_trial_round_trip():
    t = TrialRecord(**_trial(42))
    assert trial_from_dict(json.loads(json.dumps(trial_to_dict(t)))) == t


def test_genotype_id_checked():
    with pytest.raises(ValueError):
        TrialRecord(genotype=str(decode(4)), genotype_id=5, seed=0)


def test_report_round_trip():
    r = _report()
    d = report_to_dict(r)
    assert report_from_dict(json.loads(dumps(d))) == r
    assert dumps(report_to_dict(report_from_dict(json.loads(dumps(d))))) == dumps(d)


def test_failed_score_serializes_as_null():
    r = _report()
    d = json.loads(dumps(report_to_dict(r)))
    assert d["trials"][-1]["mgm"]["value"] is None and d["trials"][-1]["mgm"]["numeric_ok"] is False


def test_report_files_split_timings(tmp_path):
    r = _report()
    rp, tp = write_report(r, tmp_path)
    text = rp.read_text()
    assert "wall_time" not in text.replace('"wall_time": null', "")
    assert json.loads(text)["timings"] == "timing.json"
    assert read_report(tmp_path) == r
    # writing again without change is byte-identical
    first = rp.read_bytes()
    write_report(read_report(tmp_path), tmp_path)
    assert rp.read_bytes() == first


def test_trials_csv_round_trip(tmp_path):
    r = _report()
    p = tmp_path / "trials.csv"
    p.write_text(trials_csv(r.trials))
    rows = read_trials_csv(p)
    assert [row["genotype"] for row in rows] == [t.genotype for t in r.trials]
    assert float(rows[1]["mgm"]) == r.trials[1].mgm.value
    assert rows[-1]["mgm"] == ""
    assert np.isclose(float(rows[0]["val_acc"]), 0.5)
