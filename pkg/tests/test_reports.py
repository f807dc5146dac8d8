import xml.etree.ElementTree as ET

import numpy as np

from dasattr import reports
from dasattr.attribution import AttributionResult
from dasattr.evaluation import CounterfactualReport, LdsReport


def test_scores_csv_layout():
    res = AttributionResult("das", np.array([7]), np.array([0, 1, 2]), np.array([[0.1, 0.5, 0.2]]), lam=0.01)
    lines = reports.scores_csv([res]).splitlines()
    assert lines[0] == "target_id,train_id,method,lambda,score,rank"
    assert lines[2] == "7,1,das,0.01,0.5,1"


def test_lds_csv_groups():
    rep = LdsReport("das", ["val-0", "gen-0"], np.array([0.2, 0.4]), np.array([False, True]), 1.0)
    rows = reports.lds_csv({"das": rep}).splitlines()
    assert rows[1].split(",")[:3] == ["das", "1.0", repr(0.30000000000000004)]
    assert rows[1].endswith(",2,1")


def test_charts_are_valid_svg():
    reps = {"das": CounterfactualReport("das", 3, np.array([1.0, 2.0]), np.array([0.9, 0.8])),
            "random": CounterfactualReport("random", 3, np.array([0.1, 0.3]), np.array([1.0, 1.0]))}
    ET.fromstring(reports.counterfactual_chart(reps))
    ET.fromstring(reports.bar_chart(["a<b", "c"], [-0.2, float("nan")], title="t & u"))
