import json

import numpy as np
import pytest

from paic import formats
from paic.inference import BootstrapPlan, summarize_trial
from paic.model import EstimateRecord, EstimatorSpec, ValidationError

from conftest import make_trial


class TestIpdCsv:
    def test_round_trip_exact(self, tmp_path, null_trials):
        a, _ = null_trials
        formats.write_ipd_csv(tmp_path / "a.csv", a)
        back = formats.read_ipd_csv(tmp_path / "a.csv")
        assert back.covariates.values.tobytes() == a.covariates.values.tobytes()
        assert back.outcome.tobytes() == a.outcome.tobytes()
        assert back.arm.tolist() == a.arm.tolist() and back.trial_id == "a"

    def test_arm_map(self, tmp_path):
        (tmp_path / "d.csv").write_text("id,trial,arm,x1,y\n1,s,drug,0.5,1\n2,s,placebo,0.1,2\n")
        with pytest.raises(ValidationError, match="--arm-map"):
            formats.read_ipd_csv(tmp_path / "d.csv")
        t = formats.read_ipd_csv(tmp_path / "d.csv", {"drug": "A", "placebo": "C"})
        assert t.arms == ("A", "C")

    @pytest.mark.parametrize("text,msg", [
        ("", "empty"), ("id,arm,x1,y\n", "header"),
        ("id,trial,arm,x1,y\n1,a,A,0.5\n", "line 2"),
        ("id,trial,arm,x1,y\n1,a,A,zz,1\n", "line 2"),
        ("id,trial,arm,x1,y\n1,a,A,0.5,nan\n", "non-finite outcome")])
    def test_malformed(self, tmp_path, text, msg):
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(ValidationError, match=msg):
            formats.read_ipd_csv(tmp_path / "bad.csv")


class TestAgdJson:
    def test_round_trip(self, null_trials):
        _, b = null_trials
        agd = summarize_trial(b, BootstrapPlan(20, 0))
        back = formats.agd_from_json(json.loads(json.dumps(formats.agd_to_json(agd))))
        assert back.moments.means.tobytes() == agd.moments.means.tobytes()
        assert back.moments.variances.tobytes() == agd.moments.variances.tobytes()
        assert back.arm_summaries == agd.arm_summaries

    def test_means_only_is_first_order(self):
        obj = {"trial_id": "b", "n": 10, "moments": {"x1": {"mean": 0.2}},
               "arms": {"B": {"mean": 1.0, "n": 10}}}
        assert formats.agd_from_json(obj).moments.order == 1

    def test_malformed(self):
        with pytest.raises(ValidationError, match="malformed"):
            formats.agd_from_json({"moments": {}})


class TestResults:
    def test_record_round_trip(self, tmp_path):
        rec = EstimateRecord(EstimatorSpec("maic2", "anchored", ("x1", "x2")), 0.1 + 0.2,
                             1 / 3, 123.456, True, iteration=4, seed=2**63 + 5, dgm=3)
        with formats.ResultsWriter(tmp_path / "r.csv") as w:
            w.write([rec])
        back = formats.read_results(tmp_path / "r.csv")[0]
        assert formats.record_row(back) == formats.record_row(rec)
        assert back.delta_hat == rec.delta_hat and back.seed == rec.seed

    def test_columns(self, tmp_path):
        (tmp_path / "r.csv").write_text("dgm,iteration\n")
        with pytest.raises(ValidationError, match="missing result columns"):
            formats.read_results(tmp_path / "r.csv")

    def test_nan_serialized_as_null(self):
        rec = EstimateRecord(EstimatorSpec("maic1", "anchored", ("x1",)), float("nan"),
                             float("nan"), float("nan"), False, diagnostic="moment target unattainable")
        obj = json.loads(json.dumps(formats.record_json(rec)))
        assert obj["estimate"] is None and obj["converged"] is False

    @pytest.mark.parametrize("label,expected", [("none", ()), ("", ()), ("x1", ("x1",)),
                                                ("x1+x2", ("x1", "x2")), ("x1,x2", ("x1", "x2"))])
    def test_parse_adjustment(self, label, expected):
        assert formats.parse_adjustment(label) == expected
