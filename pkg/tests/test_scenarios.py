import csv
import io
import json
import math
import re

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gelfand_lab.asymptotics import AsymptoticsReport, PeakData, PeakReport
from gelfand_lab.scenarios import (SCENARIOS, Expected, ScenarioConfig, ScenarioError, default_configs, load_config,
                                   radial_family, render_report, run_scenario, trend_checks)
import oracles


def _glyphs(svg_text):
    return re.findall(r'id="glyph-([a-z]+)-\d+"', svg_text)


class TestConfig:
    @pytest.mark.parametrize("name", SCENARIOS)
    def test_defaults_roundtrip(self, name, tmp_path):
        for cfg in default_configs(name):
            p = tmp_path / "cfg.json"
            p.write_text(cfg.to_json())
            back = load_config(p)
            assert back.to_json() == cfg.to_json()
            assert cfg.expected.index_sum == 1 - cfg.expected.k

    def test_unknown_scenario(self):
        with pytest.raises(ScenarioError):
            default_configs("thm-z")
        with pytest.raises(ScenarioError):
            ScenarioConfig("thm-z", "disk", {}, None, [0.1], None, Expected(m=1, k=0))

    @pytest.mark.parametrize("bad", [dict(count=3, lower_bound=2), dict(index_sum=1, k=1),
                                     dict(count=3, maxima=1, saddles=1)])
    def test_expected_validation(self, bad):
        kw = dict(m=1, k=0)
        kw.update(bad)
        with pytest.raises(ScenarioError):
            Expected(**kw)

    def test_ladder_and_mode_validation(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig("thm-a", "disk", {}, None, [0.1, -0.1], None, Expected(m=1, k=0))
        with pytest.raises(ScenarioError):
            ScenarioConfig("thm-a", "disk", {}, None, [0.1], None, Expected(m=1, k=0), verdict_rung="largest")

    def test_ladders_are_geometric(self):
        for name in ("thm-a", "thm-b", "thm-c", "hub"):
            lad = default_configs(name)[0].ladder
            assert len(lad) == 3 and lad[0] / lad[1] == pytest.approx(2) and lad[1] / lad[2] == pytest.approx(2)


class TestRadialFamily:
    @pytest.mark.parametrize("lam", [0.2, 0.1, 0.05])
    def test_matches_oracle(self, lam):
        t, sup, mass = radial_family(lam)
        assert t == pytest.approx(oracles.RADIAL_SMALL_ROOT[lam], rel=1e-10)
        assert mass == pytest.approx(oracles.RADIAL_MASS[lam], rel=1e-10)
        if lam == 0.2:
            assert sup == pytest.approx(oracles.RADIAL_SUP_02, rel=1e-10)

    @given(st.floats(1e-4, 1.99))
    def test_root_relation(self, lam):
        t, sup, mass = radial_family(lam)
        assert 8 * t == pytest.approx(lam * (1 + t) ** 2, rel=1e-9)
        assert 0 < t < 1 and mass < oracles.EIGHT_PI


def _report(lam, mass, err, kr):
    pk = PeakReport(PeakData.from_height((0, 0), 5.0, lam), mass, err, err, err, True, True)
    return AsymptoticsReport(lam, mass, [pk], err, err, kr, 0.5)


class TestTrends:
    @given(st.lists(st.floats(1e-4, 1.0), min_size=3, max_size=3, unique=True))
    def test_monotone_ladder_passes(self, errs):
        errs = sorted(errs, reverse=True)
        masses = [oracles.EIGHT_PI - 0.5 - i * 0.1 for i in range(3)][::-1]
        reps = [_report(lam, m, e, e) for lam, m, e in zip((0.2, 0.1, 0.05), masses, errs)]
        out = trend_checks(reps[::-1], m=1)
        assert all(v["pass"] for v in out.values())

    def test_rising_error_fails(self):
        reps = [_report(0.2, 24.0, 0.1, 0.01), _report(0.1, 24.5, 0.2, 0.01), _report(0.05, 25.0, 0.05, 0.01)]
        out = trend_checks(reps, m=1)
        assert not out["profile_sup_error"]["pass"]
        assert out["total_mass"]["pass"]

    def test_mass_far_from_target_fails(self):
        reps = [_report(0.2, 20.0, 0.1, 0.01), _report(0.1, 21.0, 0.05, 0.01), _report(0.05, 22.0, 0.01, 0.01)]
        assert not trend_checks(reps, m=1)["total_mass"]["pass"]

    def test_needs_three_rungs(self):
        out = trend_checks([_report(0.2, 24.0, 0.1, 0.01)], m=1)
        assert list(out) == ["trend_rungs"] and not out["trend_rungs"]["pass"]


class TestHarmonicScenario:
    def test_am_n2_report_has_no_glyphs(self, tmp_path):
        cfg = default_configs("am-identity")[0]
        res = run_scenario(cfg)
        assert res.passed
        files = render_report(res, tmp_path)
        svg = [f for f in files if f.endswith(".svg")]
        assert len(svg) == 1
        assert _glyphs(open(svg[0]).read()) == []

    def test_am_n3_deterministic_json(self, tmp_path):
        cfg = default_configs("am-identity")[1]
        render_report(run_scenario(cfg), tmp_path / "a")
        render_report(run_scenario(cfg), tmp_path / "b")
        for name in ("result.json", "rung0.svg"):
            a = (tmp_path / "a" / "am-identity_N3" / name).read_bytes()
            b = (tmp_path / "b" / "am-identity_N3" / name).read_bytes()
            assert a == b
        d = json.loads((tmp_path / "a" / "am-identity_N3" / "result.json").read_text())
        assert d["verdicts"]["multiplicity_sum"]["value"] == 1

    def test_unwritable_output(self, tmp_path):
        res = run_scenario(default_configs("am-identity")[0])
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ScenarioError):
            render_report(res, blocker)


@pytest.mark.slow
class TestScenarioReports:
    def test_thm_b_svg_glyphs(self, scenario_runs, tmp_path):
        (res,) = scenario_runs("thm-b")
        render_report(res, tmp_path)
        smallest = min((r for r in res.rungs if r.resolved), key=lambda r: r.lam)
        svg = (tmp_path / "thm-b" / f"rung{res.rungs.index(smallest)}_lambda{smallest.lam:g}.svg").read_text()
        kinds = _glyphs(svg)
        assert sorted(kinds) == ["max", "max", "saddle"]
        assert "−1" in svg or "-1" in svg

    def test_thm_a_csv_rows(self, scenario_runs, tmp_path):
        (res,) = scenario_runs("thm-a")
        render_report(res, tmp_path)
        rows = list(csv.DictReader(io.StringIO((tmp_path / "thm-a" / "ladder.csv").read_text())))
        assert [float(r["lambda"]) for r in rows] == [0.2, 0.1, 0.05]
        assert all(r["total_mass"] and r["profile_sup_error"] for r in rows)

    def test_disk_oracle_branch_jsonl(self, scenario_runs, tmp_path):
        (res,) = scenario_runs("disk-oracle")
        render_report(res, tmp_path)
        lines = (tmp_path / "disk-oracle" / "branch.jsonl").read_text().splitlines()
        recs = [json.loads(x) for x in lines]
        assert set(recs[0]) == {"lambda", "arclength", "sup_norm", "mass", "residual_norm", "field_ref"}
        assert max(r["lambda"] for r in recs) == pytest.approx(2.0, abs=0.04)

    def test_rerun_is_byte_identical(self, scenario_runs, tmp_path):
        (res,) = scenario_runs("thm-a")
        again = run_scenario(res.config)
        again.artifacts = list(res.artifacts)  # the cached result may already have been rendered
        assert again.to_json() == res.to_json()
