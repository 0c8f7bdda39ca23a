import json
import math

import numpy as np
import pytest

from gelfand_lab.cli import build_parser, main, thread_budget
from gelfand_lab.fem import interpolant
from gelfand_lab.geometry import write_mesh
from gelfand_lab.scenarios import default_configs


def test_parser_shapes():
    args = build_parser().parse_args(["run", "--scenario", "thm-a", "--h", "0.05", "--lambda-ladder", "0.2,0.1",
                                      "--out", "x", "--mesh-dump"])
    assert args.h == 0.05 and args.lambda_ladder == "0.2,0.1" and args.mesh_dump


def test_thread_budget(monkeypatch):
    monkeypatch.setenv("GELFAND_THREADS", "3")
    assert thread_budget() == 3
    monkeypatch.setenv("GELFAND_THREADS", "zero")
    with pytest.raises(SystemExit):
        thread_budget()
    monkeypatch.setenv("GELFAND_THREADS", "0")
    with pytest.raises(SystemExit):
        thread_budget()


def test_greens_probe(capsys):
    code = main(["greens", "--domain", '{"kind": "disk", "params": {}, "h": 0.04}', "--probe", "0.3,0.1"])
    out = json.loads(capsys.readouterr().out)
    assert code == 0
    assert out["robin"] == pytest.approx(math.log(0.9) / (2 * math.pi), abs=1e-3)
    assert np.allclose(out["robin_gradient"], [-0.3 / (0.9 * math.pi), -0.1 / (0.9 * math.pi)], atol=5e-3)


def test_greens_outside(capsys):
    assert main(["greens", "--domain", '{"kind": "disk"}', "--probe", "2,0", "--h", "0.1"]) == 1


def test_greens_bad_domain():
    with pytest.raises(SystemExit):
        main(["greens", "--domain", '{"kind": "blob"}', "--probe", "0,0"])
    with pytest.raises(SystemExit):
        main(["greens", "--domain", "not json", "--probe", "0,0"])
    with pytest.raises(SystemExit):
        main(["greens", "--domain", '{"kind": "disk"}', "--probe", "0"])


def test_census_command(disk_mesh, tmp_path, capsys):
    mp, fp = tmp_path / "m.mesh", tmp_path / "f.field"
    write_mesh(disk_mesh, mp)
    fp.write_bytes(interpolant(disk_mesh, lambda x, y: (1 - x * x - y * y) * (1 + 0.2 * x)).to_bytes())
    code = main(["census", "--mesh", str(mp), "--field", str(fp)])
    rep = json.loads(capsys.readouterr().out)
    assert code == 0
    assert rep["index_sum"] == 1 and rep["counts"]["maxima"] == 1


def test_run_named_scenario(tmp_path, capsys):
    code = main(["run", "--scenario", "am-identity", "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"am-identity/N2", "am-identity/N3", "am-identity/N4"}
    assert all(v["passed"] for v in summary.values())
    assert "am-identity/N4: PASS" in capsys.readouterr().out


def test_run_config_file_failing_verdict(tmp_path):
    cfg = default_configs("am-identity")[1]
    d = cfg.to_dict()
    d["expected"]["k"] = 1
    d["expected"]["index_sum"] = 0
    p = tmp_path / "wrong.json"
    p.write_text(json.dumps(d))
    assert main(["run", "--scenario", str(p)]) == 1


def test_run_rejects_bad_arguments():
    with pytest.raises(SystemExit):
        main(["run", "--scenario", "nope"])
    with pytest.raises(SystemExit):
        main(["run", "--scenario", "thm-a", "--lambda-ladder", "0.1,-2"])
    with pytest.raises(SystemExit):
        main(["run", "--scenario", "thm-a", "--h", "-1"])


def test_parallel_run_matches_serial(tmp_path):
    import os
    import subprocess
    import sys
    outs = {}
    for threads in ("1", "3"):
        env = dict(os.environ, GELFAND_THREADS=threads)
        out = tmp_path / f"t{threads}"
        proc = subprocess.run([sys.executable, "-m", "gelfand_lab.cli", "run", "--scenario", "am-identity",
                               "--out", str(out)], env=env, capture_output=True, text=True, timeout=300)
        assert proc.returncode == 0, proc.stderr
        outs[threads] = out
    for label in ("am-identity_N2", "am-identity_N3", "am-identity_N4"):
        assert (outs["1"] / label / "result.json").read_bytes() == (outs["3"] / label / "result.json").read_bytes()
    assert (outs["1"] / "summary.json").read_bytes() == (outs["3"] / "summary.json").read_bytes()
