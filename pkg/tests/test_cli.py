import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from basisrisk import runner
from basisrisk.cli import main
from basisrisk.config import parse_config

SMALL = ["--paths", "3000", "--steps", "10"]
CSV_FILES = ("hedge_report.csv", "price_field.csv", "plot_data.csv", "solution_with_claim.csv",
             "solution_zero_claim.csv")


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if isinstance(doc, dict) else doc)
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_zero_claim_weather_run(tmp_path, capsys):
    cfg = write(tmp_path, {"scenario": "weather-chdd", "payoff": {"type": "constant", "value": 0.0}})
    out = tmp_path / "out"
    assert main(["hedge", cfg, *SMALL, "--out-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "result: all checks passed" in text
    hr = rows(out / "hedge_report.csv")
    assert hr[0] == ["t", "r_1", "p", "grad_p_1", "pi_1", "pihat_1", "delta_1", "mup"]
    vals = np.array(hr[1:], dtype=float)
    assert np.abs(vals[:, 2]).max() <= 1e-9
    assert np.abs(vals[:, 6]).max() <= 1e-9
    assert rows(out / "price_field.csv")[0] == ["t", "r_1", "p", "buyer_price", "grad_p_1"]
    assert rows(out / "plot_data.csv")[0] == ["t", "r_1", "p"]
    assert rows(out / "solution_with_claim.csv")[0] == ["step", "time", "path", "Y", "Z_1", "Z_2"]
    report = (out / "report.txt").read_text(encoding="utf-8")
    assert "config_hash" in report and "seed: 1" in report


def test_flags_override_config(tmp_path):
    cfg = parse_config('{"scenario": "weather-chdd"}')
    rep = runner.run(cfg.model_copy(update={"solver": cfg.solver.model_copy(update={"n_paths": 3000, "n_steps": 10,
                                                                                     "seed": 9})}),
                     "price", write=False)
    assert rep.provenance["seed"] == 9 and rep.provenance["n_paths"] == 3000
    assert rep.files == []


def test_malformed_json_exits_1(tmp_path, capsys):
    assert main(["price", write(tmp_path, '{"scenario": ')]) == 1
    assert "line 1" in capsys.readouterr().err


def test_unknown_key_exits_1(tmp_path, capsys):
    assert main(["price", write(tmp_path, {"scenario": "weather-chdd", "speed": 3})]) == 1
    assert "speed" in capsys.readouterr().err


def test_bad_override_exits_1(tmp_path):
    assert main(["price", write(tmp_path, {"scenario": "weather-chdd"}), "--paths", "0"]) == 1


def test_runtime_error_names_module(tmp_path, capsys):
    # too few paths for the basis is a solver error
    assert main(["price", write(tmp_path, {"scenario": "weather-chdd"}), "--paths", "50", "--steps", "4",
                 "--out-dir", str(tmp_path / "o")]) == 1
    assert "basisrisk.bsde" in capsys.readouterr().err


def test_compare_rejects_three_factor_markets(tmp_path, capsys):
    doc = {"market": {"index": {"kind": "constant", "drift": [0, 0, 0], "vol": [[0.1, 0, 0], [0, 0.1, 0],
                                                                                  [0, 0, 0.1]]},
                      "assets": {"alpha": [0.01], "beta": [[0.2, 0.1, 0.0]]}, "eta": 0.5, "T": 1.0,
                      "r0": [0, 0, 0]},
           "payoff": {"type": "smooth-step", "center": 0.0, "width": 0.2}}
    assert main(["compare", write(tmp_path, doc), *SMALL, "--out-dir", str(tmp_path / "o")]) == 1
    assert "m <= 2" in capsys.readouterr().err


def test_invariant_failure_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(runner, "HEDGE_EQUIVALENCE_TOL", -1.0)
    cfg = write(tmp_path, {"scenario": "weather-chdd"})
    assert main(["price", cfg, *SMALL, "--out-dir", str(tmp_path / "o")]) == 2
    assert "[FAIL] hedge formula equivalence" in capsys.readouterr().out


def test_compare_with_pde_oracle(tmp_path, capsys):
    cfg = write(tmp_path, {"scenario": "weather-chdd", "oracles": {"pde_nodes": 81}})
    main(["compare", cfg, "--paths", "8000", "--steps", "10", "--out-dir", str(tmp_path / "o")])
    text = capsys.readouterr().out
    assert "regression vs PDE price" in text and "oracle_p_pde" in text


def test_zero_claim_oracles_agree():
    cfg = parse_config('{"scenario": "weather-chdd", "payoff": {"type": "constant", "value": 0},'
                       '"solver": {"n_paths": 3000, "n_steps": 10}}')
    cmp = runner.compare_oracles(cfg, n_nodes=41)
    assert cmp["p_regression"] == 0.0 and abs(cmp["p_pde"]) <= 1e-12


@pytest.mark.slow
def test_compare_refinement_in_paths():
    cfg = parse_config('{"scenario": "weather-chdd", "solver": {"n_steps": 20}}')
    gaps = []
    for n in (10000, 20000):
        c = cfg.model_copy(update={"solver": cfg.solver.model_copy(update={"n_paths": n})})
        out = runner.compare_oracles(c, n_nodes=161)
        gaps.append(abs(out["p_regression"] - out["p_pde"]))
        refinement = out["pde_refinement"]
    assert gaps[1] <= gaps[0] or gaps[1] <= refinement


@pytest.mark.parametrize("scenario", ["weather-chdd", "complete-market-bs", "crack-spread"])
def test_outputs_do_not_depend_on_thread_cap(tmp_path, scenario):
    cfg = write(tmp_path, {"scenario": scenario})
    digests = []
    for threads in ("1", "3"):
        out = tmp_path / f"t{threads}"
        env = dict(os.environ, BASISRISK_THREADS=threads)
        proc = subprocess.run([sys.executable, "-m", "basisrisk.cli", "hedge", cfg, "--paths", "4000", "--steps", "8",
                               "--out-dir", str(out)], env=env, capture_output=True, text=True)
        assert proc.returncode in (0, 2), proc.stderr
        digests.append({f: (out / f).read_bytes() for f in CSV_FILES})
    assert digests[0] == digests[1]
