import json
from pathlib import Path

import numpy as np
import pytest

from basisrisk.config import ConfigError, load_config, parse_config

INLINE = {
    "market": {
        "index": {"kind": "geometric", "drift": [0.02], "vol": [[0.25, 0.0]]},
        "assets": {"alpha": [0.03], "beta": [[0.12, 0.16]]},
        "eta": 0.1, "T": 1.0, "r0": [100.0],
    },
    "payoff": {"type": "put", "strike": 90.0},
}


def test_builtin_weather_market():
    spec, r0, notes = parse_config('{"scenario": "weather-chdd", "params": {"a1": 0.01}}').build()
    x = np.array([[80.0], [120.0]])
    np.testing.assert_allclose(spec.b(0.0, x)[:, 0], 0.01 * x[:, 0])
    np.testing.assert_allclose(spec.rho(0.0, x)[:, 0, 0], 0.25 * x[:, 0])
    assert (spec.m, spec.k, spec.d) == (1, 1, 2)
    assert r0.tolist() == [100.0]
    assert any("not calibrated" in n for n in notes)


def test_builtin_crack_spread_matrices():
    spec, r0, _ = parse_config('{"scenario": "crack-spread", "payoff": {"type": "spread-call", "strike": 10, '
                               '"cap": 200, "log_prices": true}}').build()
    x = r0[None]
    np.testing.assert_array_equal(spec.rho(0.0, x)[0], [[0.3, 0.0, 0.0], [0.25, 0.15, 0.1]])
    np.testing.assert_array_equal(spec.beta(0.0, x)[0], [[0.3, 0.0, 0.0], [0.28, 0.12, 0.0]])
    assert spec.F.cap == 200


def test_uncapped_call_is_capped_and_recorded():
    spec, _, notes = parse_config('{"scenario": "complete-market-bs"}').build()
    assert np.isfinite(spec.F.bound)
    assert any("capped at" in n for n in notes)


def test_inline_market():
    spec, r0, notes = parse_config(json.dumps(INLINE)).build()
    assert spec.F.name.startswith("put") and r0.tolist() == [100.0] and notes == []


def test_malformed_json_reports_position():
    with pytest.raises(ConfigError, match="line 2, column"):
        parse_config('{"scenario": "weather-chdd",\n "oops"}')


def test_every_violation_is_listed():
    bad = {"scenario": "weather-chdd", "colour": "red", "solver": {"n_paths": 0, "seed": -1}}
    with pytest.raises(ConfigError) as err:
        parse_config(json.dumps(bad))
    text = "\n".join(err.value.problems)
    assert len(err.value.problems) == 3
    for key in ("colour", "solver.n_paths", "solver.seed"):
        assert key in text


@pytest.mark.parametrize("doc, needle", [
    ({}, "exactly one"),
    ({"scenario": "weather-chdd", **INLINE}, "exactly one"),
    ({"scenario": "nowhere"}, "unknown scenario"),
    ({"scenario": "weather-chdd", "params": {"zeta": 1}}, "unknown parameters"),
    ({"scenario": "weather-chdd", "payoff": {"type": "call-spread", "low": 5, "high": 1}}, "low < high"),
    ({"scenario": "weather-chdd", "payoff": {"type": "exotic"}}, "type"),
    ({"market": INLINE["market"]}, "needs a payoff"),
])
def test_invalid_configs(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(json.dumps(doc))


def test_dimension_mismatch_in_inline_market():
    doc = json.loads(json.dumps(INLINE))
    doc["market"]["assets"]["beta"] = [[0.12, 0.16, 0.1]]
    with pytest.raises(ConfigError, match="columns"):
        parse_config(json.dumps(doc))


def test_payoff_component_out_of_range():
    cfg = parse_config('{"scenario": "weather-chdd", "payoff": {"type": "put", "strike": 90, "component": 1}}')
    with pytest.raises(ConfigError, match="out of range"):
        cfg.build()


def test_digest_tracks_content():
    a = parse_config('{"scenario": "weather-chdd"}')
    b = parse_config('{"scenario": "weather-chdd", "solver": {"seed": 1}}')
    c = parse_config('{"scenario": "weather-chdd", "solver": {"seed": 2}}')
    assert a.digest() == b.digest() != c.digest()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    path = tmp_path / "ok.json"
    path.write_text('{"scenario": "crack-spread"}')
    assert load_config(path).scenario == "crack-spread"


@pytest.mark.parametrize("path", sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json")),
                         ids=lambda p: p.name)
def test_shipped_configs_build(path):
    spec, r0, _ = load_config(path).build()
    assert len(r0) == spec.m
