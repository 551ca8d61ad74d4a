import json

import numpy as np
import pytest

from polycast.config import load_config
from polycast.core import FrameError
from polycast.correlate import pearson
from polycast.ensemble import TreeParams, fit_cart, predict
from polycast.evaluate import rmse
from polycast.synthworld import (
    DEFAULT_RESPONSES,
    StepResponse,
    WorldParams,
    generate_polytunnel,
    generate_weather,
    noise_preset,
    params_from_dict,
    season_start,
    sensor_truth,
)
from polycast.windowing import build_backcast_windows, split_ratio

from conftest import small_world_params


def test_season_start_is_monday():
    for year in range(2019, 2027):
        t = season_start(year)
        assert (int(t.astype("datetime64[D]").astype(np.int64)) + 3) % 7 == 0
        assert str(t)[5:7] == "05"


def test_weather_deterministic_and_prefix_stable():
    p = small_world_params()
    a, b = generate_weather(p, 2023), generate_weather(p, 2023)
    assert a == b
    assert len(a) == 28 * 24 and a.site == "MO"
    short = generate_weather(p, 2023, 100)
    np.testing.assert_array_equal(short.values, a.values[:100])
    assert generate_weather(WorldParams(seed=1, season_days=28, wu_outage=None), 2023) != a


def test_weather_construction_rules():
    w = generate_weather(small_world_params(mode="smooth"), 2022)
    hours = (w.timestamps.astype(np.int64) // 3600) % 24
    assert (w.column("Rad")[hours == 0] == 0).all()
    assert (w.column("Rad") >= 0).all()
    assert pearson(w.column("MET"), w.column("MEH")) < 0
    for ch in ("WS", "WG", "RFA", "Vis"):
        assert (w.column(ch) >= 0).all()
    assert ((w.column("WD") >= 0) & (w.column("WD") <= 360)).all()


def test_tree_mode_quantizes_drivers():
    w = generate_weather(small_world_params(), 2023)
    assert (w.column("MET") == np.round(w.column("MET"))).all()
    assert (w.column("Rad") % 100 == 0).all()


def test_step_response():
    r = StepResponse("X", "MET", 0, (5.5, 10.5), (1.0, 2.0, 3.0))
    np.testing.assert_array_equal(r.step(np.array([0.0, 5.5, 6.0, 11.0])), [1, 2, 2, 3])
    np.testing.assert_array_equal(r.step(np.array([4.0]), shift=2.0), [3.0])
    with pytest.raises(FrameError):
        StepResponse("X", "MET", 0, (5.0, 1.0), (1.0, 2.0, 3.0))
    with pytest.raises(FrameError):
        StepResponse("X", "MET", 0, (5.0,), (1.0,))


def test_params_validation_and_round_trip():
    with pytest.raises(FrameError):
        WorldParams(season_days=30)
    with pytest.raises(FrameError):
        WorldParams(noise={"IT": -1})
    with pytest.raises(FrameError):
        WorldParams(season_days=7)  # default outage lies outside
    p = small_world_params(noise=noise_preset(0.5))
    assert params_from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_noiseless_sensor_is_tree_representable():
    p = small_world_params()
    w = generate_weather(p, 2023)
    tunnel = generate_polytunnel(w, p, "Multispan")
    frame = tunnel.sensors.drop(["WU"]).add_channels(w.channels, w.values)
    ds = build_backcast_windows(frame, ["MET"], ["IT"], 1)["IT"]
    tr, te = split_ratio(ds, 0.85, seed=0)
    m = fit_cart(tr.X, tr.y, TreeParams(max_depth=3, min_samples_leaf=1))
    assert rmse(predict(m, te.X), te.y) < 1e-6


def test_noise_floor():
    sigma = 0.4
    p = small_world_params(noise={"IT": sigma}, season_days=70, wu_outage=None)
    w = generate_weather(p, 2023)
    tunnel = generate_polytunnel(w, p, "Multispan")
    resid = tunnel.sensors.column("IT") - tunnel.truth.column("IT")
    assert 0.9 * sigma < np.std(resid) < 1.1 * sigma


def test_truth_lookahead_and_shift():
    p = small_world_params()
    w = generate_weather(p, 2023)
    truth_m = generate_polytunnel(w, p, "Multispan").truth
    truth_s = generate_polytunnel(w, p, "Seaton").truth
    assert not np.isnan(truth_m.values).any()
    sm = next(r for r in DEFAULT_RESPONSES if r.channel == "SM")
    ext = generate_weather(p, 2023, len(w) + sm.offset)
    np.testing.assert_array_equal(truth_m.column("SM"), sm.step(ext.column("Pre")[sm.offset:]))
    assert (truth_s.column("IT") >= truth_m.column("IT")).all()
    cut = sensor_truth(w, p, "Multispan")
    assert np.isnan(cut.column("SM")[-sm.offset:]).all()


def test_yield_bounds_and_weekly_sums():
    p = small_world_params(yield_noise=0.05)
    for season in (2021, 2023):
        w = generate_weather(p, season)
        t = generate_polytunnel(w, p, "Seaton")
        wk = t.weekly_yield.column("Yield")
        assert ((wk >= 0) & (wk <= 1.2)).all()
        daily = t.daily_yield.column("Yield")
        assert len(daily) == 28 and len(wk) == 4
        np.testing.assert_allclose(wk, daily.reshape(4, 7).sum(axis=1), rtol=1e-15)


def test_wu_outage_applied():
    p = small_world_params()
    w = generate_weather(p, 2024)
    wu = generate_polytunnel(w, p, "Multispan").sensors.column("WU")
    assert np.isnan(wu[12 * 24 : 14 * 24]).all()
    assert not np.isnan(wu[: 12 * 24]).any()
    other = generate_polytunnel(w, p, "Seaton").sensors.column("WU")
    assert not np.isnan(other).any()


def test_written_world_layout(small_world):
    truth = json.loads((small_world / "truth.json").read_text())
    assert truth["noise_std"]["IT"] == 0.0
    assert {r["channel"] for r in truth["responses"]} >= {"WU", "IT", "IH", "SM", "ST", "PAR"}
    for rel in ("weather/MO_2021.csv", "sensors/Seaton_2024.csv", "yield/Multispan_2022.csv",
                "truth/Multispan_2021.csv", "config.json"):
        assert (small_world / rel).is_file()
    assert not (small_world / "sensors" / "Multispan_2021.csv").exists()
    cfg = load_config(small_world / "config.json")
    assert cfg.real_groups == [("Multispan", 2023), ("Multispan", 2024), ("Seaton", 2023), ("Seaton", 2024)]
    assert cfg.historical_groups == [("Multispan", 2021), ("Multispan", 2022), ("Seaton", 2022)]
