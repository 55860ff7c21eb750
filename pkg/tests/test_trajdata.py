import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polytraj.noisemodel import rotation
from polytraj.synth import SynthConfig, generate
from polytraj.trajdata import (
    CATEGORIES,
    CSV_COLUMNS,
    IngestError,
    SmootherConfig,
    TrackedTrajectory,
    classify_outliers,
    export,
    headings,
    ingest,
    outlier_flags,
    path_extent,
    prepare_for_fit,
    rts_smooth,
    to_local_frame,
    window,
)


def make_traj(t, xy, object_class="agent", heading=None, horizon=None, object_id="a1", scenario="s1"):
    t = np.asarray(t, dtype=float)
    xy = np.asarray(xy, dtype=float)
    m = t.size
    heading = np.full(m, np.nan) if heading is None else np.broadcast_to(heading, (m,))
    return TrackedTrajectory(scenario, object_id, object_class, t, xy, np.zeros((m, 2)), np.zeros(m),
                             heading, horizon=horizon)


def straight(speed=10.0, duration=5.0, m=50, angle=0.0, start=(10.0, 5.0), **kw):
    t = np.linspace(0.0, duration, m)
    direction = np.array([np.cos(angle), np.sin(angle)])
    return make_traj(t, np.asarray(start) + np.outer(speed * t, direction), **kw)


def write_rows(path, rows):
    lines = [",".join(CSV_COLUMNS)] + [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")


# I/O

def test_ingest_two_rows(tmp_path):
    path = tmp_path / "c.csv"
    write_rows(path, [("s", "o", "agent", 0.0, 1, 2, 0, 0, 0, ""), ("s", "o", "agent", 0.1, 1.5, 2, 0, 0, 0, "")])
    (traj,) = ingest(path)
    assert traj.m == 2
    assert np.isnan(traj.heading).all()


def test_ingest_groups_by_scenario(tmp_path):
    path = tmp_path / "c.csv"
    write_rows(path, [("s1", "o", "agent", 0.0, 1, 2, 0, 0, 0, 0), ("s2", "o", "agent", 0.0, 1, 2, 0, 0, 0, 0)])
    assert sorted(t.scenario_id for t in ingest(path)) == ["s1", "s2"]


def test_ingest_reports_line(tmp_path):
    path = tmp_path / "c.csv"
    write_rows(path, [("s", "o", "agent", 0.0, 1, 2, 0, 0, 0, 0), ("s", "o", "agent", "oops", 1, 2, 0, 0, 0, 0)])
    with pytest.raises(IngestError, match="line 3"):
        ingest(path)


def test_ingest_rejects_bad_header(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("a,b,c\n")
    with pytest.raises(IngestError, match="line 1"):
        ingest(path)


def test_unsorted_times_flagged(tmp_path):
    path = tmp_path / "c.csv"
    write_rows(path, [("s", "o", "agent", 0.2, 1, 2, 0, 0, 0, 0), ("s", "o", "agent", 0.1, 1, 2, 0, 0, 0, 0)])
    (traj,) = ingest(path)
    assert "time" in traj.flags
    assert np.all(np.diff(traj.t) > 0)


def test_export_empty_corpus(tmp_path):
    path = tmp_path / "e.csv"
    export([], path)
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_round_trip_is_byte_identical(tmp_path):
    corpus, _ = generate(SynthConfig(n_trajectories=20, m=15, object_class="agent", with_heading=False))
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    export(corpus, first)
    back = ingest(first)
    export(back, second)
    assert first.read_bytes() == second.read_bytes()
    assert len(back) == 20
    for a, b in zip(corpus, back):
        np.testing.assert_array_equal(a.xy, b.xy)
        np.testing.assert_array_equal(a.t, b.t)


def test_thousand_trajectories_ingest(tmp_path):
    corpus, _ = generate(SynthConfig(n_trajectories=1000, m=3, object_class="ego"))
    path = tmp_path / "big.csv"
    export(corpus, path)
    assert len(ingest(path)) == 1000


# windows

def test_stride_windows_of_ten_second_track():
    traj = straight(duration=10.0, m=101)
    wins = window(traj, 5.0, "stride_1s")
    assert [round(w.t[0], 9) for w in wins] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert all(abs(w.duration - 5.0) < 1e-9 for w in wins)


def test_random_window_of_exact_length():
    traj = straight(duration=5.0, m=51)
    (w,) = window(traj, 5.0, "random_one", rng_seed=3)
    np.testing.assert_array_equal(w.t, traj.t)


def test_random_window_deterministic():
    traj = straight(duration=12.0, m=121)
    a = window(traj, 5.0, "random_one", rng_seed=7)[0]
    b = window(traj, 5.0, "random_one", rng_seed=7)[0]
    np.testing.assert_array_equal(a.t, b.t)


def test_short_track_has_no_window():
    assert window(straight(duration=3.0), 5.0) == []


@given(duration=st.floats(5.0, 20.0), m=st.integers(20, 200), T=st.floats(1.0, 5.0))
def test_windows_are_contiguous_subsequences(duration, m, T):
    traj = straight(duration=duration, m=m)
    for w in window(traj, T, "stride_1s"):
        i0 = int(np.flatnonzero(traj.t == w.t[0])[0])
        np.testing.assert_array_equal(traj.t[i0:i0 + w.m], w.t)
        np.testing.assert_array_equal(traj.xy[i0:i0 + w.m], w.xy)


# smoothing

def test_smoother_exact_on_constant_velocity():
    traj = straight(speed=12.0, angle=0.4)
    states = rts_smooth(traj)
    assert np.max(np.abs(states.pos - traj.xy)) < 1e-6
    np.testing.assert_allclose(states.vel, np.broadcast_to(12.0 * np.array([np.cos(0.4), np.sin(0.4)]), (50, 2)),
                               atol=1e-6)


def test_five_metre_jump_exceeds_gate():
    traj = straight()
    xy = traj.xy.copy()
    xy[25] += [0.0, 5.0]
    states = rts_smooth((traj.t, xy))
    assert np.hypot(*(states.pos[25] - xy[25])) > 2.0
    assert outlier_flags(make_traj(traj.t, xy)) == {"rts"}


# outlier rules

def test_clean_drive_has_no_flags():
    assert outlier_flags(straight(horizon=5.0)) == set()


def test_stationary_object_is_static():
    traj = make_traj(np.linspace(0, 5, 50), np.tile([3.0, 4.0], (50, 1)))
    assert outlier_flags(traj) == {"static"}


def test_stretched_duration_is_time_outlier():
    traj = straight(duration=25.64, speed=2.0, horizon=5.0)
    assert outlier_flags(traj) == {"time"}


def test_origin_reset_is_out_of_view():
    traj = straight(start=(20.0, 0.0))
    traj.xy[40:] = 0.0
    assert outlier_flags(traj) == {"out_of_view"}


def test_hard_braking_trips_gate():
    t = np.linspace(0, 5, 50)
    # 20 m/s braking at 12 m/s^2 until stop, then standing
    v0, a = 20.0, -12.0
    t_stop = -v0 / a
    s = np.where(t < t_stop, v0 * t + 0.5 * a * t**2, v0 * t_stop + 0.5 * a * t_stop**2)
    traj = make_traj(t, np.c_[s, np.zeros_like(s)])
    assert "rts" in outlier_flags(traj)


def test_report_fields():
    trajs = [straight(horizon=5.0), make_traj(np.linspace(0, 5, 20), np.ones((20, 2)))]
    clean, report = classify_outliers(trajs)
    assert len(clean) == 1
    data = report.to_dict()
    assert set(data) == {"n_trajectories", "total", *CATEGORIES}
    assert data["static"]["count"] == 1
    assert all(0 <= data[c]["percent"] <= 100 for c in CATEGORIES)
    assert report.total <= sum(report.counts.values())
    json.dumps(data)


def test_classification_is_idempotent():
    corpus, _ = generate(SynthConfig(n_trajectories=80, object_class="agent",
                                     outlier_rates={"rts": 0.2, "static": 0.1, "out_of_view": 0.1}))
    clean, _ = classify_outliers(corpus)
    again, report = classify_outliers(clean)
    assert report.total == 0 and len(again) == len(clean)


def test_path_extent_ignores_jitter():
    rng = np.random.default_rng(0)
    pos = rng.normal(scale=0.05, size=(200, 2))
    assert path_extent(pos) < 0.5


# local frame

def test_local_frame_first_sample_near_origin_and_aligned():
    traj = straight(speed=8.0, angle=1.1, start=(100.0, -40.0))
    local = to_local_frame(traj)
    y = local.local_positions()
    assert np.max(np.abs(y[0])) < 1e-6
    assert np.max(np.abs(y[:, 1])) < 1e-6
    assert np.all(np.diff(y[:, 0]) > 0)


def test_local_frame_round_trip(rng):
    traj = make_traj(np.linspace(0, 5, 30), rng.normal(scale=10, size=(30, 2)).cumsum(axis=0))
    local = to_local_frame(traj)
    assert np.max(np.abs(local.to_world(local.local_positions()) - traj.xy)) < 1e-9


@given(seed=st.integers(0, 2**31))
def test_local_frame_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    traj = make_traj(np.linspace(0, 5, 25), rng.normal(scale=3, size=(25, 2)).cumsum(axis=0))
    y = to_local_frame(traj).local_positions()
    d_world = np.linalg.norm(traj.xy[:, None] - traj.xy[None], axis=-1)
    d_local = np.linalg.norm(y[:, None] - y[None], axis=-1)
    assert np.max(np.abs(d_world - d_local)) < 1e-9


def test_standing_object_falls_back_to_heading():
    traj = make_traj(np.linspace(0, 5, 20), np.tile([1.0, 1.0], (20, 1)), heading=0.8)
    assert to_local_frame(traj).local_transform[1] == pytest.approx(0.8)


def test_standing_object_without_heading_flags_fallback():
    traj = make_traj(np.linspace(0, 5, 20), np.tile([1.0, 1.0], (20, 1)))
    with pytest.warns(UserWarning):
        local = to_local_frame(traj)
    assert "heading_fallback" in local.flags
    assert local.local_transform[1] == 0.0


def test_headings_relative_to_frame():
    traj = straight(angle=0.5)
    (local,) = prepare_for_fit([traj])
    np.testing.assert_allclose(headings(local), 0.0, atol=1e-6)
    with_heading = straight(angle=0.5, heading=0.5)
    (local,) = prepare_for_fit([with_heading])
    np.testing.assert_allclose(headings(local), 0.0, atol=1e-6)


def test_rigid_motion_gives_same_local_positions():
    traj = straight(speed=5.0, angle=0.2)
    traj.xy[:] += np.random.default_rng(1).normal(scale=0.02, size=traj.xy.shape)
    R = rotation(1.3)
    moved = make_traj(traj.t, traj.xy @ R.T + [50.0, 7.0])
    a = to_local_frame(traj).local_positions()
    b = to_local_frame(moved).local_positions()
    assert np.max(np.abs(a - b)) < 1e-9


def test_smoother_config_defaults():
    cfg = SmootherConfig()
    assert (cfg.position_gate, cfg.accel_max, cfg.decel_min, cfg.static_length_gate) == (2.0, 6.0, -10.0, 0.5)
