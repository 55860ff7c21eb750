"""Trajectory data model, CSV ingestion, windowing, RTS smoothing and outlier rules.

The canonical CSV has one row per sample and the header

    scenario_id,object_id,class,t,x,y,ego_x,ego_y,ego_heading,heading

with ``class`` in {ego, agent} and an empty ``heading`` when the dataset
provides none. Positions are world-frame meters, times seconds, angles
radians.
"""

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .noisemodel import rotation

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("scenario_id", "object_id", "class", "t", "x", "y", "ego_x", "ego_y", "ego_heading", "heading")
CLASSES = ("ego", "agent")
CATEGORIES = ("time", "static", "out_of_view", "rts")


class IngestError(ValueError):
    """Malformed input file; the message names the offending line."""


class TimeOrderError(ValueError):
    """Consecutive samples are not strictly increasing in time."""


@dataclass(frozen=True)
class RawSample:
    t: float
    x: float
    y: float
    ego_x: float
    ego_y: float
    ego_heading: float
    heading: float = math.nan


@dataclass
class TrackedTrajectory:
    """Time-stamped 2-D samples of one object together with the ego pose.

    ``horizon`` is the nominal window length ``T`` the trajectory is meant to
    cover (``None`` when it is an unwindowed track). ``local_transform`` is
    ``(translation, angle)``: local coordinates are
    ``rotation(-angle) @ (p - translation)``.
    """

    scenario_id: str
    object_id: str
    object_class: str
    t: np.ndarray
    xy: np.ndarray
    ego_xy: np.ndarray
    ego_heading: np.ndarray
    heading: np.ndarray
    horizon: float = None
    local_transform: tuple = None
    flags: frozenset = frozenset()

    def __post_init__(self):
        if self.object_class not in CLASSES:
            raise ValueError(f"object class must be one of {CLASSES}, got {self.object_class!r}")
        self.t = np.asarray(self.t, dtype=float)
        m = self.t.size
        self.xy = np.asarray(self.xy, dtype=float).reshape(m, 2)
        self.ego_xy = np.asarray(self.ego_xy, dtype=float).reshape(m, 2)
        self.ego_heading = np.asarray(self.ego_heading, dtype=float).reshape(m)
        self.heading = np.asarray(self.heading, dtype=float).reshape(m)
        self.flags = frozenset(self.flags)

    @property
    def m(self):
        return self.t.size

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0]) if self.m else 0.0

    @property
    def key(self):
        return (self.scenario_id, self.object_id)

    @property
    def samples(self):
        return [RawSample(*row) for row in zip(self.t, self.xy[:, 0], self.xy[:, 1], self.ego_xy[:, 0],
                                               self.ego_xy[:, 1], self.ego_heading, self.heading)]

    def taus(self):
        """Rescaled times in [0, 1] spanning this trajectory."""
        span = self.duration
        if not span > 0:
            raise TimeOrderError(f"trajectory {self.key} has no positive time span")
        return np.clip((self.t - self.t[0]) / span, 0.0, 1.0)

    def local_positions(self):
        if self.local_transform is None:
            return self.xy.copy()
        translation, angle = self.local_transform
        return (self.xy - translation) @ rotation(-angle).T

    def to_world(self, points):
        points = np.asarray(points, dtype=float)
        if self.local_transform is None:
            return points.copy()
        translation, angle = self.local_transform
        return points @ rotation(angle).T + translation

    def subset(self, idx, **changes):
        idx = np.asarray(idx)
        return replace(self, t=self.t[idx], xy=self.xy[idx], ego_xy=self.ego_xy[idx],
                       ego_heading=self.ego_heading[idx], heading=self.heading[idx], **changes)


# CSV I/O

def _parse_float(text, lineno, column, allow_empty=False):
    if text is None or text.strip() == "":
        if allow_empty:
            return math.nan
        raise IngestError(f"line {lineno}: missing value in column {column!r}")
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"line {lineno}: cannot parse {text!r} in column {column!r}") from None


def ingest(path, format="csv", horizon=None):
    """Read the canonical CSV into one trajectory per ``(scenario_id, object_id)``.

    Samples are sorted by time. An object whose rows are not strictly
    increasing in time is kept but carries the ``"time"`` flag. Positions
    may be empty (missing); they are read as NaN.
    """
    if format != "csv":
        raise ValueError(f"unsupported format {format!r}")
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError("line 1: file is empty (expected a header row)") from None
        if tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise IngestError(f"line 1: header must be {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise IngestError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            rec = dict(zip(CSV_COLUMNS, row))
            if rec["class"] not in CLASSES:
                raise IngestError(f"line {lineno}: class must be ego or agent, got {rec['class']!r}")
            t = _parse_float(rec["t"], lineno, "t")
            if not math.isfinite(t):
                raise IngestError(f"line {lineno}: non-finite timestamp")
            values = (
                t,
                _parse_float(rec["x"], lineno, "x", allow_empty=True),
                _parse_float(rec["y"], lineno, "y", allow_empty=True),
                _parse_float(rec["ego_x"], lineno, "ego_x"),
                _parse_float(rec["ego_y"], lineno, "ego_y"),
                _parse_float(rec["ego_heading"], lineno, "ego_heading"),
                _parse_float(rec["heading"], lineno, "heading", allow_empty=True),
            )
            key = (rec["scenario_id"], rec["object_id"])
            entry = groups.setdefault(key, {"class": rec["class"], "rows": []})
            if entry["class"] != rec["class"]:
                raise IngestError(f"line {lineno}: object {key} changes class")
            entry["rows"].append(values)

    trajs = []
    for (scenario_id, object_id), entry in groups.items():
        rows = np.array(entry["rows"], dtype=float)
        flags = set()
        if np.any(np.diff(rows[:, 0]) <= 0):
            flags.add("time")
            rows = rows[np.argsort(rows[:, 0], kind="stable")]
        trajs.append(TrackedTrajectory(
            scenario_id, object_id, entry["class"], rows[:, 0], rows[:, 1:3], rows[:, 3:5],
            rows[:, 5], rows[:, 6], horizon=horizon, flags=frozenset(flags),
        ))
    return trajs


def _fmt(value):
    return "" if math.isnan(value) else repr(float(value))


def export(corpus, path):
    """Write trajectories as canonical CSV (shortest round-trip float format)."""
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write corpus to {path}: {exc}") from exc
    with fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for traj in corpus:
            for s in traj.samples:
                writer.writerow([traj.scenario_id, traj.object_id, traj.object_class, _fmt(s.t), _fmt(s.x),
                                 _fmt(s.y), _fmt(s.ego_x), _fmt(s.ego_y), _fmt(s.ego_heading), _fmt(s.heading)])


def ego_trajectories(corpus):
    """Rebuild one ego trajectory per scenario from the ego columns."""
    per_scenario = {}
    for traj in corpus:
        rows = per_scenario.setdefault(traj.scenario_id, {})
        for t, (ex, ey), eh in zip(traj.t, traj.ego_xy, traj.ego_heading):
            rows.setdefault(float(t), (ex, ey, eh))
    out = []
    for scenario_id, rows in per_scenario.items():
        ts = np.array(sorted(rows))
        vals = np.array([rows[t] for t in ts])
        out.append(TrackedTrajectory(scenario_id, "ego", "ego", ts, vals[:, :2], vals[:, :2], vals[:, 2], vals[:, 2]))
    return out


def convert_argoverse1(paths, out_path, include_others=False):
    """Convert Argoverse 1.1 forecasting CSVs into the canonical schema.

    The ``AV`` track becomes the ego trajectory and supplies ego positions;
    ego heading is taken from the direction of ego motion. ``AGENT`` tracks
    (and ``OTHERS`` when requested) become agents without heading. The
    corpus is written to ``out_path`` unless it is ``None``.
    """
    corpus = []
    for path in paths:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        scenario = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
        av = sorted((float(r["TIMESTAMP"]), float(r["X"]), float(r["Y"])) for r in rows if r["OBJECT_TYPE"] == "AV")
        if len(av) < 2:
            continue
        av = np.array(av)
        d = np.gradient(av[:, 1:], av[:, 0], axis=0)
        av_heading = np.arctan2(d[:, 1], d[:, 0])
        lookup = {t: i for i, t in enumerate(av[:, 0])}
        kinds = {"AV": "ego", "AGENT": "agent"}
        if include_others:
            kinds["OTHERS"] = "agent"
        tracks = {}
        for r in rows:
            kind = kinds.get(r["OBJECT_TYPE"])
            t = float(r["TIMESTAMP"])
            if kind is None or t not in lookup:
                continue
            tracks.setdefault((r["TRACK_ID"], kind), []).append((t, float(r["X"]), float(r["Y"])))
        for (track_id, kind), samples in tracks.items():
            samples = np.array(sorted(samples))
            idx = [lookup[t] for t in samples[:, 0]]
            heading = av_heading[idx] if kind == "ego" else np.full(len(idx), np.nan)
            corpus.append(TrackedTrajectory(scenario, track_id, kind, samples[:, 0], samples[:, 1:],
                                            av[idx, 1:], av_heading[idx], heading))
    if out_path is not None:
        export(corpus, out_path)
    return corpus


# Windowing

def window(traj, T, mode="stride_1s", rng_seed=0, stride=1.0, eps=1e-6):
    """Cut a trajectory into windows of length ``T`` seconds.

    ``stride_1s`` starts a window every ``stride`` seconds from the first
    sample; ``random_one`` picks one window start uniformly among the
    sample times that leave room for a full window (deterministic given
    ``rng_seed``). Windows are contiguous sample ranges; a trajectory
    shorter than ``T`` yields no windows.
    """
    if traj.m < 2 or traj.duration < T - eps:
        return []
    t = traj.t
    end = t[-1]
    if mode == "stride_1s":
        starts = []
        k = 0
        while t[0] + k * stride + T <= end + eps:
            starts.append(int(np.searchsorted(t, t[0] + k * stride - eps)))
            k += 1
    elif mode == "random_one":
        candidates = np.flatnonzero(t + T <= end + eps)
        rng = np.random.default_rng(rng_seed)
        starts = [int(candidates[rng.integers(candidates.size)])]
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    out = []
    for i0 in starts:
        i1 = int(np.searchsorted(t, t[i0] + T + eps, side="right"))
        if i1 - i0 >= 2:
            out.append(traj.subset(np.arange(i0, i1), horizon=float(T), local_transform=None))
    return out


# RTS smoothing

@dataclass(frozen=True)
class SmootherConfig:
    """Smoother noise levels and outlier gates.

    ``process_noise`` is the white-acceleration density (m/s^2 per sqrt(Hz))
    and ``measurement_noise`` the isotropic position standard deviation.
    Longitudinal acceleration is only gated where the smoothed speed is at
    least ``min_speed``.
    """

    process_noise: float = 3.0
    measurement_noise: float = 0.5
    position_gate: float = 2.0
    accel_max: float = 6.0
    decel_min: float = -10.0
    static_length_gate: float = 0.5
    duration_tolerance: float = 0.05
    min_speed: float = 1.0

    def __post_init__(self):
        for name in ("process_noise", "measurement_noise", "position_gate", "accel_max",
                     "static_length_gate", "duration_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.decel_min < 0:
            raise ValueError("decel_min must be negative")
        if self.min_speed < 0:
            raise ValueError("min_speed must be non-negative")


@dataclass
class SmoothedStates:
    t: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    cov: np.ndarray
    accel: np.ndarray = field(init=False)
    a_lon: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.t.size >= 2:
            self.accel = np.gradient(self.vel, self.t, axis=0)
        else:
            self.accel = np.zeros_like(self.vel)
        speed = np.hypot(self.vel[:, 0], self.vel[:, 1])
        dot = np.einsum("ja,ja->j", self.accel, self.vel)
        self.a_lon = np.divide(dot, speed, out=np.zeros_like(dot), where=speed > 0)

    @property
    def speed(self):
        return np.hypot(self.vel[:, 0], self.vel[:, 1])


def _cv_model(dt, q):
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    Q = np.zeros((4, 4))
    Q[[0, 1], [0, 1]] = dt**3 / 3.0
    Q[[2, 3], [2, 3]] = dt
    Q[[0, 1, 2, 3], [2, 3, 0, 1]] = dt**2 / 2.0
    return F, q * q * Q


def rts_smooth(traj, cfg=None):
    """Constant-velocity Kalman filter followed by a Rauch-Tung-Striebel pass.

    Accepts a ``TrackedTrajectory`` or a ``(t, xy)`` pair. The state is
    ``[x, y, vx, vy]`` with white-acceleration process noise; irregular time
    steps are supported.

    Raises
    ------
    TimeOrderError
        If any time step is not positive.
    """
    cfg = cfg or SmootherConfig()
    if isinstance(traj, TrackedTrajectory):
        t, z = traj.t, traj.xy
    else:
        t, z = (np.asarray(a, dtype=float) for a in traj)
    m = t.size
    if m < 2:
        raise ValueError("smoothing needs at least two samples")
    dts = np.diff(t)
    if np.any(dts <= 0):
        raise TimeOrderError("timestamps must be strictly increasing")

    H = np.hstack([np.eye(2), np.zeros((2, 2))])
    R = cfg.measurement_noise**2 * np.eye(2)
    x = np.concatenate([z[0], (z[1] - z[0]) / dts[0]])
    P = np.diag([R[0, 0], R[1, 1], 2 * R[0, 0] / dts[0] ** 2, 2 * R[1, 1] / dts[0] ** 2])
    xs_f, Ps_f, xs_p, Ps_p, Fs = [], [], [], [], []
    for k in range(m):
        if k > 0:
            F, Q = _cv_model(dts[k - 1], cfg.process_noise)
            x, P = F @ x, F @ P @ F.T + Q
            Fs.append(F)
        xs_p.append(x)
        Ps_p.append(P)
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ (z[k] - H @ x)
        P = (np.eye(4) - K @ H) @ P
        P = 0.5 * (P + P.T)
        xs_f.append(x)
        Ps_f.append(P)

    xs, Ps = np.array(xs_f), np.array(Ps_f)
    for k in range(m - 2, -1, -1):
        F = Fs[k]
        P_pred = Ps_p[k + 1]
        G = np.linalg.solve(P_pred, F @ Ps_f[k]).T
        xs[k] = xs_f[k] + G @ (xs[k + 1] - xs_p[k + 1])
        Ps[k] = Ps_f[k] + G @ (Ps[k + 1] - P_pred) @ G.T
    return SmoothedStates(t.copy(), xs[:, :2].copy(), xs[:, 2:].copy(), Ps)


# Outlier classification

@dataclass
class OutlierReport:
    """Per-category counts; a trajectory may trip several categories but counts once in ``total``."""

    n_trajectories: int
    counts: dict
    total: int

    def percent(self, category):
        if self.n_trajectories == 0:
            return 0.0
        count = self.total if category == "total" else self.counts[category]
        return 100.0 * count / self.n_trajectories

    def to_dict(self):
        out = {"n_trajectories": self.n_trajectories}
        for cat in CATEGORIES + ("total",):
            count = self.total if cat == "total" else self.counts[cat]
            out[cat] = {"count": int(count), "percent": self.percent(cat)}
        return out

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def path_extent(pos):
    """Largest distance of any position from the first one.

    Used as the trajectory length for the static rule; unlike the summed arc
    length it does not grow with measurement jitter.
    """
    delta = pos - pos[0]
    return float(np.max(np.hypot(delta[:, 0], delta[:, 1])))


def _valid_mask(traj):
    finite = np.all(np.isfinite(traj.xy), axis=1)
    at_origin = np.all(traj.xy == 0.0, axis=1)
    return finite & ~at_origin


def outlier_flags(traj, cfg=None):
    """Set of outlier categories a single trajectory trips."""
    cfg = cfg or SmootherConfig()
    flags = set()
    if "time" in traj.flags or traj.m < 2 or np.any(np.diff(traj.t) <= 0):
        flags.add("time")
    elif traj.horizon is not None:
        if abs(traj.duration - traj.horizon) > cfg.duration_tolerance * traj.horizon:
            flags.add("time")
    valid = _valid_mask(traj)
    if not np.all(valid):
        flags.add("out_of_view")
    idx = np.flatnonzero(valid)
    if idx.size < 2 or np.any(np.diff(traj.t[idx]) <= 0):
        return flags
    states = rts_smooth((traj.t[idx], traj.xy[idx]), cfg)
    if path_extent(states.pos) <= cfg.static_length_gate:
        flags.add("static")
    dev = np.hypot(*(states.pos - traj.xy[idx]).T)
    moving = states.speed >= cfg.min_speed
    a_lon = states.a_lon[moving]
    if (np.max(dev) > cfg.position_gate
            or (a_lon.size and (a_lon.max() > cfg.accel_max or a_lon.min() < cfg.decel_min))):
        flags.add("rts")
    return flags


def classify_outliers(trajs, cfg=None):
    """Split trajectories into clean ones and a report of the outlier categories."""
    cfg = cfg or SmootherConfig()
    counts = dict.fromkeys(CATEGORIES, 0)
    clean, total = [], 0
    trajs = list(trajs)
    for traj in trajs:
        flags = outlier_flags(traj, cfg)
        for cat in flags:
            counts[cat] += 1
        if flags:
            total += 1
        else:
            clean.append(traj)
    return clean, OutlierReport(len(trajs), counts, total)


# Local frame

MIN_ALIGN_SPEED = 0.1


def to_local_frame(traj, states=None, cfg=None):
    """Attach the local frame: origin at the first smoothed position, x-axis along the initial velocity.

    Below 0.1 m/s initial speed the dataset heading is used instead; without
    one the rotation is the identity and the ``"heading_fallback"`` flag is set.
    """
    if states is None:
        states = rts_smooth(traj, cfg)
    if states.pos.shape[0] != traj.m:
        raise ValueError("smoothed states do not match the trajectory samples")
    v0 = states.vel[0]
    flags = set(traj.flags)
    if np.hypot(*v0) >= MIN_ALIGN_SPEED:
        angle = float(np.arctan2(v0[1], v0[0]))
    elif np.isfinite(traj.heading[0]):
        angle = float(traj.heading[0])
    else:
        angle = 0.0
        flags.add("heading_fallback")
        warnings.warn(f"trajectory {traj.key}: no heading source, using identity rotation", stacklevel=2)
    return replace(traj, local_transform=(states.pos[0].copy(), angle), flags=frozenset(flags))


def headings(traj, states=None, cfg=None):
    """Per-sample heading in the trajectory's fitting frame.

    Uses the dataset heading when every sample has one, otherwise the
    direction of the smoothed velocity.
    """
    if np.all(np.isfinite(traj.heading)):
        world = traj.heading
    else:
        if states is None:
            states = rts_smooth(traj, cfg)
        world = np.arctan2(states.vel[:, 1], states.vel[:, 0])
    angle = traj.local_transform[1] if traj.local_transform is not None else 0.0
    return world - angle


def prepare_for_fit(trajs, cfg=None):
    """Smooth each trajectory and move it into its local frame."""
    out = []
    for traj in trajs:
        out.append(to_local_frame(traj, rts_smooth(traj, cfg)))
    return out
