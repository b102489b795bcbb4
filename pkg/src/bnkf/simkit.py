"""Synthetic UAV trajectories, radar measurement simulation, datasets, and CSV I/O."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.interpolate import CubicHermiteSpline

from .geom import NoiseSigmas, SensorPose, measure, polar_to_position, wrap_angle

# One-sigma radar noise per tier: (range m, range-rate m/s, bearing deg, elevation deg).
NOISE_TIERS_DEG = {
    "low": (1.0, 0.01, 0.001, 0.001),
    "medium": (10.0, 0.1, 0.01, 0.01),
    "high": (100.0, 1.0, 0.1, 0.1),
}
SAMPLING_RATES = (1.0, 0.75, 0.5)

TRAJECTORY_COLUMNS = ["traj_id", "t", "x", "y", "z", "vx", "vy", "vz"]
MEASUREMENT_COLUMNS = ["traj_id", "t", "range", "bearing", "elevation", "range_rate",
                       "sigma_range", "sigma_bearing", "sigma_elevation", "sigma_range_rate",
                       "tier", "rate"]
DATASET_COLUMNS = MEASUREMENT_COLUMNS + ["tx", "ty", "tz", "fold"]
FEATURE_NAMES = ["range_t", "bearing_t", "elevation_t", "range_rate_t",
                 "range_t1", "bearing_t1", "elevation_t1", "range_rate_t1",
                 "sigma_range", "sigma_bearing", "sigma_elevation", "sigma_range_rate"]

MIN_RANGE = 1e-3


class SchemaError(ValueError):
    pass


def tier_sigmas(tier: str) -> NoiseSigmas:
    try:
        r, rr, b, e = NOISE_TIERS_DEG[tier]
    except KeyError:
        raise ValueError(f"unknown noise tier {tier!r}; expected one of {list(NOISE_TIERS_DEG)}")
    return NoiseSigmas.from_degrees(r, rr, b, e)


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit sub-seed from a master seed and role labels."""
    key = ":".join([str(int(master)), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def _fmt_float(x) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------- trajectories


@dataclass
class TrajectoryParams:
    """Sum-of-sinusoids flight around a randomly placed loiter point.

    Amplitudes are scaled down as needed so the analytic speed and acceleration
    bounds hold everywhere.
    """

    duration: float = 60.0
    dt: float = 0.1
    area_center: tuple[float, float, float] = (700.0, 700.0, 60.0)
    center_spread: tuple[float, float, float] = (3.0, 3.0, 2.0)
    amplitude: tuple[float, float, float] = (12.0, 12.0, 5.0)
    n_harmonics: int = 3
    period_range: tuple[float, float] = (3.0, 15.0)
    drift_speed: float = 0.0
    v_max: float = 12.0
    a_max: float = 8.0

    def __post_init__(self):
        for name in ("area_center", "center_spread", "amplitude", "period_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))


@dataclass
class Trajectory:
    id: int
    seed: int
    t: np.ndarray         # (N,)
    position: np.ndarray  # (N, 3)
    velocity: np.ndarray  # (N, 3)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.t.size

    def position_at(self, times: np.ndarray) -> np.ndarray:
        """Cubic Hermite interpolation of the true position (exact at sample times)."""
        times = np.asarray(times, dtype=float)
        exact = np.searchsorted(self.t, times)
        exact = np.clip(exact, 0, self.t.size - 1)
        hit = self.t[exact] == times
        out = np.empty(times.shape + (3,))
        out[hit] = self.position[exact[hit]]
        if not np.all(hit):
            spline = CubicHermiteSpline(self.t, self.position, self.velocity, axis=0)
            out[~hit] = spline(times[~hit])
        return out


def _speed_scale(v0: np.ndarray, b: np.ndarray, v_max: float) -> float:
    # largest s with || |v0| + s b || <= v_max
    a2 = b @ b
    if a2 == 0.0:
        return np.inf
    p = np.abs(v0) @ b
    c = np.abs(v0) @ np.abs(v0) - v_max**2
    return (-p + np.sqrt(p * p - a2 * c)) / a2


def generate_trajectory(seed: int, duration: float | None = None, dt: float | None = None,
                        params: TrajectoryParams | None = None, traj_id: int = 0) -> Trajectory:
    params = params or TrajectoryParams()
    duration = params.duration if duration is None else duration
    dt = params.dt if dt is None else dt
    if not (duration > 0 and dt > 0):
        raise ValueError("duration and dt must be positive")
    if params.v_max <= 0 or params.a_max <= 0:
        raise ValueError("speed and acceleration bounds must be positive")
    if params.drift_speed >= params.v_max:
        raise ValueError(f"drift speed {params.drift_speed} leaves no room under v_max {params.v_max}")
    lo, hi = params.period_range
    if not (0 < lo <= hi):
        raise ValueError("period range must satisfy 0 < low <= high")

    rng = np.random.default_rng(seed)
    center = np.asarray(params.area_center) + rng.uniform(-1, 1, 3) * np.asarray(params.center_spread)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    v0 = direction * params.drift_speed * rng.uniform(0, 1)
    K = params.n_harmonics
    amp = rng.uniform(0, 1, (3, K)) * np.asarray(params.amplitude)[:, None] / max(K, 1)
    omega = 2 * np.pi / rng.uniform(lo, hi, (3, K))
    phase = rng.uniform(0, 2 * np.pi, (3, K))

    s = min(1.0, _speed_scale(v0, (amp * omega).sum(axis=1), params.v_max))
    acc_bound = np.linalg.norm((amp * omega**2).sum(axis=1))
    if acc_bound > 0:
        s = min(s, params.a_max / acc_bound)
    amp = amp * s

    n = int(np.floor(duration / dt + 1e-9)) + 1
    t = np.arange(n) * dt
    arg = omega[None] * t[:, None, None] + phase[None]          # (N, 3, K)
    position = center + v0 * t[:, None] + (amp * (np.sin(arg) - np.sin(phase))).sum(axis=-1)
    velocity = v0 + (amp * omega * np.cos(arg)).sum(axis=-1)
    meta = {"duration": float(duration), "dt": float(dt), "amplitude_scale": float(s),
            "params": asdict(params)}
    return Trajectory(traj_id, int(seed), t, position, velocity, meta)


def trajectory_acceleration(traj: Trajectory) -> np.ndarray:
    """Second finite difference of the sampled positions."""
    dt = np.diff(traj.t)
    return np.diff(traj.position, 2, axis=0) / (dt[:-1, None] * dt[1:, None])


# --------------------------------------------------------------------------- measurements


@dataclass
class MeasurementSequence:
    traj_id: int
    tier: str
    rate: float
    seed: int
    t: np.ndarray   # (N,)
    z: np.ndarray   # (N, 4) range, bearing, elevation, range_rate
    sigmas: NoiseSigmas
    index: np.ndarray | None = None  # positions in the full-rate sequence

    def __len__(self) -> int:
        return self.t.size


def simulate_measurements(traj: Trajectory, sensor: SensorPose, tier: str, seed: int,
                          noise: bool = True) -> MeasurementSequence:
    """Radar (range, bearing, elevation, range-rate) with tier noise; ``noise=False`` is exact."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    sig = tier_sigmas(tier)
    z = measure(traj.position, traj.velocity, sensor)
    if noise:
        rng = np.random.default_rng(seed)
        z = z + rng.standard_normal(z.shape) * sig.as_array()
        z[:, 0] = np.maximum(z[:, 0], MIN_RANGE)
        z[:, 1] = wrap_angle(z[:, 1])
        # fold elevation back into [-pi/2, pi/2]
        el = wrap_angle(z[:, 2])
        over = np.abs(el) > np.pi / 2
        el[over] = np.sign(el[over]) * np.pi - el[over]
        z[:, 2] = el
    return MeasurementSequence(traj.id, tier, 1.0, int(seed), traj.t.copy(), z, sig,
                               np.arange(len(traj)))


def retained_count(n: int, rate: float) -> int:
    return max(2, int(np.floor(rate * n + 0.5)))


def downsample(seq: MeasurementSequence, rate: float, seed: int) -> MeasurementSequence:
    """Keep ``round(rate * n)`` measurements uniformly at random; the first two always stay."""
    n = len(seq)
    if n < 4:
        raise ValueError(f"downsampling needs at least 4 measurements, got {n}")
    if not 0 < rate <= 1:
        raise ValueError(f"sampling rate must be in (0, 1], got {rate}")
    keep = retained_count(n, rate)
    if keep >= n:
        idx = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        extra = rng.choice(np.arange(2, n), size=keep - 2, replace=False)
        idx = np.concatenate([[0, 1], np.sort(extra)])
    base = seq.index if seq.index is not None else np.arange(n)
    return MeasurementSequence(seq.traj_id, seq.tier, float(rate), int(seed), seq.t[idx],
                               seq.z[idx], seq.sigmas, base[idx])


# --------------------------------------------------------------------------- datasets


@dataclass
class SupervisedDataset:
    """One row per consecutive measurement pair: features, true position at t+1."""

    features: np.ndarray  # (M, 12)
    target: np.ndarray    # (M, 3)
    traj_id: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    tier: np.ndarray
    rate: np.ndarray
    fold: np.ndarray | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, mask) -> "SupervisedDataset":
        return SupervisedDataset(self.features[mask], self.target[mask], self.traj_id[mask],
                                 self.t0[mask], self.t1[mask], self.tier[mask], self.rate[mask],
                                 None if self.fold is None else self.fold[mask])

    @classmethod
    def concat(cls, parts: list["SupervisedDataset"]) -> "SupervisedDataset":
        folds = [p.fold for p in parts]
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("features", "target", "traj_id", "t0", "t1", "tier", "rate")),
                   None if any(f is None for f in folds) else np.concatenate(folds))


def feature_matrix(z0: np.ndarray, z1: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Pair features: measurement at t, measurement at t+1, then the four sigmas."""
    sig = np.broadcast_to(sigmas, z0.shape)
    # sigma block order is (range, bearing, elevation, range_rate), matching z
    return np.concatenate([z0, z1, sig], axis=-1)


def build_supervised(seq: MeasurementSequence, traj: Trajectory) -> SupervisedDataset:
    if len(seq) < 2:
        raise ValueError("need at least two measurements to form a pair")
    X = feature_matrix(seq.z[:-1], seq.z[1:], seq.sigmas.as_array())
    m = len(seq) - 1
    return SupervisedDataset(X, traj.position_at(seq.t[1:]), np.full(m, seq.traj_id),
                             seq.t[:-1].copy(), seq.t[1:].copy(), np.full(m, seq.tier),
                             np.full(m, seq.rate))


def assign_folds(traj_ids, k: int = 5, seed: int = 0) -> dict[int, int]:
    """Partition distinct trajectory ids into ``k`` near-equal folds."""
    ids = np.unique(np.asarray(traj_ids))
    if ids.size < k:
        raise ValueError(f"{ids.size} trajectories cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(ids)
    return {int(i): f for f, chunk in enumerate(np.array_split(perm, k)) for i in chunk}


@dataclass
class MeasurementTable:
    """Measurement-level dataset (the on-disk form): one row per retained measurement."""

    traj_id: np.ndarray
    t: np.ndarray
    z: np.ndarray        # (M, 4)
    sigmas: np.ndarray   # (M, 4) range, bearing, elevation, range_rate
    tier: np.ndarray
    rate: np.ndarray
    target: np.ndarray   # (M, 3)
    fold: np.ndarray

    def __len__(self) -> int:
        return self.t.size

    @classmethod
    def from_sequences(cls, seqs: list[MeasurementSequence], trajs: dict[int, Trajectory],
                       folds: dict[int, int] | None = None) -> "MeasurementTable":
        cols = {k: [] for k in ("traj_id", "t", "z", "sigmas", "tier", "rate", "target", "fold")}
        for s in seqs:
            n = len(s)
            cols["traj_id"].append(np.full(n, s.traj_id))
            cols["t"].append(s.t)
            cols["z"].append(s.z)
            cols["sigmas"].append(np.broadcast_to(s.sigmas.as_array(), (n, 4)))
            cols["tier"].append(np.full(n, s.tier, dtype=object))
            cols["rate"].append(np.full(n, s.rate))
            cols["target"].append(trajs[s.traj_id].position_at(s.t))
            cols["fold"].append(np.full(n, -1 if folds is None else folds[s.traj_id]))
        return cls(**{k: np.concatenate(v) for k, v in cols.items()})

    def group_bounds(self) -> list[tuple[int, int]]:
        """(start, stop) row ranges of each (traj_id, rate) sequence, in file order."""
        key_change = np.nonzero((np.diff(self.traj_id) != 0) | (np.diff(self.rate) != 0))[0] + 1
        edges = np.concatenate([[0], key_change, [len(self)]])
        return list(zip(edges[:-1], edges[1:]))

    def sequences(self) -> list[MeasurementSequence]:
        out = []
        for a, b in self.group_bounds():
            s = self.sigmas[a]
            out.append(MeasurementSequence(int(self.traj_id[a]), str(self.tier[a]),
                                           float(self.rate[a]), -1, self.t[a:b], self.z[a:b],
                                           NoiseSigmas(s[0], s[3], s[1], s[2])))
        return out

    def supervised(self) -> SupervisedDataset:
        first = np.zeros(len(self), dtype=bool)
        for a, _ in self.group_bounds():
            first[a] = True
        i1 = np.nonzero(~first)[0]
        i0 = i1 - 1
        return SupervisedDataset(feature_matrix(self.z[i0], self.z[i1], self.sigmas[i1]),
                                 self.target[i1], self.traj_id[i1], self.t[i0], self.t[i1],
                                 self.tier[i1], self.rate[i1], self.fold[i1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "traj_id": self.traj_id, "t": self.t,
            "range": self.z[:, 0], "bearing": self.z[:, 1],
            "elevation": self.z[:, 2], "range_rate": self.z[:, 3],
            "sigma_range": self.sigmas[:, 0], "sigma_bearing": self.sigmas[:, 1],
            "sigma_elevation": self.sigmas[:, 2], "sigma_range_rate": self.sigmas[:, 3],
            "tier": self.tier, "rate": self.rate,
            "tx": self.target[:, 0], "ty": self.target[:, 1], "tz": self.target[:, 2],
            "fold": self.fold,
        }, columns=DATASET_COLUMNS)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "MeasurementTable":
        return cls(df["traj_id"].to_numpy(np.int64), df["t"].to_numpy(float),
                   df[["range", "bearing", "elevation", "range_rate"]].to_numpy(float),
                   df[["sigma_range", "sigma_bearing", "sigma_elevation",
                       "sigma_range_rate"]].to_numpy(float),
                   df["tier"].to_numpy(object), df["rate"].to_numpy(float),
                   df[["tx", "ty", "tz"]].to_numpy(float), df["fold"].to_numpy(np.int64))


# --------------------------------------------------------------------------- CSV I/O


def _write_csv(df: pd.DataFrame, path: str | Path) -> None:
    buf = io.StringIO()
    df.to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def _read_csv(path: str | Path, columns: list[str]) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    unknown = [c for c in df.columns if c not in columns]
    if unknown:
        raise SchemaError(f"{path}: unknown column {unknown[0]!r}")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column {missing[0]!r}")
    return df[columns]


def write_dataset(table: MeasurementTable, path: str | Path) -> None:
    _write_csv(table.to_frame(), path)


def read_dataset(path: str | Path) -> MeasurementTable:
    return MeasurementTable.from_frame(_read_csv(path, DATASET_COLUMNS))


def write_measurements(seqs: list[MeasurementSequence], path: str | Path) -> None:
    frames = []
    for s in seqs:
        sig = s.sigmas.as_array()
        frames.append(pd.DataFrame({
            "traj_id": s.traj_id, "t": s.t, "range": s.z[:, 0], "bearing": s.z[:, 1],
            "elevation": s.z[:, 2], "range_rate": s.z[:, 3],
            "sigma_range": sig[0], "sigma_bearing": sig[1], "sigma_elevation": sig[2],
            "sigma_range_rate": sig[3], "tier": s.tier, "rate": s.rate,
        }, columns=MEASUREMENT_COLUMNS))
    _write_csv(pd.concat(frames, ignore_index=True), path)


def read_measurements(path: str | Path) -> list[MeasurementSequence]:
    df = _read_csv(path, MEASUREMENT_COLUMNS)
    df = df.assign(tx=np.nan, ty=np.nan, tz=np.nan, fold=-1)
    return MeasurementTable.from_frame(df).sequences()


def write_trajectories(trajs: list[Trajectory], path: str | Path) -> None:
    frames = [pd.DataFrame({"traj_id": tr.id, "t": tr.t,
                            "x": tr.position[:, 0], "y": tr.position[:, 1], "z": tr.position[:, 2],
                            "vx": tr.velocity[:, 0], "vy": tr.velocity[:, 1],
                            "vz": tr.velocity[:, 2]}, columns=TRAJECTORY_COLUMNS)
              for tr in trajs]
    _write_csv(pd.concat(frames, ignore_index=True), path)


def read_trajectories(path: str | Path) -> list[Trajectory]:
    """Import trajectories from the ``traj_id,t,x,y,z,vx,vy,vz`` CSV schema."""
    df = _read_csv(path, TRAJECTORY_COLUMNS)
    out = []
    for tid, g in df.groupby("traj_id", sort=False):
        t = g["t"].to_numpy(float)
        if np.any(np.diff(t) <= 0):
            raise SchemaError(f"{path}: timestamps of trajectory {tid} are not strictly increasing")
        out.append(Trajectory(int(tid), -1, t, g[["x", "y", "z"]].to_numpy(float),
                              g[["vx", "vy", "vz"]].to_numpy(float), {"source": str(path)}))
    return out


# --------------------------------------------------------------------------- pipeline


@dataclass
class SimulationConfig:
    n_trajectories: int = 500
    n_validation: int = 20
    sensor: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rates: tuple[float, ...] = SAMPLING_RATES
    folds: int = 5
    trajectory: TrajectoryParams = field(default_factory=TrajectoryParams)

    def __post_init__(self):
        if isinstance(self.trajectory, dict):
            self.trajectory = TrajectoryParams(**self.trajectory)
        self.sensor = tuple(float(v) for v in self.sensor)
        self.rates = tuple(float(r) for r in self.rates)


def make_trajectories(master_seed: int, cfg: SimulationConfig, role: str = "trajectory",
                      count: int | None = None, id_offset: int = 0) -> list[Trajectory]:
    count = cfg.n_trajectories if count is None else count
    return [generate_trajectory(derive_seed(master_seed, role, i), params=cfg.trajectory,
                                traj_id=id_offset + i) for i in range(count)]


def make_sequences(trajs: list[Trajectory], master_seed: int, cfg: SimulationConfig,
                   tier: str, role: str = "noise") -> list[MeasurementSequence]:
    """All configured rate variants of every trajectory, grouped by rate then trajectory."""
    sensor = SensorPose(cfg.sensor)
    full = [simulate_measurements(tr, sensor, tier, derive_seed(master_seed, role, tier, tr.id))
            for tr in trajs]
    out = []
    for rate in cfg.rates:
        for s in full:
            if rate == 1.0:
                out.append(s)
            else:
                out.append(downsample(s, rate, derive_seed(master_seed, "downsample", tier,
                                                           rate, s.traj_id)))
    return out


def build_table(master_seed: int, cfg: SimulationConfig, tier: str) -> tuple[list[Trajectory], MeasurementTable]:
    trajs = make_trajectories(master_seed, cfg)
    seqs = make_sequences(trajs, master_seed, cfg, tier)
    folds = assign_folds([t.id for t in trajs], cfg.folds, derive_seed(master_seed, "folds"))
    return trajs, MeasurementTable.from_sequences(seqs, {t.id: t for t in trajs}, folds)


def build_validation_table(master_seed: int, cfg: SimulationConfig, tier: str) -> MeasurementTable:
    """Held-out trajectories (distinct seeds and ids) for baseline tuning."""
    trajs = make_trajectories(master_seed, cfg, role="validation", count=cfg.n_validation,
                              id_offset=10**6)
    seqs = make_sequences(trajs, master_seed, cfg, tier, role="validation-noise")
    return MeasurementTable.from_sequences(seqs, {t.id: t for t in trajs})


def converted_positions(table: MeasurementTable, sensor: SensorPose) -> np.ndarray:
    return polar_to_position(table.z[:, 0], table.z[:, 1], table.z[:, 2], sensor)
