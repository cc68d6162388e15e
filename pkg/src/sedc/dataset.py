"""Trajectory datasets: synthesis, normalisation, subsets, noise and I/O."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import SystemSpec, simulate
from .numerics import make_rng

MAGIC = b"SEDC"
VERSION = 1
STD_FLOOR = 1e-8


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    """Malformed ``.sedc`` file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (T+1, N)
    controls: np.ndarray  # (T, M)
    dt: float
    system: str


@dataclass(frozen=True)
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray, controls: np.ndarray) -> "NormStats":
        ys = states.reshape(-1, states.shape[-1])
        us = controls.reshape(-1, controls.shape[-1])
        return cls(ys.mean(0), np.maximum(ys.std(0), STD_FLOOR), us.mean(0), np.maximum(us.std(0), STD_FLOOR))

    def norm_states(self, y):
        return (np.asarray(y) - self.state_mean) / self.state_std

    def denorm_states(self, y):
        return np.asarray(y) * self.state_std + self.state_mean

    def norm_controls(self, u):
        return (np.asarray(u) - self.control_mean) / self.control_std

    def denorm_controls(self, u):
        return np.asarray(u) * self.control_std + self.control_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("state_mean", "state_std", "control_mean", "control_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("state_mean", "state_std", "control_mean", "control_std")))


@dataclass(frozen=True)
class TrajectoryDataset:
    spec: SystemSpec
    states: np.ndarray  # (P, T+1, N)
    controls: np.ndarray  # (P, T, M)
    provenance: str = "generated"
    tags: tuple[str, ...] = ()
    stats: NormStats = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        P = self.states.shape[0]
        if P < 1:
            raise DatasetError("a dataset needs at least one trajectory")
        T, N, M = self.spec.T, self.spec.N, self.spec.M
        if self.states.shape != (P, T + 1, N) or self.controls.shape != (P, T, M):
            raise DatasetError(
                f"array shapes {self.states.shape}/{self.controls.shape} inconsistent with "
                f"{self.spec.system} (T={T}, N={N}, M={M})"
            )
        if not self.tags:
            object.__setattr__(self, "tags", (self.provenance,) * P)
        elif len(self.tags) != P:
            raise DatasetError("one provenance tag per trajectory required")
        object.__setattr__(self, "stats", NormStats.fit(self.states, self.controls))

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.controls[i], self.spec.dt, self.spec.system)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "TrajectoryDataset":
        idx = np.asarray(idx)
        return replace(self, states=self.states[idx], controls=self.controls[idx],
                       tags=tuple(self.tags[i] for i in idx))

    def append(self, states: np.ndarray, controls: np.ndarray, tag: str) -> "TrajectoryDataset":
        if len(states) == 0:
            return self
        return replace(
            self,
            states=np.concatenate([self.states, states]),
            controls=np.concatenate([self.controls, controls]),
            provenance=tag,
            tags=self.tags + (tag,) * len(states),
        )

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-trajectory (first state, last state): the control-task conditions."""
        return self.states[:, 0], self.states[:, -1]

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.states).tobytes())
        h.update(np.ascontiguousarray(self.controls).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# synthesis


def _sample_initial_and_controls(spec: SystemSpec, rng: np.random.Generator):
    T, N, M = spec.T, spec.N, spec.M
    s = spec.system
    if s == "inverted_pendulum":
        return rng.uniform(-1, 1, N), rng.uniform(-0.5, 0.5, (T, M))
    if s == "kuramoto":
        return rng.standard_normal(N), rng.normal(0.0, math.sqrt(2.0), (T, M))
    if s == "burgers1d":
        x = np.linspace(0.0, 1.0, N)
        modes = rng.integers(1, 5, size=2)
        amps = rng.uniform(-0.5, 0.5, size=2)
        y0 = amps[0] * np.sin(np.pi * modes[0] * x) + amps[1] * np.sin(np.pi * modes[1] * x)
        y0[0] = y0[-1] = 0.0
        raw = rng.normal(0.0, 0.1, (T, M))
        padded = np.pad(raw, ((0, 0), (1, 1)), mode="edge")
        u = (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3.0
        u[:, 0] = u[:, -1] = 0.0
        return y0, u
    return rng.standard_normal(N), rng.standard_normal((T, M))


def generate(spec: SystemSpec, count: int, seed: int, method: str = "rk4") -> TrajectoryDataset:
    """Random-intervention trajectories, deterministic in ``(spec, count, seed)``.

    Trajectory ``i`` draws from its own stream keyed by ``(seed, i)``;
    a trajectory that blows up is redrawn from the same stream.
    """
    if count < 1:
        raise DatasetError("count must be >= 1")
    streams = [np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), i]))) for i in range(count)]
    y0 = np.empty((count, spec.N))
    u = np.empty((count, spec.T, spec.M))
    for i, r in enumerate(streams):
        y0[i], u[i] = _sample_initial_and_controls(spec, r)
    states, ok = simulate(spec, y0, u, method)
    retries = 0
    while not ok.all():
        bad = np.flatnonzero(~ok)
        retries += len(bad)
        if retries > 10 * count:
            raise DatasetError(f"{spec.system}: more than {10 * count} blow-up retries during generation")
        for i in bad:
            y0[i], u[i] = _sample_initial_and_controls(spec, streams[i])
        redo, ok_bad = simulate(spec, y0[bad], u[bad], method)
        states[bad] = redo
        ok[bad] = ok_bad
    return TrajectoryDataset(spec, states, u, provenance="generated")


def split_test(ds: TrajectoryDataset, n_test: int = 50) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Hold out the last ``n_test`` trajectories."""
    if len(ds) <= n_test:
        raise DatasetError(f"need more than {n_test} trajectories to split off a test set")
    return ds.take(np.arange(len(ds) - n_test)), ds.take(np.arange(len(ds) - n_test, len(ds)))


def split_validation(ds: TrajectoryDataset, fraction: float, seed: int):
    """Seeded split into (train, validation); validation gets at least one trajectory."""
    P = len(ds)
    n_val = max(1, int(round(fraction * P))) if P > 1 else 0
    perm = make_rng(seed).permutation(P)
    if n_val == 0:
        return ds, ds
    return ds.take(np.sort(perm[n_val:])), ds.take(np.sort(perm[:n_val]))


def subset(ds: TrajectoryDataset, fraction: float, seed: int) -> TrajectoryDataset:
    """First ``ceil(fraction * P)`` trajectories of a seeded shuffle (nested in fraction)."""
    if not 0 < fraction <= 1:
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")
    perm = make_rng(seed).permutation(len(ds))
    n = max(1, math.ceil(fraction * len(ds) - 1e-9))
    return ds.take(perm[:n])


def normalize(ds: TrajectoryDataset) -> tuple[TrajectoryDataset, NormStats]:
    if len(ds) < 2:
        raise DatasetError("normalisation needs at least two trajectories")
    st = ds.stats
    return replace(ds, states=st.norm_states(ds.states), controls=st.norm_controls(ds.controls)), st


def denormalize(ds: TrajectoryDataset, stats: NormStats) -> TrajectoryDataset:
    return replace(ds, states=stats.denorm_states(ds.states), controls=stats.denorm_controls(ds.controls))


def inject_noise(ds: TrajectoryDataset, sigma: float, seed: int) -> TrajectoryDataset:
    """Add iid N(0, sigma^2) observation noise to the states only."""
    if sigma < 0:
        raise DatasetError("sigma must be non-negative")
    if sigma == 0:
        return ds
    noisy = ds.states + make_rng(seed).normal(0.0, sigma, ds.states.shape)
    tag = f"noisy_{sigma:g}"
    return replace(ds, states=noisy, provenance=tag, tags=(tag,) * len(ds))


# ---------------------------------------------------------------------------
# persistence


def save(ds: TrajectoryDataset, path) -> Path:
    if len(ds) < 1:
        raise DatasetError("refusing to save an empty dataset")
    header = {
        "system": ds.spec.system, "N": ds.spec.N, "M": ds.spec.M, "T": ds.spec.T, "dt": ds.spec.dt,
        "substeps": ds.spec.substeps, "count": len(ds), "params": ds.spec.params,
        "provenance": ds.provenance, "tags": list(ds.tags), "stats": ds.stats.to_dict(),
    }
    hb = json.dumps(header).encode("utf-8")
    recs = np.concatenate(
        [ds.states.reshape(len(ds), -1), ds.controls.reshape(len(ds), -1)], axis=1
    ).astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(recs.tobytes())
    return path


def load(path) -> TrajectoryDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DatasetFormatError(f"file too short: expected at least 12 bytes, got {len(raw)}", len(raw))
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if 12 + hlen > len(raw):
        raise DatasetFormatError(f"header truncated: expected {12 + hlen} bytes, got {len(raw)}", len(raw))
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DatasetFormatError(f"header is not valid JSON: {err}", 12) from None
    spec = SystemSpec(header["system"], int(header["N"]), int(header["M"]), int(header["T"]),
                      float(header["dt"]), dict(header.get("params", {})), int(header.get("substeps", 1)))
    P = int(header["count"])
    per = (spec.T + 1) * spec.N + spec.T * spec.M
    start = 12 + hlen
    expected = start + 4 * per * P
    if len(raw) != expected:
        raise DatasetFormatError(f"record block size mismatch: expected {expected} bytes, got {len(raw)}",
                                 min(len(raw), expected))
    recs = np.frombuffer(raw, dtype="<f4", offset=start).astype(np.float64).reshape(P, per)
    ns = (spec.T + 1) * spec.N
    states = recs[:, :ns].reshape(P, spec.T + 1, spec.N)
    controls = recs[:, ns:].reshape(P, spec.T, spec.M)
    tags = tuple(header.get("tags") or ())
    return TrajectoryDataset(spec, states, controls, header.get("provenance", "generated"), tags)


def export_csv(ds: TrajectoryDataset, path) -> Path:
    """One row per (trajectory, t); control columns are blank at t = T."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    N, M, T = ds.spec.N, ds.spec.M, ds.spec.T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "t"] + [f"y_{i}" for i in range(N)] + [f"u_{j}" for j in range(M)])
        for p in range(len(ds)):
            for t in range(T + 1):
                us = [repr(float(v)) for v in ds.controls[p, t]] if t < T else [""] * M
                w.writerow([p, t] + [repr(float(v)) for v in ds.states[p, t]] + us)
    return path
