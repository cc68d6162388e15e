"""Ground-truth controlled systems and their integrators.

All functions are vectorised over leading batch axes: a state array has
shape ``(..., N)`` and a control array ``(..., M)``.  Controls are held
constant over each stored step (zero-order hold).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

SYSTEMS = (
    "inverted_pendulum",
    "kuramoto",
    "burgers1d",
    "rank_deficient_linear",
    "non_affine_mimo",
    "synthetic_poly",
)


class IntegrationBlowup(FloatingPointError):
    """A step produced NaN or Inf; carries the offending state."""

    def __init__(self, message: str, state: np.ndarray, index: int | None = None):
        super().__init__(message)
        self.state = state
        self.index = index


@dataclass(frozen=True)
class SystemSpec:
    system: str
    N: int
    M: int
    T: int
    dt: float
    params: dict[str, Any] = field(default_factory=dict)
    substeps: int = 1

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        if self.N < 1 or self.M < 1 or self.T < 2 or not self.dt > 0 or self.substeps < 1:
            raise ValueError(f"invalid dimensions for {self.system}: N={self.N} M={self.M} T={self.T} dt={self.dt}")
        if self.system in ("kuramoto", "burgers1d") and self.N != self.M:
            raise ValueError(f"{self.system} requires N == M (got N={self.N}, M={self.M})")
        if self.system == "inverted_pendulum" and (self.N, self.M) != (2, 1):
            raise ValueError("inverted_pendulum has N=2, M=1")
        if self.system in ("rank_deficient_linear", "non_affine_mimo", "synthetic_poly") and (self.N, self.M) != (2, 2):
            raise ValueError(f"{self.system} has N=2, M=2")

    def to_dict(self) -> dict:
        return {"system": self.system, "N": self.N, "M": self.M, "T": self.T,
                "dt": self.dt, "params": dict(self.params), "substeps": self.substeps}

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        return cls(d["system"], int(d["N"]), int(d["M"]), int(d["T"]), float(d["dt"]),
                   dict(d.get("params", {})), int(d.get("substeps", 1)))

    def with_(self, **kw) -> "SystemSpec":
        return replace(self, **kw)


def make_system(name: str, **kw) -> SystemSpec:
    """Build a spec with the default parameters for ``name``.

    Keyword arguments override the dimensions (``N``, ``T``, ``dt``,
    ``substeps``) or any system parameter (``gamma``, ``nu``, ``order``...).
    """
    dims = {k: kw.pop(k) for k in ("N", "M", "T", "dt", "substeps") if k in kw}
    if name == "inverted_pendulum":
        base = dict(N=2, M=1, T=128, dt=0.01)
        params = dict(g=9.81, L=1.0, m=1.0, mu=0.1)
    elif name == "kuramoto":
        n = dims.get("N", 8)
        base = dict(N=n, M=n, T=15, dt=0.1)
        params = dict(omega=0.0, gamma=1.0)
    elif name == "burgers1d":
        n = dims.get("N", 32)
        base = dict(N=n, M=n, T=10, dt=0.1, substeps=100)
        params = dict(nu=0.01)
    elif name == "rank_deficient_linear":
        base = dict(N=2, M=2, T=16, dt=0.1)
        params = dict(A=[[0.0, 1.0], [-1.0, -0.5]], B=[[0.0, 0.0], [1.0, 1.0]])
    elif name == "non_affine_mimo":
        base = dict(N=2, M=2, T=16, dt=0.1)
        params = {}
    elif name == "synthetic_poly":
        base = dict(N=2, M=2, T=16, dt=0.1)
        params = dict(order=1)
    else:
        raise ValueError(f"unknown system {name!r}; expected one of {SYSTEMS}")
    base.update(dims)
    if name in ("kuramoto", "burgers1d"):
        base["M"] = base["N"]
    unknown = set(kw) - set(params)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    params.update(kw)
    return SystemSpec(name, params=params, **base)


# ---------------------------------------------------------------------------
# vector fields


def _poly_coeffs(order: int) -> tuple[float, float]:
    if order not in (1, 2, 3):
        raise ValueError(f"synthetic_poly order must be 1, 2 or 3, got {order}")
    return (0.5 if order == 2 else 0.0), (0.3 if order == 3 else 0.0)


def vector_field(spec: SystemSpec, y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Time derivative of the state under control ``u``."""
    p = spec.params
    s = spec.system
    if s == "inverted_pendulum":
        th, om = y[..., 0], y[..., 1]
        acc = (p["g"] / p["L"]) * np.sin(th) - (p["mu"] / p["L"]) * om + u[..., 0] / (p["m"] * p["L"] ** 2)
        return np.stack([om, acc], axis=-1)
    if s == "kuramoto":
        left = np.roll(y, 1, axis=-1)
        right = np.roll(y, -1, axis=-1)
        return p["omega"] + p["gamma"] * (np.sin(left - y) + np.sin(right - y)) + u
    if s == "burgers1d":
        n = spec.N
        dx = 1.0 / (n - 1)
        out = np.zeros_like(y)
        yl, yc, yr = y[..., :-2], y[..., 1:-1], y[..., 2:]
        # skew-symmetric split of y*y_x: both pieces are central differences
        adv = (yc * (yr - yl) + (yr**2 - yl**2)) / (6.0 * dx)
        diff = p["nu"] * (yr - 2.0 * yc + yl) / dx**2
        out[..., 1:-1] = -adv + diff + u[..., 1:-1]
        return out
    if s == "rank_deficient_linear":
        A = np.asarray(p["A"], dtype=float)
        B = np.asarray(p["B"], dtype=float)
        return y @ A.T + u @ B.T
    if s == "non_affine_mimo":
        x1, x2 = y[..., 0], y[..., 1]
        return np.stack([-x1 + x2, np.sin(x1) - 0.5 * x2 + u[..., 0] ** 2 - u[..., 1] ** 2], axis=-1)
    if s == "synthetic_poly":
        c2, c3 = _poly_coeffs(int(p["order"]))
        y1, y2 = y[..., 0], y[..., 1]
        d1 = -0.5 * y1 + 0.3 * y2 + c2 * y1 * y2 + c3 * y2**3
        d2 = -0.3 * y1 - 0.5 * y2 + c2 * y1**2 + c3 * y1**3
        return np.stack([d1, d2], axis=-1) + u
    raise ValueError(s)


def _substep(spec, y, u, h, method):
    if method == "euler":
        return y + h * vector_field(spec, y, u)
    if method == "rk4":
        k1 = vector_field(spec, y, u)
        k2 = vector_field(spec, y + 0.5 * h * k1, u)
        k3 = vector_field(spec, y + 0.5 * h * k2, u)
        k4 = vector_field(spec, y + h * k3, u)
        return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    raise ValueError(f"unknown integrator {method!r}")


def _advance(spec, y, u, method, substeps):
    n = spec.substeps if substeps is None else substeps
    h = spec.dt / n
    with np.errstate(all="ignore"):
        for _ in range(n):
            y = _substep(spec, y, u, h, method)
    if spec.system == "burgers1d":
        y[..., 0] = 0.0
        y[..., -1] = 0.0
    return y


def step(spec: SystemSpec, y, u, method: str = "rk4", substeps: int | None = None) -> np.ndarray:
    """Advance ``y`` by one stored step of length ``spec.dt``."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.shape[-1] != spec.N or u.shape[-1] != spec.M:
        raise ValueError(f"state/control widths {y.shape[-1]}/{u.shape[-1]} do not match N={spec.N}, M={spec.M}")
    out = _advance(spec, y.copy(), u, method, substeps)
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowup(f"{spec.system} step produced non-finite values", out)
    return out


def simulate(spec: SystemSpec, y0, controls, method: str = "rk4", substeps: int | None = None):
    """Roll out without raising; returns ``(states, finite_mask)``.

    ``states`` has shape ``(..., T+1, N)``; ``finite_mask`` flags batch
    entries whose whole trajectory stayed finite.  Non-finite entries are
    frozen at the first bad state.
    """
    y0 = np.asarray(y0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    T = controls.shape[-2]
    if y0.shape[-1] != spec.N or controls.shape[-1] != spec.M:
        raise ValueError("state/control widths do not match the system")
    out = np.empty(y0.shape[:-1] + (T + 1, spec.N))
    out[..., 0, :] = y0
    ok = np.all(np.isfinite(y0), axis=-1)
    y = y0.copy()
    for t in range(T):
        nxt = _advance(spec, y.copy(), controls[..., t, :], method, substeps)
        good = np.all(np.isfinite(nxt), axis=-1)
        ok = ok & good
        y = np.where(ok[..., None], nxt, y)
        out[..., t + 1, :] = np.where(ok[..., None], nxt, np.nan)
    return out, ok


def rollout(spec: SystemSpec, y0, controls, method: str = "rk4", substeps: int | None = None) -> np.ndarray:
    """State trajectory of length ``T+1`` obtained by stepping each control."""
    y0 = np.asarray(y0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    states = np.empty(y0.shape[:-1] + (controls.shape[-2] + 1, spec.N))
    states[..., 0, :] = y0
    y = y0
    for t in range(controls.shape[-2]):
        try:
            y = step(spec, y, controls[..., t, :], method, substeps)
        except IntegrationBlowup as err:
            raise IntegrationBlowup(f"{spec.system} rollout blew up at step {t}", err.state, index=t) from None
        states[..., t + 1, :] = y
    return states
