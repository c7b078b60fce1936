"""Forward solvers for the killed/weighted population densities.

Both solvers share one splitting per time step: implicit conservative
diffusion in x, exact exponential killing (1d) or explicit upwind
transport in y (2d), explicit conservative upwind transport in x, and,
when a common-noise path is supplied, a linear-interpolation shift of the
whole density by sigma0 dW.  With noise the diffusion coefficient drops
to sigma^2/2; the noise enters purely as transport.

The splitting order is fixed so that the linear backward stepper is the
exact algebraic transpose of a forward step; see backward.py.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .controls import FeedbackControl
from .errors import CFLViolation, ControlOutOfBox, GridMismatch
from .measures import Density2D, SubProb1D, trapezoid_weights
from .model import Grid, ModelSpec, NuHandle

__all__ = [
    "CommonNoisePath",
    "shift_density",
    "solve_forward_1d",
    "solve_forward_2d",
    "ForwardTrajectory1D",
    "ForwardTrajectory2D",
]


@dataclass
class CommonNoisePath:
    """Brownian increments over the solver time grid, reproducible by seed."""

    increments: np.ndarray
    seed: int

    @classmethod
    def from_seed(cls, seed: int, nt: int, dt: float) -> "CommonNoisePath":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, np.sqrt(dt), size=nt), seed)

    @property
    def cumulative(self) -> np.ndarray:
        w = np.empty(self.increments.size + 1)
        w[0] = 0.0
        np.cumsum(self.increments, out=w[1:])
        return w


def shift_density(values: np.ndarray, offset: float, dx: float) -> np.ndarray:
    """Shift a sampled profile by `offset` (new(x) = old(x - offset)).

    Linear interpolation between nodes; inflow cells are zero-filled, so
    mass can only leave through the outflow boundary.  Works on 1d arrays
    or on the x axis (axis 0) of 2d arrays.
    """
    s = offset / dx
    k = int(np.floor(s))
    frac = s - k
    n = values.shape[0]

    def take(shifted_idx):
        # values at index i - shifted_idx with zero fill
        if shifted_idx == 0:
            return values
        pad = np.zeros_like(values[:1])
        if shifted_idx > 0:
            if shifted_idx >= n:
                return np.zeros_like(values)
            return np.concatenate([np.repeat(pad, shifted_idx, axis=0),
                                   values[:-shifted_idx]], axis=0)
        m = -shifted_idx
        if m >= n:
            return np.zeros_like(values)
        return np.concatenate([values[m:], np.repeat(pad, m, axis=0)], axis=0)

    out = (1.0 - frac) * take(k) + frac * take(k + 1)
    return out


# ---------------------------------------------------------------------------
# Shared step kernels (operate on (nx,) or (nx, m) arrays)
# ---------------------------------------------------------------------------


def diffusion_banded(a_nodes: np.ndarray, dt: float, dx: float,
                     transpose: bool = False) -> np.ndarray:
    """Banded matrix of I - dt * L for scipy.linalg.solve_banded.

    L is the conservative centered discretization of (a rho)_xx with
    zero-flux closure; its transpose is the centered a u_xx with the
    natural one-sided closure.
    """
    n = a_nodes.size
    r = dt / dx**2
    ab = np.zeros((3, n))
    if not transpose:
        ab[1, :] = 1.0 + 2.0 * r * a_nodes
        ab[1, 0] = 1.0 + r * a_nodes[0]
        ab[1, -1] = 1.0 + r * a_nodes[-1]
        ab[0, 1:] = -r * a_nodes[1:]     # upper: couples rho_{i+1} in row i
        ab[2, :-1] = -r * a_nodes[:-1]   # lower: couples rho_{i-1} in row i
    else:
        ab[1, :] = 1.0 + 2.0 * r * a_nodes
        ab[1, 0] = 1.0 + r * a_nodes[0]
        ab[1, -1] = 1.0 + r * a_nodes[-1]
        ab[0, 1:] = -r * a_nodes[:-1]    # row i couples u_{i+1} with a_i
        ab[2, :-1] = -r * a_nodes[1:]    # row i couples u_{i-1} with a_i
    return ab


def diffuse(values: np.ndarray, ab: np.ndarray) -> np.ndarray:
    flat = values if values.ndim == 2 else values[:, None]
    out = solve_banded((1, 1), ab, flat)
    return out if values.ndim == 2 else out[:, 0]


def upwind_face_flux(values: np.ndarray, b_face: np.ndarray) -> np.ndarray:
    """Upwind interface flux b^+ rho_left + b^- rho_right."""
    vaug = values if values.ndim == 2 else values[:, None]
    bf = b_face if b_face.ndim == 2 else b_face[:, None]
    flux = np.maximum(bf, 0.0) * vaug[:-1] + np.minimum(bf, 0.0) * vaug[1:]
    return flux if values.ndim == 2 else flux[:, 0]


def face_flux_divergence(flux: np.ndarray, dx: float) -> np.ndarray:
    """-(F_{i+1/2} - F_{i-1/2})/dx with zero-flux outer faces."""
    faug = flux if flux.ndim == 2 else flux[:, None]
    div = np.zeros((faug.shape[0] + 1, faug.shape[1]))
    div[:-1] += faug
    div[1:] -= faug
    div /= -dx
    return div if flux.ndim == 2 else div[:, 0]


def upwind_flux_divergence(values: np.ndarray, b_face: np.ndarray,
                           dx: float) -> np.ndarray:
    """Conservative upwind d/dx(b rho) with zero-flux outer faces.

    `b_face` has shape (nx-1,) or (nx-1, m) matching `values`.
    """
    return face_flux_divergence(upwind_face_flux(values, b_face), dx)


def upwind_transport_adjoint(u: np.ndarray, b_face: np.ndarray,
                             dx: float) -> np.ndarray:
    """Exact transpose of `upwind_flux_divergence`: an upwind b du/dx."""
    uaug = u if u.ndim == 2 else u[:, None]
    bf = b_face if b_face.ndim == 2 else b_face[:, None]
    du = uaug[1:] - uaug[:-1]
    du /= dx
    pos = bf > 0.0
    out = np.zeros_like(uaug)
    out[:-1] += np.where(pos, bf, 0.0) * du
    out[1:] += np.where(pos, 0.0, bf) * du
    return out if u.ndim == 2 else out[:, 0]


def y_transport(values: np.ndarray, lam_nodes: np.ndarray, dt: float,
                dy: float) -> np.ndarray:
    """Explicit upwind transport toward larger y at rate lam(x) >= 0.

    Zero inflow at the bottom; the top cell collects its incoming flux
    so total mass is conserved exactly.
    """
    c = (dt / dy) * lam_nodes[:, None]
    out = values * (1.0 - c)
    out[:, 1:] += c * values[:, :-1]
    out[:, -1] += c[:, 0] * values[:, -1]  # no outflow above the top cell
    return out


def y_transport_adjoint(u: np.ndarray, lam_nodes: np.ndarray, dt: float,
                        dy: float, ghost_decay: float) -> np.ndarray:
    """One-sided (forward-in-y) transpose: u += dt lam (u(y+dy)-u(y))/dy.

    The top row uses the extrapolated ghost value u_top * ghost_decay;
    ghost_decay = 1 reproduces the exact transpose of `y_transport`.
    """
    c = (dt / dy) * lam_nodes[:, None]
    upper = np.empty_like(u)
    upper[:, :-1] = u[:, 1:]
    upper[:, -1] = ghost_decay * u[:, -1]
    return u + c * (upper - u)


# ---------------------------------------------------------------------------
# Trajectory containers
# ---------------------------------------------------------------------------


@dataclass
class EnergyRecord:
    sup_sq: float
    h10_sum: float
    initial_sq: float
    constant: float


@dataclass
class ForwardTrajectory1D:
    grid: Grid
    times: np.ndarray
    values: np.ndarray          # (nt+1, nx)
    control: FeedbackControl
    noise: CommonNoisePath | None
    mass_series: np.ndarray     # solver (rectangle) mass per step
    energy: EnergyRecord
    boundary_leakage: float

    def at(self, k: int) -> SubProb1D:
        return SubProb1D(self.grid.x, self.values[k])

    def nu_handle(self, k: int) -> NuHandle:
        return NuHandle(self.grid.x, self.values[k])


@dataclass
class ForwardTrajectory2D:
    grid: Grid
    times: np.ndarray
    values: np.ndarray          # (nt+1, nx, ny_total)
    control: FeedbackControl
    noise: CommonNoisePath | None
    mass_series: np.ndarray
    energy: EnergyRecord
    boundary_leakage: float

    def at(self, k: int) -> Density2D:
        return Density2D(self.grid.x, self.grid.y, self.values[k])


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def _check_cfl(bmax: float, lmax: float, dt: float, dx: float, dy: float | None):
    cfl = bmax * dt / dx + (0.0 if dy is None else lmax * dt / dy)
    if cfl > 1.0 + 1e-12:
        raise CFLViolation(
            f"advective CFL number {cfl:.3f} > 1 (max|b|={bmax:.3g}, "
            f"max lam={lmax:.3g}); refine dt"
        )


def _control_values(spec: ModelSpec, g: FeedbackControl, k: int,
                    want_2d: bool) -> np.ndarray:
    gv = g.at_step(k)
    lo, hi = spec.box_array[0]
    if gv.min() < lo - 1e-12 or gv.max() > hi + 1e-12:
        raise ControlOutOfBox("control leaves the box at step %d" % k)
    if want_2d and gv.ndim == 1:
        return gv[:, None]
    return gv


def _drift_nodes(spec: ModelSpec, t: float, x: np.ndarray, nu: NuHandle,
                 gv: np.ndarray) -> np.ndarray:
    fac = np.asarray(spec.b1_factor(t, x), dtype=float)
    b0 = np.asarray(spec.b0(t, x, nu), dtype=float)
    if gv.ndim == 2:
        return b0[:, None] + fac[:, None] * gv
    return b0 + fac * gv


def _face_average(b_nodes: np.ndarray) -> np.ndarray:
    return 0.5 * (b_nodes[1:] + b_nodes[:-1]) if b_nodes.ndim == 1 else \
        0.5 * (b_nodes[1:, :] + b_nodes[:-1, :])


def _l2_sq(vals: np.ndarray, wx: np.ndarray, wy: np.ndarray | None) -> float:
    if wy is None:
        return float((vals**2) @ wx)
    return float(wx @ (vals**2) @ wy)


def _h10_sq(vals: np.ndarray, dx: float, wx: np.ndarray,
            wy: np.ndarray | None) -> float:
    grad = np.diff(vals, axis=0) / dx
    if wy is None:
        return float((grad**2).sum() * dx)
    return float(((grad**2) @ wy).sum() * dx)


def solve_forward_1d(
    spec: ModelSpec,
    grid: Grid,
    g: FeedbackControl,
    noise: CommonNoisePath | None = None,
    initial: np.ndarray | None = None,
) -> ForwardTrajectory1D:
    """March the weighted marginal density with killing.

    The killing term is applied through the exact integrating factor
    e^{-lam dt} per step, so a constant intensity decays total mass
    exactly like e^{-lam t} while diffusion and transport conserve it.
    """
    x = grid.x
    dx = grid.dx
    dt = grid.dt(spec.T)
    nt = grid.nt
    wx = trapezoid_weights(grid.nx, dx)

    if initial is None:
        # weighted x marginal of the initial joint density
        yq = np.linspace(0.0, max(grid.y_max, 6.0), 2001)
        wyq = trapezoid_weights(yq.size, yq[1] - yq[0])
        rho2 = spec.initial_density_2d(x[:, None], yq[None, :])
        vals0 = rho2 @ (np.exp(-yq) * wyq)
    else:
        vals0 = np.asarray(initial, dtype=float).copy()

    out = np.empty((nt + 1, grid.nx))
    out[0] = vals0
    mass = np.empty(nt + 1)
    mass[0] = vals0.sum() * dx

    sup_sq = _l2_sq(vals0, wx, None)
    h10_sum = 0.0
    init_sq = sup_sq

    increments = noise.increments if noise is not None else None
    if increments is not None and increments.size != nt:
        raise GridMismatch("noise path length does not match grid.nt")

    times = grid.times(spec.T)
    rho = vals0.copy()
    leakage = 0.0
    for k in range(nt):
        t = times[k]
        sig = np.asarray(spec.sigma(t, x), dtype=float)
        if increments is None:
            a = 0.5 * (sig**2 + spec.sigma0(t) ** 2)
        else:
            a = 0.5 * sig**2
        nu = NuHandle(x, rho)
        gv = _control_values(spec, g, k, want_2d=False)
        if gv.ndim == 2:
            raise GridMismatch("1d solver requires a y-independent feedback")
        b = _drift_nodes(spec, t, x, nu, gv)
        _check_cfl(float(np.max(np.abs(b))), 0.0, dt, dx, None)

        rho = diffuse(rho, diffusion_banded(a, dt, dx))
        rho = rho * np.exp(-np.asarray(spec.lam(t, x), dtype=float) * dt)
        rho = rho + dt * upwind_flux_divergence(rho, _face_average(b), dx)
        if increments is not None:
            pre = rho.sum()
            rho = shift_density(rho, spec.sigma0(t) * increments[k], dx)
            leakage += abs(pre - rho.sum()) * dx

        out[k + 1] = rho
        mass[k + 1] = rho.sum() * dx
        sup_sq = max(sup_sq, _l2_sq(rho, wx, None))
        h10_sum += (_l2_sq(rho, wx, None) + _h10_sq(rho, dx, wx, None)) * dt

    energy = EnergyRecord(sup_sq, h10_sum, init_sq,
                          (sup_sq + h10_sum) / init_sq if init_sq > 0 else 0.0)
    return ForwardTrajectory1D(grid, times, out, g, noise, mass, energy, leakage)


def solve_forward_2d(
    spec: ModelSpec,
    grid: Grid,
    g: FeedbackControl,
    noise: CommonNoisePath | None = None,
    initial: np.ndarray | None = None,
) -> ForwardTrajectory2D:
    """March the joint density of (position, cumulative intensity).

    The pair is never killed: the intensity coordinate is transported
    upward at rate lam(x) instead, with zero inflow at y = 0, so total
    mass is conserved exactly by the scheme.
    """
    x, y = grid.x, grid.y
    dx, dy = grid.dx, grid.dy
    dt = grid.dt(spec.T)
    nt = grid.nt
    wx = trapezoid_weights(grid.nx, dx)
    wy = trapezoid_weights(grid.ny_total, dy)

    if initial is None:
        vals0 = np.asarray(spec.initial_density_2d(x[:, None], y[None, :]), dtype=float)
        tot = wx @ vals0 @ wy
        vals0 = vals0 / tot
    else:
        vals0 = np.asarray(initial, dtype=float).copy()

    out = np.empty((nt + 1, grid.nx, grid.ny_total))
    out[0] = vals0
    mass = np.empty(nt + 1)
    mass[0] = vals0.sum() * dx * dy

    sup_sq = _l2_sq(vals0, wx, wy)
    init_sq = sup_sq
    h10_sum = 0.0

    increments = noise.increments if noise is not None else None
    if increments is not None and increments.size != nt:
        raise GridMismatch("noise path length does not match grid.nt")

    times = grid.times(spec.T)
    mu = vals0.copy()
    leakage = 0.0
    for k in range(nt):
        t = times[k]
        sig = np.asarray(spec.sigma(t, x), dtype=float)
        if increments is None:
            a = 0.5 * (sig**2 + spec.sigma0(t) ** 2)
        else:
            a = 0.5 * sig**2
        lam = np.asarray(spec.lam(t, x), dtype=float)
        keep = y >= 0.0
        wy_pos = trapezoid_weights(int(keep.sum()), dy)
        nu_vals = mu[:, keep] @ (np.exp(-y[keep]) * wy_pos)
        nu = NuHandle(x, nu_vals)
        gv = _control_values(spec, g, k, want_2d=True)
        b = _drift_nodes(spec, t, x, nu, gv)
        bmax = float(np.max(np.abs(b)))
        _check_cfl(bmax, float(lam.max()), dt, dx, dy)

        mu = diffuse(mu, diffusion_banded(a, dt, dx))
        expl = upwind_flux_divergence(mu, _face_average(b), dx)
        mu = y_transport(mu, lam, dt, dy) + dt * expl
        if increments is not None:
            pre = mu.sum()
            mu = shift_density(mu, spec.sigma0(t) * increments[k], dx)
            leakage += abs(pre - mu.sum()) * dx * dy

        out[k + 1] = mu
        mass[k + 1] = mu.sum() * dx * dy
        sup_sq = max(sup_sq, _l2_sq(mu, wx, wy))
        h10_sum += (_l2_sq(mu, wx, wy) + _h10_sq(mu, dx, wx, wy)) * dt

    energy = EnergyRecord(sup_sq, h10_sum, init_sq,
                          (sup_sq + h10_sum) / init_sq if init_sq > 0 else 0.0)
    return ForwardTrajectory2D(grid, times, out, g, noise, mass, energy, leakage)
