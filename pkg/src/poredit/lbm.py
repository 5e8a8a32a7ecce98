"""Single-phase lattice Boltzmann permeability solver (D3Q19, BGK).

Flow is driven by a pressure (density) difference between the inlet and
outlet faces along the flow axis, imposed with Zou-He style boundary
conditions. Solid walls use half-way bounce-back. Permeability follows
Darcy's law from the superficial velocity at steady state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy import ndimage

# D3Q19 velocity set: rest, 6 face neighbors, 12 edge neighbors.
VELOCITIES = np.array(
    [
        (0, 0, 0),
        (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
        (1, 1, 0), (-1, -1, 0), (1, -1, 0), (-1, 1, 0),
        (1, 0, 1), (-1, 0, -1), (1, 0, -1), (-1, 0, 1),
        (0, 1, 1), (0, -1, -1), (0, 1, -1), (0, -1, 1),
    ],
    dtype=np.int64,
)
WEIGHTS = np.array([1 / 3] + [1 / 18] * 6 + [1 / 36] * 12)
OPPOSITE = np.array(
    [np.where((VELOCITIES == -VELOCITIES[i]).all(axis=1))[0][0] for i in range(19)], dtype=np.int64
)


class LbmError(RuntimeError):
    pass


@dataclass(frozen=True)
class LbmConfig:
    tau: float = 1.0
    rho_in: float = 1.001
    rho_out: float = 0.999
    axis: int = 0
    max_steps: int = 20000
    tol: float = 1e-5
    check_interval: int = 100

    def __post_init__(self):
        if self.tau <= 0.5:
            raise ValueError("tau must be > 0.5")
        if self.rho_in <= self.rho_out:
            raise ValueError("rho_in must exceed rho_out")
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1, or 2")

    @property
    def viscosity(self) -> float:
        return (self.tau - 0.5) / 3.0

    @property
    def delta_p(self) -> float:
        return (self.rho_in - self.rho_out) / 3.0


def percolates(solid: np.ndarray, axis: int) -> bool:
    """True if one 6-connected pore cluster touches both the inlet and
    outlet faces along the flow axis."""
    pore = ~solid
    labels, _ = ndimage.label(pore, structure=ndimage.generate_binary_structure(3, 1))
    lab = np.moveaxis(labels, axis, 0)
    inlet = set(np.unique(lab[0])) - {0}
    outlet = set(np.unique(lab[-1])) - {0}
    return bool(inlet & outlet)


@njit(cache=True)
def _equilibrium(rho, ux, uy, uz, ev, w, feq):
    usq = ux * ux + uy * uy + uz * uz
    for i in range(19):
        eu = ev[i, 0] * ux + ev[i, 1] * uy + ev[i, 2] * uz
        feq[i] = w[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq)


@njit(cache=True, parallel=True)
def _collide_stream(f, f_new, solid, tau, ev, w, opp, periodic):
    # Parallel over x is race-free and bitwise thread-count independent:
    # every f_new element is written by exactly one source node, and there
    # are no cross-thread reductions.
    nx, ny, nz = solid.shape
    inv_tau = 1.0 / tau
    for x in prange(nx):
        feq = np.empty(19)
        for y in range(ny):
            for z in range(nz):
                if solid[x, y, z]:
                    continue
                rho = 0.0
                ux = uy = uz = 0.0
                for i in range(19):
                    fi = f[i, x, y, z]
                    rho += fi
                    ux += fi * ev[i, 0]
                    uy += fi * ev[i, 1]
                    uz += fi * ev[i, 2]
                ux /= rho
                uy /= rho
                uz /= rho
                _equilibrium(rho, ux, uy, uz, ev, w, feq)
                for i in range(19):
                    post = f[i, x, y, z] - inv_tau * (f[i, x, y, z] - feq[i])
                    tx = x + ev[i, 0]
                    ty = y + ev[i, 1]
                    tz = z + ev[i, 2]
                    if periodic:
                        tx %= nx
                    elif tx < 0 or tx >= nx:
                        continue  # handled by the pressure boundaries
                    ty %= ny  # transverse boundaries are periodic
                    tz %= nz
                    if solid[tx, ty, tz]:
                        f_new[opp[i], x, y, z] = post  # half-way bounce-back
                    else:
                        f_new[i, tx, ty, tz] = post


@njit(cache=True)
def _macros(f, solid, ev):
    nx, ny, nz = solid.shape
    rho = np.zeros((nx, ny, nz))
    u = np.zeros((3, nx, ny, nz))
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if solid[x, y, z]:
                    continue
                r = 0.0
                mx = my = mz = 0.0
                for i in range(19):
                    fi = f[i, x, y, z]
                    r += fi
                    mx += fi * ev[i, 0]
                    my += fi * ev[i, 1]
                    mz += fi * ev[i, 2]
                rho[x, y, z] = r
                u[0, x, y, z] = mx / r
                u[1, x, y, z] = my / r
                u[2, x, y, z] = mz / r
    return rho, u


def _pressure_boundary(f: np.ndarray, solid: np.ndarray, rho_bc: float, inlet: bool) -> None:
    """Zou-He pressure boundary on an x-face. Reconstructs the unknown
    populations from the known ones, the imposed density, and the
    tangential transverse corrections."""
    idx = 0 if inlet else -1
    fw = f[:, idx]  # (19, ny, nz)
    fluid = ~solid[idx]
    ex = VELOCITIES[:, 0]
    if inlet:
        incoming = np.where(ex > 0)[0]
        sign = 1.0
    else:
        incoming = np.where(ex < 0)[0]
        sign = -1.0
    known_rest = np.where(ex == 0)[0]
    known_in = OPPOSITE[incoming]
    ux = sign * (1.0 - (fw[known_rest].sum(axis=0) + 2.0 * fw[known_in].sum(axis=0)) / rho_bc)
    # transverse momentum corrections
    ey, ez = VELOCITIES[:, 1], VELOCITIES[:, 2]
    tang_y = np.where((ex == 0) & (ey != 0))[0]
    ny_corr = 0.5 * (fw[tang_y] * ey[tang_y, None, None]).sum(axis=0)
    tang_z = np.where((ex == 0) & (ez != 0))[0]
    nz_corr = 0.5 * (fw[tang_z] * ez[tang_z, None, None]).sum(axis=0)
    for i in incoming:
        j = OPPOSITE[i]
        coef = 1.0 / 3.0 if (ey[i] == 0 and ez[i] == 0) else 1.0 / 6.0
        val = fw[j] + VELOCITIES[i, 0] * rho_bc * ux * coef
        if ey[i] != 0:
            val = val - ey[i] * ny_corr
        if ez[i] != 0:
            val = val - ez[i] * nz_corr
        fw[i] = np.where(fluid, val, fw[i])


@dataclass
class LbmResult:
    permeability: float
    mean_velocity: float
    steps: int
    converged: bool
    porosity: float
    history: list  # (step, residual) pairs at each convergence check


def run_permeability(binary: np.ndarray, config: LbmConfig = LbmConfig()) -> LbmResult:
    """Steady-state Darcy permeability (lattice units) of a binary volume
    (1 = pore). Raises LbmError for a non-percolating medium or a diverged
    run."""
    v = np.asarray(binary)
    if v.ndim != 3:
        raise ValueError("expected a 3-d binary volume")
    pore = v.astype(bool)
    solid = ~pore
    axis = config.axis
    if axis != 0:
        solid = np.moveaxis(solid, axis, 0).copy()
    if not percolates(solid, 0):
        raise LbmError("non-percolating: no pore path connects inlet to outlet")
    solid = np.ascontiguousarray(solid)
    nx = solid.shape[0]

    # Equilibrium start on the linear pressure ramp removes most of the
    # pressure-diffusion transient.
    ramp = np.linspace(config.rho_in, config.rho_out, nx)
    f = np.empty((19,) + solid.shape)
    for i in range(19):
        f[i] = WEIGHTS[i] * ramp[:, None, None]
    f_new = f.copy()
    u_prev = None
    steps_done = config.max_steps
    converged = False
    history = []
    for step in range(1, config.max_steps + 1):
        _pressure_boundary(f, solid, config.rho_in, inlet=True)
        _pressure_boundary(f, solid, config.rho_out, inlet=False)
        _collide_stream(f, f_new, solid, config.tau, VELOCITIES, WEIGHTS, OPPOSITE, False)
        f, f_new = f_new, f
        if step % config.check_interval == 0 or step == config.max_steps:
            rho, u = _macros(f, solid, VELOCITIES)
            ux = u[0]
            if not np.isfinite(ux).all():
                raise LbmError("diverged: non-finite velocity field")
            if u_prev is not None:
                norm = np.linalg.norm(ux)
                residual = np.linalg.norm(ux - u_prev) / norm if norm > 0 else np.inf
                history.append((step, float(residual)))
                if residual < config.tol:
                    steps_done, converged = step, True
                    break
            u_prev = ux.copy()
    rho, u = _macros(f, solid, VELOCITIES)
    ux = u[0]
    u_bar = float(ux.sum() / ux.size)  # superficial velocity over all nodes
    if u_bar <= 0:
        raise LbmError("no inlet flow path: non-positive superficial velocity")
    rho_bar = float(rho[~solid].mean())
    mu = rho_bar * config.viscosity
    length = nx - 1  # distance between the pressure boundaries
    k = mu * u_bar * length / config.delta_p
    return LbmResult(
        permeability=k,
        mean_velocity=u_bar,
        steps=steps_done,
        converged=converged,
        porosity=float(pore.mean()),
        history=history,
    )


def step_periodic(f: np.ndarray, solid: np.ndarray, tau: float) -> np.ndarray:
    """One fully periodic collide-and-stream step (mass-conservation checks)."""
    f_new = f.copy()
    _collide_stream(f, f_new, np.ascontiguousarray(solid), tau, VELOCITIES, WEIGHTS, OPPOSITE, True)
    return f_new


def poiseuille_reference(height: int, total_height: int) -> float:
    """Analytical slit permeability h^3/(12 H) for a plane channel of
    aperture h inside a domain of total height H (superficial convention)."""
    return height**3 / (12.0 * total_height)
