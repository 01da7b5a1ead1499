"""Large deformation diffeomorphic metric mapping between two volumes.

Velocity fields are arrays of shape ``(T, 3, nx, ny, nz)`` in mm per unit
flow time, sampled at ``T`` equally spaced times on [0, 1].  Maps are stored
as absolute coordinate fields in mm, shape ``(T, 3, nx, ny, nz)``, with voxel
``i`` located at ``i * spacing``.

The smoothing operator is ``L = (-alpha * Lap + gamma)^a`` with the 7-point
Laplacian on a periodic grid, so ``L^dag L`` and its inverse ``K`` are
diagonal in the discrete Fourier basis.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, InvalidParameter, NoDescent, NumericalError
from .volume import Volume3D

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LddmmParams:
    alpha: float = 0.01
    gamma: float = 1.0
    exponent: float = 2.0
    sigma: float = 1.0
    timesteps: int = 10
    step_size: float = 0.1
    max_iters: int = 200
    energy_tol: float = 1e-6

    def __post_init__(self):
        for name in ("alpha", "gamma", "sigma", "step_size"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive")
        if not self.exponent > 1.5:
            raise InvalidParameter("exponent must exceed 1.5 for diffeomorphic flows in 3D")
        if int(self.timesteps) != self.timesteps or self.timesteps < 2:
            raise InvalidParameter("timesteps must be an integer >= 2")
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise InvalidParameter("max_iters must be a non-negative integer")
        if not self.energy_tol >= 0:
            raise InvalidParameter("energy_tol must be non-negative")

    @property
    def dt(self) -> float:
        return 1.0 / (self.timesteps - 1)

    def time_weights(self) -> np.ndarray:
        """Trapezoid weights over the velocity time samples."""
        w = np.full(self.timesteps, self.dt)
        w[[0, -1]] *= 0.5
        return w

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiffeoFlow:
    """Maps sampled at each time ``t_k``.

    ``to_source[k]`` is phi_{t_k,0} (pulls time-``t_k`` coordinates back to the
    template frame) and ``to_target[k]`` is phi_{t_k,1}.
    """

    to_source: np.ndarray
    to_target: np.ndarray
    spacing: tuple

    @property
    def inverse(self) -> np.ndarray:
        """phi_1^{-1}, the map used to warp the template onto the target."""
        return self.to_source[-1]

    @property
    def forward(self) -> np.ndarray:
        """phi_1 = phi_{0,1}."""
        return self.to_target[0]


@dataclass
class RegistrationResult:
    velocity: np.ndarray
    flow: DiffeoFlow
    energy_trace: List[Tuple[int, float, float]]
    metric_distance: float
    params: LddmmParams
    converged: bool = False
    status: str = ""
    warped: Optional[np.ndarray] = field(default=None, repr=False)


# --- spectral operator -----------------------------------------------------

@lru_cache(maxsize=16)
def _symbol(dims: tuple, spacing: tuple, alpha: float, gamma: float) -> np.ndarray:
    m = np.full(dims, gamma, dtype=np.float64)
    for axis, (n, h) in enumerate(zip(dims, spacing)):
        w = 2.0 * np.pi * np.arange(n) / n
        lap = (2.0 - 2.0 * np.cos(w)) / h**2
        shape = [1, 1, 1]
        shape[axis] = n
        m = m + alpha * lap.reshape(shape)
    m.flags.writeable = False
    return m


def operator_symbol(dims, spacing, params: LddmmParams) -> np.ndarray:
    """Fourier multiplier m(omega) of ``-alpha * Lap + gamma``."""
    return _symbol(tuple(int(d) for d in dims), tuple(float(s) for s in spacing),
                   float(params.alpha), float(params.gamma))


def _apply_multiplier(f: np.ndarray, mult: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(f)):
        raise NumericalError("non-finite values in vector field")
    spec = np.fft.fftn(f, axes=(-3, -2, -1))
    return np.fft.ifftn(spec * mult, axes=(-3, -2, -1)).real


def apply_K(f: np.ndarray, params: LddmmParams, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Apply K = (L^dag L)^{-1} to a field of shape (..., nx, ny, nz)."""
    m = operator_symbol(f.shape[-3:], spacing, params)
    return _apply_multiplier(f, m ** (-2.0 * params.exponent))


def apply_LdagL(f: np.ndarray, params: LddmmParams, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    m = operator_symbol(f.shape[-3:], spacing, params)
    return _apply_multiplier(f, m ** (2.0 * params.exponent))


def v_inner(a: np.ndarray, b: np.ndarray, params: LddmmParams, spacing=(1.0, 1.0, 1.0)) -> float:
    """<a, b>_V = <L a, L b>_{L2} for fields of shape (3, nx, ny, nz)."""
    dims = a.shape[-3:]
    m2a = operator_symbol(dims, spacing, params) ** (2.0 * params.exponent)
    fa = np.fft.fftn(a, axes=(-3, -2, -1))
    fb = np.fft.fftn(b, axes=(-3, -2, -1))
    n = float(np.prod(dims))
    return float(np.sum(m2a * (fa * np.conj(fb)).real) / n * np.prod(spacing))


def v_norm(f: np.ndarray, params: LddmmParams, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.sqrt(max(v_inner(f, f, params, spacing), 0.0)))


def metric_distance(v: np.ndarray, params: LddmmParams, spacing=(1.0, 1.0, 1.0)) -> float:
    """Trapezoidal quadrature over time of ||v_t||_V."""
    if v.shape[0] != params.timesteps:
        raise DimensionMismatch(f"velocity has {v.shape[0]} timesteps, params say {params.timesteps}")
    norms = np.array([v_norm(v[k], params, spacing) for k in range(v.shape[0])])
    return float(np.dot(params.time_weights(), norms))


# --- flows -----------------------------------------------------------------

def identity_grid(dims, spacing) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) * h for n, h in zip(dims, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _index_coords(points: np.ndarray, spacing) -> np.ndarray:
    return points / np.asarray(spacing, dtype=np.float64).reshape(3, 1, 1, 1)


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    t2 = t * t
    t3 = t2 * t
    return np.stack([
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ])


def sample_scalar(img: np.ndarray, points: np.ndarray, spacing) -> np.ndarray:
    """Catmull-Rom sample of a scalar image at mm coordinates.

    Neighbour indices are clipped to the grid (edge replication).  The
    interpolant is C1 and its derivative at a node equals the central
    difference of the samples, which keeps image gradients taken by central
    differences consistent with the sampled cost.
    """
    coords = _index_coords(points, spacing)
    base = np.floor(coords)
    frac = coords - base
    base = base.astype(np.intp)
    nx, ny, nz = img.shape
    flat = np.ascontiguousarray(img, dtype=np.float64).ravel()
    wx, wy, wz = (_catmull_rom_weights(frac[a]) for a in range(3))
    ix = [np.clip(base[0] + o, 0, nx - 1) * (ny * nz) for o in (-1, 0, 1, 2)]
    iy = [np.clip(base[1] + o, 0, ny - 1) * nz for o in (-1, 0, 1, 2)]
    iz = [np.clip(base[2] + o, 0, nz - 1) for o in (-1, 0, 1, 2)]
    out = np.zeros(points.shape[1:])
    for a in range(4):
        plane = np.zeros(points.shape[1:])
        for b in range(4):
            row_idx = ix[a] + iy[b]
            line = np.zeros(points.shape[1:])
            for c in range(4):
                line += wz[c] * flat.take(row_idx + iz[c])
            plane += wy[b] * line
        out += wx[a] * plane
    return out


def sample_vector(f: np.ndarray, points: np.ndarray, spacing) -> np.ndarray:
    coords = _index_coords(points, spacing)
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in f])


def compose(phi: np.ndarray, psi: np.ndarray, spacing) -> np.ndarray:
    """(phi o psi)(x) = phi(psi(x)), sampling phi's displacement so out-of-grid
    points are translated rather than pinned."""
    ident = identity_grid(phi.shape[-3:], spacing)
    return psi + sample_vector(phi - ident, psi, spacing)


def integrate_flow(v: np.ndarray, params: LddmmParams, spacing=(1.0, 1.0, 1.0)) -> DiffeoFlow:
    """Semi-Lagrangian integration of phi_dot = v_t(phi).

    Each step from t_k to t_{k+1} advects with the average of v_k and v_{k+1}.
    """
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite velocity")
    T = v.shape[0]
    if T != params.timesteps:
        raise DimensionMismatch(f"velocity has {T} timesteps, params say {params.timesteps}")
    dims = v.shape[-3:]
    dt = params.dt
    ident = identity_grid(dims, spacing)
    to_source = np.empty_like(v)
    to_target = np.empty_like(v)
    to_source[0] = ident
    to_target[-1] = ident
    for k in range(T - 1):
        u = 0.5 * (v[k] + v[k + 1])
        y = ident - dt * u
        to_source[k + 1] = y + sample_vector(to_source[k] - ident, y, spacing)
    for k in range(T - 2, -1, -1):
        u = 0.5 * (v[k] + v[k + 1])
        y = ident + dt * u
        to_target[k] = y + sample_vector(to_target[k + 1] - ident, y, spacing)
    if not (np.all(np.isfinite(to_source)) and np.all(np.isfinite(to_target))):
        raise NumericalError("flow integration produced non-finite coordinates")
    return DiffeoFlow(to_source, to_target, tuple(spacing))


def central_gradient(img: np.ndarray, spacing) -> np.ndarray:
    """Central differences with edge replication, matching the clamped
    boundary used when sampling images."""
    padded = np.pad(img, 1, mode="edge")
    core = (slice(1, -1),) * 3
    out = []
    for axis, h in enumerate(spacing):
        hi = list(core)
        lo = list(core)
        hi[axis] = slice(2, None)
        lo[axis] = slice(None, -2)
        out.append((padded[tuple(hi)] - padded[tuple(lo)]) / (2.0 * h))
    return np.stack(out)


def jacobian_determinant(phi: np.ndarray, spacing) -> np.ndarray:
    """Central-difference Jacobian determinant of a coordinate map (3, nx, ny, nz)."""
    jac = np.empty((3, 3) + phi.shape[1:])
    for i in range(3):
        grads = np.gradient(phi[i], *spacing)
        for j in range(3):
            jac[i, j] = grads[j]
    return (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )


# --- energy and gradient ---------------------------------------------------

def _check_pair(I0: Volume3D, I1: Volume3D):
    if I0.dims != I1.dims:
        raise DimensionMismatch(f"template dims {I0.dims} != target dims {I1.dims}")
    if not np.allclose(I0.spacing, I1.spacing, rtol=1e-9, atol=0):
        raise DimensionMismatch(f"template spacing {I0.spacing} != target spacing {I1.spacing}")
    if not (np.all(np.isfinite(I0.data)) and np.all(np.isfinite(I1.data))):
        raise NumericalError("non-finite voxel values")


def energy_terms(v: np.ndarray, I0: Volume3D, I1: Volume3D, params: LddmmParams,
                 flow: Optional[DiffeoFlow] = None) -> Tuple[float, float]:
    """Return (matching, regularisation) for the discrete cost."""
    spacing = I0.spacing
    if flow is None:
        flow = integrate_flow(v, params, spacing)
    warped = sample_scalar(I0.data.astype(np.float64), flow.inverse, spacing)
    resid = warped - I1.data.astype(np.float64)
    matching = float(np.sum(resid**2) * I0.voxel_volume / params.sigma**2)
    w = params.time_weights()
    reg = float(sum(w[k] * v_inner(v[k], v[k], params, spacing) for k in range(v.shape[0])))
    return matching, reg


def energy(v, I0, I1, params, flow=None) -> float:
    return sum(energy_terms(v, I0, I1, params, flow))


def gradient(v: np.ndarray, I0: Volume3D, I1: Volume3D, flow: DiffeoFlow,
             params: LddmmParams) -> np.ndarray:
    """V-gradient of the cost at every time sample:
    2 v_t - K((2 / sigma^2) |D phi_{t,1}| grad(J0_t) (J0_t - J1_t))."""
    _check_pair(I0, I1)
    if v.shape[-3:] != I0.dims:
        raise DimensionMismatch(f"velocity grid {v.shape[-3:]} != image grid {I0.dims}")
    spacing = I0.spacing
    img0 = I0.data.astype(np.float64)
    img1 = I1.data.astype(np.float64)
    scale = 2.0 / params.sigma**2
    out = np.empty_like(v)
    for k in range(v.shape[0]):
        j0 = sample_scalar(img0, flow.to_source[k], spacing)
        j1 = sample_scalar(img1, flow.to_target[k], spacing)
        det = jacobian_determinant(flow.to_target[k], spacing)
        grad_j0 = central_gradient(j0, spacing)
        body = scale * det * (j0 - j1) * grad_j0
        out[k] = 2.0 * v[k] - apply_K(body, params, spacing)
    return out


def dice(a: np.ndarray, b: np.ndarray, level: float = 0.5) -> float:
    """Dice overlap of the super-level sets {a > level} and {b > level}."""
    ma = np.asarray(a) > level
    mb = np.asarray(b) > level
    denom = ma.sum() + mb.sum()
    return 1.0 if denom == 0 else float(2.0 * np.logical_and(ma, mb).sum() / denom)


def register(I0: Volume3D, I1: Volume3D, params: LddmmParams = LddmmParams()) -> RegistrationResult:
    """Gradient descent with step halving on the inexact-matching cost.

    Starts from zero velocity, so identical inputs give identical results.
    """
    _check_pair(I0, I1)
    spacing = I0.spacing
    T = params.timesteps
    v = np.zeros((T, 3) + I0.dims)
    flow = integrate_flow(v, params, spacing)
    match, reg = energy_terms(v, I0, I1, params, flow)
    e_cur = match + reg
    trace = [(0, match, reg)]
    step = params.step_size
    converged = False
    status = "max_iters"
    for it in range(1, params.max_iters + 1):
        g = gradient(v, I0, I1, flow, params)
        while True:
            v_try = v - step * g
            flow_try = integrate_flow(v_try, params, spacing)
            m_try, r_try = energy_terms(v_try, I0, I1, params, flow_try)
            if m_try + r_try <= e_cur:
                break
            step *= 0.5
            if step < 1e-12:
                if it == 1:
                    raise NoDescent("no descent direction from the initial velocity")
                status = "stalled"
                break
        if status == "stalled":
            break
        e_new = m_try + r_try
        rel = (e_cur - e_new) / max(abs(e_cur), np.finfo(float).tiny)
        v, flow, e_cur = v_try, flow_try, e_new
        trace.append((it, m_try, r_try))
        log.debug("iter %d energy %.6g (match %.6g reg %.6g) step %.3g", it, e_new, m_try, r_try, step)
        if rel < params.energy_tol:
            converged = True
            status = "converged"
            break
    warped = sample_scalar(I0.data.astype(np.float64), flow.inverse, spacing)
    return RegistrationResult(
        velocity=v,
        flow=flow,
        energy_trace=trace,
        metric_distance=metric_distance(v, params, spacing),
        params=params,
        converged=converged,
        status=status,
        warped=warped,
    )
