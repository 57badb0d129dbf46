"""The coupled HJB hierarchy on tensor grids over Omega^K, K = 0..N.

Level K is a backward parabolic problem on the K-fold tensor grid whose
lateral boundary data is level K-1 at the same time node, so within a time
step the levels are solved in ascending K.  Level 0 is the closed form
G(0) + (T-t) F(0).

Scheme per level and step: the Hamiltonian sum (1/N) H^R(x^i, N D_i V) is
explicit with a monotone Lax-Friedrichs discretization per coordinate; the
K-dimensional backward-Euler diffusion is solved exactly in the tensor
sine eigenbasis (DST), which keeps the update permutation-symmetric to
roundoff and carries no splitting error.  The LF viscosity coefficient per
coordinate is theta/2 with theta = min(R, max |N D_i V| observed), which is
enough for monotonicity and keeps solves at different truncation radii
bitwise identical while the truncation is inactive.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dstn, idstn

from .errors import CFLError, MemoryGuardError
from .geometry import EmpiricalConfig, SpaceGrid, TimeGrid
from .model import (
    ModelSpec,
    feedback_batch,
    lagrangian_batch,
    truncated_hamiltonian_batch,
)

MAX_LEVELS = 4
MAX_NX = 32
DUMP_MAGIC = b"AMFC"
DUMP_VERSION = 1


@dataclass
class HierarchySolution:
    """Value tensors for every level, coupled on the boundary faces.

    levels[0] has shape (nt+1,); levels[K] has shape (nt+1, nx+2, ..., nx+2)
    with K space axes including both boundary nodes.
    """

    model: ModelSpec
    grid: SpaceGrid
    tgrid: TimeGrid
    n: int
    r: float
    levels: list = field(default_factory=list)
    grad_sup: float = 0.0     # max |N D_i V| fed to the Hamiltonian
    theta_max: float = 0.0    # largest LF viscosity coefficient used


def monotone_cfl_nt(tgrid: TimeGrid, grid: SpaceGrid, r: float, n: int) -> int:
    horizon = tgrid.t_final - tgrid.t0
    return max(tgrid.nt, int(math.ceil(horizon * 2.0 * r * n / grid.dx)))


def _interior_slices(k: int):
    return (slice(1, -1),) * k


def _empirical_tensor(model: ModelSpec, grid: SpaceGrid, k: int, n: int, which: str):
    """F or G evaluated on every interior node of Omega^k, as a k-tensor."""
    xi = grid.interior
    mesh = np.meshgrid(*([xi] * k), indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    alive = np.ones(points.shape, dtype=bool)
    batch = model.run_cost_batch if which == "run" else model.term_cost_batch
    if batch is not None:
        vals = np.asarray(batch(points, alive, n), dtype=float)
    else:
        fn = model.run_cost if which == "run" else model.term_cost
        vals = np.array([fn(EmpiricalConfig(n, row)) for row in points])
    return vals.reshape((grid.nx,) * k)


def _dst_denominator(grid: SpaceGrid, dt: float, k: int) -> np.ndarray:
    """Eigenvalues of I - dt * sum_i Lap_i on the interior tensor block."""
    nx, dx = grid.nx, grid.dx
    lam = (2.0 - 2.0 * np.cos(np.arange(1, nx + 1) * np.pi / (nx + 1))) / dx**2
    denom = np.zeros((nx,) * k)
    for axis in range(k):
        shape = [1] * k
        shape[axis] = nx
        denom = denom + dt * lam.reshape(shape)
    return 1.0 + denom


def _fill_faces(full: np.ndarray, lower_full, k: int) -> None:
    """Impose the inter-level boundary condition on every face of a k-tensor."""
    for axis in range(k):
        idx0 = [slice(None)] * k
        idx0[axis] = 0
        idx1 = [slice(None)] * k
        idx1[axis] = -1
        full[tuple(idx0)] = lower_full
        full[tuple(idx1)] = lower_full


def solve_hierarchy(
    n: int,
    model: ModelSpec,
    grid: SpaceGrid,
    tgrid: TimeGrid,
    r: float,
    max_bytes: int = 2**31,
) -> HierarchySolution:
    """Backward time-marching of all levels K = 0..n at once."""
    if not 1 <= n <= MAX_LEVELS:
        raise ValueError(f"n={n} outside the supported range 1..{MAX_LEVELS}")
    if n >= 2 and grid.nx > MAX_NX:
        raise MemoryGuardError(
            f"nx={grid.nx} exceeds the tensor guard {MAX_NX} for n={n}"
        )
    if r < 1.0:
        raise ValueError(f"truncation radius must be >= 1, got {r}")
    total = sum((tgrid.nt + 1) * (grid.nx + 2) ** k * 8 for k in range(1, n + 1))
    if total > max_bytes:
        raise MemoryGuardError(
            f"hierarchy storage {total / 1e9:.2f} GB exceeds {max_bytes / 1e9:.2f} GB"
        )
    if tgrid.dt > grid.dx / (2.0 * r * n) * (1 + 1e-12):
        raise CFLError(
            f"dt={tgrid.dt:.3e} violates the monotonicity bound dx/(2 R K)="
            f"{grid.dx / (2 * r * n):.3e} at K={n}; use nt >= "
            f"{monotone_cfl_nt(tgrid, grid, r, n)}",
            suggested_nt=monotone_cfl_nt(tgrid, grid, r, n),
        )

    nx, dx, dt, nt = grid.nx, grid.dx, tgrid.dt, tgrid.nt
    xi = grid.interior
    f_zero = float(model.run_cost(EmpiricalConfig.empty(n)))
    g_zero = float(model.term_cost(EmpiricalConfig.empty(n)))

    sol = HierarchySolution(model, grid, tgrid, n, float(r))
    v0 = g_zero + (tgrid.t_final - tgrid.nodes) * f_zero
    sol.levels.append(v0)

    f_tensors = {k: _empirical_tensor(model, grid, k, n, "run") for k in range(1, n + 1)}
    g_tensors = {k: _empirical_tensor(model, grid, k, n, "term") for k in range(1, n + 1)}
    denoms = {k: _dst_denominator(grid, dt, k) for k in range(1, n + 1)}

    for k_level in range(1, n + 1):
        arr = np.zeros((nt + 1,) + (nx + 2,) * k_level)
        arr[-1][_interior_slices(k_level)] = g_tensors[k_level]
        _fill_faces(arr[-1], sol.levels[k_level - 1][-1], k_level)
        sol.levels.append(arr)

    grad_sup = 0.0
    theta_max = 0.0
    for step in range(nt - 1, -1, -1):
        for k_level in range(1, n + 1):
            vnext = sol.levels[k_level][step + 1]
            interior = _interior_slices(k_level)
            ham = np.zeros((nx,) * k_level)
            for axis in range(k_level):
                sl_c = list(interior)
                sl_p = list(interior)
                sl_m = list(interior)
                sl_p[axis] = slice(2, None)
                sl_m[axis] = slice(0, -2)
                vc = vnext[tuple(sl_c)]
                vp = vnext[tuple(sl_p)]
                vm = vnext[tuple(sl_m)]
                q = n * (vp - vm) / (2.0 * dx)
                qmax = float(np.abs(q).max()) if q.size else 0.0
                grad_sup = max(grad_sup, qmax)
                theta = min(float(r), qmax)
                theta_max = max(theta_max, theta)
                shape = [1] * k_level
                shape[axis] = nx
                xb = xi.reshape(shape)
                ham += truncated_hamiltonian_batch(model, xb, q, r) / n
                ham -= 0.5 * theta * (vp - 2.0 * vc + vm) / dx

            rhs = vnext[interior] + dt * (f_tensors[k_level] - ham)
            lower_full = sol.levels[k_level - 1][step]
            lower_int = (
                lower_full[_interior_slices(k_level - 1)]
                if k_level > 1
                else float(lower_full)
            )
            scale = dt / dx**2
            for axis in range(k_level):
                edge0 = [slice(None)] * k_level
                edge0[axis] = 0
                edge1 = [slice(None)] * k_level
                edge1[axis] = -1
                rhs[tuple(edge0)] += scale * lower_int
                rhs[tuple(edge1)] += scale * lower_int

            axes = tuple(range(k_level))
            spec = dstn(rhs, type=1, axes=axes)
            sol_int = idstn(spec / denoms[k_level], type=1, axes=axes)

            full = sol.levels[k_level][step]
            full[interior] = sol_int
            _fill_faces(full, lower_full, k_level)

    sol.grad_sup = grad_sup
    sol.theta_max = theta_max
    return sol


def eval_value(sol: HierarchySolution, k: int, t: float, x) -> float:
    """Multilinear interpolation in space, linear in time.

    Boundary coordinates need no special casing: the stored face slices are
    the lower-level tensors, so interpolation at x^i = 0 or 1 is exactly the
    reduced-level evaluation.
    """
    if not 0 <= k <= sol.n:
        raise ValueError(f"level {k} outside 0..{sol.n}")
    tg = sol.tgrid
    if t < tg.t0 - 1e-12 or t > tg.t_final + 1e-12:
        raise ValueError(f"time {t} outside [{tg.t0}, {tg.t_final}]")
    s = (min(max(t, tg.t0), tg.t_final) - tg.t0) / tg.dt
    j = min(int(s), tg.nt - 1)
    wt = s - j

    if k == 0:
        return float((1 - wt) * sol.levels[0][j] + wt * sol.levels[0][j + 1])

    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (k,):
        raise ValueError(f"point has shape {x.shape}, expected ({k},)")
    if x.min() < -1e-12 or x.max() > 1 + 1e-12:
        raise ValueError("point outside the closed domain")

    arr = (1 - wt) * sol.levels[k][j] + wt * sol.levels[k][j + 1]
    dx = sol.grid.dx
    for coord in x:
        s = min(max(coord, 0.0), 1.0) / dx
        i = min(int(s), sol.grid.nx)
        w = s - i
        arr = (1 - w) * arr[i] + w * arr[i + 1]
    return float(arr)


def level_gradient(sol: HierarchySolution, k: int, axis: int) -> np.ndarray:
    """D_{x^axis} of level k per time node: centered interior, one-sided at faces."""
    return np.gradient(sol.levels[k], sol.grid.dx, axis=1 + axis, edge_order=1)


def check_crude_bound(sol: HierarchySolution) -> float:
    """max of N |V^{N,K} - V^{N,K-1}(dropped coordinate)| over everything."""
    worst = 0.0
    for k in range(1, sol.n + 1):
        upper = sol.levels[k]
        lower = sol.levels[k - 1]
        for axis in range(k):
            for step in range(sol.tgrid.nt + 1):
                if k > 1:
                    diff = upper[step] - np.expand_dims(lower[step], axis)
                else:
                    diff = upper[step] - float(lower[step])
                worst = max(worst, float(np.abs(diff).max()))
    return sol.n * worst


def check_gradient_scaling(sol: HierarchySolution) -> float:
    """max of N |D_{x^i} V^{N,K}| over levels, times, nodes, coordinates."""
    worst = 0.0
    for k in range(1, sol.n + 1):
        for axis in range(k):
            g = np.gradient(sol.levels[k], sol.grid.dx, axis=1 + axis, edge_order=1)
            worst = max(worst, float(np.abs(g).max()))
    return sol.n * worst


# ---------------------------------------------------------------------------
# Monte Carlo oracle for the particle problem
# ---------------------------------------------------------------------------

def _interp_axis_tensors(tensors, pts, grid: SpaceGrid) -> np.ndarray:
    """Evaluate per-axis k-tensors at a batch of points in Omega^k.

    tensors: list of k arrays of shape (nx+2,)*k (one per axis);
    pts: (rows, k).  Returns (rows, k): tensor[axis] interpolated at pts.
    """
    rows, k = pts.shape
    dx = grid.dx
    s = np.clip(pts, 0.0, 1.0) / dx
    base = np.minimum(s.astype(int), grid.nx)
    w = s - base
    shape = (grid.nx + 2,) * k
    out = np.zeros((rows, k))
    for bits in range(2 ** k):
        offs = np.array([(bits >> a) & 1 for a in range(k)])
        weight = np.prod(np.where(offs, w, 1.0 - w), axis=1)
        flat = np.ravel_multi_index(tuple((base + offs).T), shape)
        for axis in range(k):
            out[:, axis] += weight * tensors[axis].ravel()[flat]
    return out


def monte_carlo_value(
    n: int,
    model: ModelSpec,
    sol: HierarchySolution,
    t0: float,
    x0,
    nsim: int,
    seed: int,
    bridge: bool = False,
    dt_factor: int = 4,
    batch_size: int = 4096,
):
    """Euler-Maruyama estimate of the N-particle value under the solved feedback.

    Controls are alpha^i = clamp(-D_p H(x^i, N D_i V^{N,K}), R) with K the
    current number of alive particles, gradients read from the solved
    tensors by interpolation.  A particle is frozen the first step it exits
    [0,1] (optional Brownian-bridge crossing correction via ``bridge``).
    Per-trajectory Philox streams keyed by (seed, index) make the estimate
    independent of batch size and run order.
    """
    if nsim < 100:
        raise ValueError(f"nsim={nsim} gives no statistical power; use >= 100")
    tg = sol.tgrid
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (n,):
        raise ValueError(f"start point has shape {x0.shape}, expected ({n},)")
    j0 = (t0 - tg.t0) / tg.dt
    if abs(j0 - round(j0)) > 1e-9:
        raise ValueError("t0 must lie on the solver time grid")
    j0 = int(round(j0))

    dt_mc = tg.dt / dt_factor
    nsteps = (tg.nt - j0) * dt_factor
    sqrt_step = math.sqrt(2.0 * dt_mc)
    r = sol.r

    # per-level gradient tensors, one per axis
    grads = {
        k: [level_gradient(sol, k, a) for a in range(k)] for k in range(1, n + 1)
    }

    def drift(t: float, pos: np.ndarray, alive: np.ndarray) -> np.ndarray:
        """Clamped optimal feedback for every alive particle."""
        s = (t - tg.t0) / tg.dt
        j = min(int(s), tg.nt - 1)
        wt = s - j
        out = np.zeros_like(pos)
        counts = alive.sum(axis=1)
        for k in range(1, n + 1):
            rows = np.flatnonzero(counts == k)
            if rows.size == 0:
                continue
            sub_alive = alive[rows]
            pts = pos[rows][sub_alive].reshape(rows.size, k)
            tensors = [
                (1 - wt) * grads[k][a][j] + wt * grads[k][a][j + 1] for a in range(k)
            ]
            q = n * _interp_axis_tensors(tensors, pts, sol.grid)
            a_ctrl = np.clip(feedback_batch(model, pts, q), -r, r)
            block = out[rows]
            block[sub_alive] = a_ctrl.ravel()
            out[rows] = block
        return out

    all_costs = np.zeros(nsim)
    done = 0
    while done < nsim:
        b = min(batch_size, nsim - done)
        noise = np.empty((b, nsteps, n))
        unif = np.empty((b, nsteps, n)) if bridge else None
        for i in range(b):
            gen = np.random.Generator(
                np.random.Philox(key=np.array([seed, done + i], dtype=np.uint64))
            )
            noise[i] = gen.standard_normal((nsteps, n))
            if bridge:
                unif[i] = gen.random((nsteps, n))

        pos = np.tile(x0, (b, 1))
        alive = (pos > 0.0) & (pos < 1.0)
        cost = np.zeros(b)
        for s_idx in range(nsteps):
            t = t0 + s_idx * dt_mc
            ctrl = drift(t, pos, alive)
            lagr = np.where(alive, lagrangian_batch(model, pos, ctrl), 0.0)
            rate = lagr.sum(axis=1) / n
            if model.run_cost_batch is not None:
                rate = rate + model.run_cost_batch(pos, alive, n)
            else:
                rate = rate + np.array(
                    [model.run_cost(EmpiricalConfig(n, row[al]))
                     for row, al in zip(pos, alive)]
                )
            cost += dt_mc * rate

            prev = pos.copy()
            stepped = pos + alive * (ctrl * dt_mc + sqrt_step * noise[:, s_idx])
            exited_low = alive & (stepped <= 0.0)
            exited_high = alive & (stepped >= 1.0)
            stepped[exited_low] = 0.0
            stepped[exited_high] = 1.0
            newly_dead = exited_low | exited_high
            if bridge:
                inside = alive & ~newly_dead
                with np.errstate(under="ignore"):
                    p0 = np.exp(-prev * stepped / dt_mc)
                    p1 = np.exp(-(1 - prev) * (1 - stepped) / dt_mc)
                u = unif[:, s_idx]
                hit0 = inside & (u < p0)
                hit1 = inside & ~hit0 & (u < p0 + p1)
                stepped[hit0] = 0.0
                stepped[hit1] = 1.0
                newly_dead = newly_dead | hit0 | hit1
            alive = alive & ~newly_dead
            pos = stepped

        if model.term_cost_batch is not None:
            cost += model.term_cost_batch(pos, alive, n)
        else:
            cost += np.array(
                [model.term_cost(EmpiricalConfig(n, row[al]))
                 for row, al in zip(pos, alive)]
            )
        all_costs[done:done + b] = cost
        done += b

    # single reduction over the trajectory-ordered array keeps the estimate
    # independent of the batch partition
    mean = float(np.sum(all_costs) / nsim)
    var = max(float(np.sum((all_costs - mean) ** 2)) / nsim, 0.0)
    stderr = math.sqrt(var / nsim)
    return mean, stderr


# ---------------------------------------------------------------------------
# binary tensor dump
# ---------------------------------------------------------------------------

def write_level_dump(path, sol: HierarchySolution, k: int) -> None:
    """Header {magic 'AMFC', version, N, K, nx, nt as u32 LE} + row-major f64."""
    arr = np.ascontiguousarray(sol.levels[k], dtype="<f8")
    header = struct.pack(
        "<4s5I", DUMP_MAGIC, DUMP_VERSION, sol.n, k, sol.grid.nx, sol.tgrid.nt
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_level_dump(path):
    """Inverse of write_level_dump: returns (meta dict, tensor)."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4s5I"))
        magic, version, n, k, nx, nt = struct.unpack("<4s5I", head)
        if magic != DUMP_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != DUMP_VERSION:
            raise ValueError(f"unsupported dump version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    shape = (nt + 1,) + (nx + 2,) * k if k else (nt + 1,)
    meta = {"version": version, "n": n, "k": k, "nx": nx, "nt": nt}
    return meta, data.reshape(shape)
