"""Sparse robust nonlinear least-squares solver (Levenberg-Marquardt).

Parameter blocks are poses (6-DoF local: right-multiplicative rotation,
additive translation) or plain vectors. Residuals are added in homogeneous
groups so the hot paths (reprojection) can evaluate vectorized. Blocks marked
`eliminated` (landmarks) are removed from the normal equations through a
Schur complement before the reduced system is factored.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .lie import Pose, so3_exp


def cauchy_loss(squared_residual: float, scale: float) -> float:
    """IRLS reweighting factor rho'(s) = 1 / (1 + s / a^2)."""
    return 1.0 / (1.0 + squared_residual / (scale * scale))


def cauchy_rho(squared_residual, scale):
    """Robustified cost rho(s) = a^2 log(1 + s / a^2)."""
    a2 = scale * scale
    return a2 * np.log1p(np.asarray(squared_residual) / a2)


@dataclass
class SolverConfig:
    max_iters: int = 50
    gradient_tol: float = 1e-8
    rel_cost_tol: float = 1e-8
    initial_damping: float = 1e-4
    damping_limit: float = 1e12
    cost_floor: float = 1e-16  # absolute cost below which the problem is solved


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    wall_time: float


class ResidualGroup:
    """A batch of structurally identical residuals.

    Subclasses provide `keys` (one tuple of parameter-block keys per
    residual), a residual dimension `dim`, an information stack of shape
    (n, dim, dim), an optional ("cauchy", scale) loss, and `evaluate`.
    """

    keys: list[tuple]
    dim: int
    loss: tuple | None = None

    def information(self) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, values: dict, with_jacobians: bool):
        """Returns (residuals (n, dim), jacobians or None).

        Jacobians are a list aligned with the key-tuple positions, each of
        shape (n, dim, local_dim_of_position).
        """
        raise NotImplementedError

    def __len__(self):
        return len(self.keys)


@dataclass
class _Block:
    kind: str  # "pose" | "vec"
    value: object
    constant: bool = False
    eliminated: bool = False

    @property
    def local_dim(self) -> int:
        return 6 if self.kind == "pose" else len(self.value)


class Problem:
    """Parameter blocks plus residual groups; consumed by solve()."""

    def __init__(self):
        self.blocks: dict = {}
        self.groups: list[ResidualGroup] = []

    def add_pose_block(self, key, pose: Pose, constant=False):
        self.blocks[key] = _Block("pose", pose.copy(), constant=constant)

    def add_vector_block(self, key, value, constant=False, eliminated=False):
        self.blocks[key] = _Block(
            "vec", np.array(value, dtype=float), constant=constant, eliminated=eliminated
        )

    def set_constant(self, key):
        self.blocks[key].constant = True

    def add_group(self, group: ResidualGroup):
        for keys in group.keys:
            for k in keys:
                if k not in self.blocks:
                    raise KeyError(f"residual references unknown parameter block {k!r}")
        self.groups.append(group)

    def values(self) -> dict:
        return {k: b.value for k, b in self.blocks.items()}

    def value(self, key):
        return self.blocks[key].value

    def num_free_blocks(self) -> int:
        return sum(1 for b in self.blocks.values() if not b.constant)


def _robust_weights(group, res):
    """Per-residual cost rho(s) and IRLS weight, given stacked residuals."""
    W = group.information()
    s = np.einsum("ni,nij,nj->n", res, W, res)
    if group.loss is None:
        return s, np.ones(len(s))
    kind, scale = group.loss
    if kind != "cauchy":
        raise ValueError(f"unknown loss {kind}")
    return cauchy_rho(s, scale), 1.0 / (1.0 + s / (scale * scale))


def _total_cost(problem, values) -> float:
    total = 0.0
    for g in problem.groups:
        res, _ = g.evaluate(values, with_jacobians=False)
        rho, _ = _robust_weights(g, res)
        total += float(rho.sum())
    return total


def _apply_step(problem, values, offsets, delta_p, lm_index, delta_l):
    new_values = dict(values)
    for key, blk in problem.blocks.items():
        if blk.constant:
            continue
        if blk.eliminated:
            d = delta_l[lm_index[key]]
        else:
            off = offsets[key]
            d = delta_p[off : off + blk.local_dim]
        if blk.kind == "pose":
            old = values[key]
            new_values[key] = Pose(old.R @ so3_exp(d[:3]), old.t + d[3:6]).renormalized()
        else:
            new_values[key] = values[key] + d
    return new_values


class _NormalEquations:
    """Dense primary H plus block-diagonal eliminated part and coupling triplets."""

    def __init__(self, n_p, lm_count):
        self.H = np.zeros((n_p, n_p))
        self.g = np.zeros(n_p)
        self.Hll = np.zeros((lm_count, 3, 3))
        self.gl = np.zeros((lm_count, 3))
        self.pl_rows: list[np.ndarray] = []
        self.pl_cols: list[np.ndarray] = []
        self.pl_data: list[np.ndarray] = []
        self.n_p = n_p
        self.lm_count = lm_count


def _assemble(problem, values, offsets, lm_index):
    n_p = sum(
        b.local_dim for b in problem.blocks.values() if not b.constant and not b.eliminated
    )
    eq = _NormalEquations(n_p, len(lm_index))
    cost = 0.0

    for g in problem.groups:
        res, jacs = g.evaluate(values, with_jacobians=True)
        W = g.information()
        rho, w = _robust_weights(g, res)
        cost += float(rho.sum())
        Weff = W * w[:, None, None]
        n = len(res)
        positions = len(g.keys[0])

        # per-position offsets: >=0 primary offset, -1 constant, -2 eliminated
        offs = np.empty((positions, n), dtype=np.int64)
        lm_ids = np.full((positions, n), -1, dtype=np.int64)
        for p in range(positions):
            for i, keys in enumerate(g.keys):
                blk = problem.blocks[keys[p]]
                if blk.constant:
                    offs[p, i] = -1
                elif blk.eliminated:
                    offs[p, i] = -2
                    lm_ids[p, i] = lm_index[keys[p]]
                else:
                    offs[p, i] = offsets[keys[p]]

        JtW = [np.einsum("nri,nrs->nis", jacs[p], Weff) for p in range(positions)]

        for a in range(positions):
            da = jacs[a].shape[2]
            grad_a = np.einsum("nir,nr->ni", JtW[a], res)
            mask_free = offs[a] >= 0
            mask_elim = offs[a] == -2
            if mask_free.any():
                rows = offs[a][mask_free, None] + np.arange(da)[None, :]
                np.add.at(eq.g, rows.ravel(), grad_a[mask_free].ravel())
            if mask_elim.any():
                np.add.at(eq.gl, lm_ids[a][mask_elim], grad_a[mask_elim])

            for b in range(positions):
                db = jacs[b].shape[2]
                blocks = JtW[a] @ jacs[b]  # (n, da, db)
                free_free = mask_free & (offs[b] >= 0)
                if free_free.any():
                    rows = (
                        offs[a][free_free, None, None]
                        + np.arange(da)[None, :, None]
                        + np.zeros((1, 1, db), dtype=np.int64)
                    )
                    cols = (
                        offs[b][free_free, None, None]
                        + np.zeros((1, da, 1), dtype=np.int64)
                        + np.arange(db)[None, None, :]
                    )
                    np.add.at(eq.H, (rows.ravel(), cols.ravel()), blocks[free_free].ravel())
                free_elim = mask_free & (offs[b] == -2)
                if free_elim.any():
                    if db != 3:
                        raise ValueError("eliminated blocks must be 3-dimensional")
                    rows = offs[a][free_elim, None, None] + np.arange(da)[None, :, None] + np.zeros(
                        (1, 1, 3), dtype=np.int64
                    )
                    cols = 3 * lm_ids[b][free_elim, None, None] + np.zeros(
                        (1, da, 1), dtype=np.int64
                    ) + np.arange(3)[None, None, :]
                    eq.pl_rows.append(rows.ravel())
                    eq.pl_cols.append(cols.ravel())
                    eq.pl_data.append(blocks[free_elim].ravel())
                elim_elim = mask_elim & (offs[b] == -2)
                if elim_elim.any():
                    if not np.array_equal(lm_ids[a][elim_elim], lm_ids[b][elim_elim]):
                        raise ValueError("a residual may touch at most one eliminated block")
                    np.add.at(eq.Hll, lm_ids[a][elim_elim], blocks[elim_elim])
    return eq, cost


def _solve_normal_equations(eq: _NormalEquations, damping: float):
    """Damped Schur-reduced solve; returns (delta_p, delta_l)."""
    H = eq.H.copy()
    diag = np.maximum(np.diag(H), 1e-12)
    H[np.diag_indices_from(H)] += damping * diag

    if eq.lm_count == 0:
        L = scipy.linalg.cho_factor(H, check_finite=False)
        delta_p = scipy.linalg.cho_solve(L, -eq.g, check_finite=False)
        if not np.all(np.isfinite(delta_p)):
            raise np.linalg.LinAlgError("non-finite step")
        return delta_p, np.zeros((0, 3))

    Hll = eq.Hll.copy()
    idx3 = np.arange(3)
    diag_l = Hll[:, idx3, idx3]
    # absolute floor keeps unobserved landmarks from making blocks singular
    Hll[:, idx3, idx3] = diag_l + damping * np.maximum(diag_l, 1e-12) + 1e-10
    Hll_inv = np.linalg.inv(Hll)

    if eq.pl_rows:
        rows = np.concatenate(eq.pl_rows)
        cols = np.concatenate(eq.pl_cols)
        data = np.concatenate(eq.pl_data)
        Hpl = scipy.sparse.coo_matrix(
            (data, (rows, cols)), shape=(eq.n_p, 3 * eq.lm_count)
        ).tocsr()
    else:
        Hpl = scipy.sparse.csr_matrix((eq.n_p, 3 * eq.lm_count))

    n_l = eq.lm_count
    base = 3 * np.arange(n_l)[:, None, None]
    blk_rows = np.broadcast_to(base + np.arange(3)[None, :, None], (n_l, 3, 3)).ravel()
    blk_cols = np.broadcast_to(base + np.arange(3)[None, None, :], (n_l, 3, 3)).ravel()
    Hll_inv_sp = scipy.sparse.coo_matrix(
        (Hll_inv.ravel(), (blk_rows, blk_cols)), shape=(3 * n_l, 3 * n_l)
    ).tocsr()

    T = Hpl @ Hll_inv_sp
    S = H - np.asarray((T @ Hpl.T).todense())
    rhs = -eq.g + np.asarray(T @ eq.gl.ravel()).ravel()
    L = scipy.linalg.cho_factor(S, check_finite=False)
    delta_p = scipy.linalg.cho_solve(L, rhs, check_finite=False)

    back = -eq.gl.ravel() - np.asarray(Hpl.T @ delta_p).ravel()
    delta_l = np.einsum("nij,nj->ni", Hll_inv, back.reshape(n_l, 3))
    if not (np.all(np.isfinite(delta_p)) and np.all(np.isfinite(delta_l))):
        raise np.linalg.LinAlgError("non-finite step")
    return delta_p, delta_l


def solve(problem: Problem, config: SolverConfig | None = None) -> SolveReport:
    """Levenberg-Marquardt descent over the problem's free blocks.

    Cost is monotonically nonincreasing across accepted steps; rank-deficient
    normal equations only increase damping. Mutates the problem's block
    values in place on success.
    """
    if config is None:
        config = SolverConfig()
    t0 = time.perf_counter()
    if problem.num_free_blocks() == 0:
        raise ValueError("problem has no free parameter blocks")

    offsets = {}
    lm_index = {}
    off = 0
    for key, blk in problem.blocks.items():
        if blk.constant:
            continue
        if blk.eliminated:
            lm_index[key] = len(lm_index)
        else:
            offsets[key] = off
            off += blk.local_dim

    values = problem.values()
    initial_cost = _total_cost(problem, values)
    if initial_cost <= config.cost_floor:
        return SolveReport(0, initial_cost, initial_cost, "converged", time.perf_counter() - t0)

    damping = config.initial_damping
    cost = initial_cost
    iterations = 0
    termination = "max_iters"

    for _ in range(config.max_iters):
        eq, cost_check = _assemble(problem, values, offsets, lm_index)
        grad_inf = max(
            np.abs(eq.g).max() if eq.g.size else 0.0,
            np.abs(eq.gl).max() if eq.gl.size else 0.0,
        )
        if grad_inf < config.gradient_tol:
            termination = "gradient_tol"
            break

        accepted = False
        while damping <= config.damping_limit:
            try:
                delta_p, delta_l = _solve_normal_equations(eq, damping)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                damping *= 10.0
                continue
            trial = _apply_step(problem, values, offsets, delta_p, lm_index, delta_l)
            trial_cost = _total_cost(problem, trial)
            if np.isfinite(trial_cost) and trial_cost < cost:
                values = trial
                rel_drop = (cost - trial_cost) / max(cost, 1e-300)
                cost = trial_cost
                damping = max(damping / 3.0, 1e-12)
                accepted = True
                iterations += 1
                if cost <= config.cost_floor:
                    termination = "converged"
                elif rel_drop < config.rel_cost_tol:
                    termination = "rel_cost_tol"
                break
            damping *= 10.0
        if not accepted:
            # no descent step within the damping range: cost is at its floor
            termination = "stalled"
            break
        if termination in ("rel_cost_tol", "converged"):
            break

    for key, blk in problem.blocks.items():
        if not blk.constant:
            blk.value = values[key]
    return SolveReport(iterations, initial_cost, cost, termination, time.perf_counter() - t0)
