"""Sparse robust Levenberg-Marquardt over residual blocks and parameter blocks.

The problem is a bag of parameter blocks (optionally fixed, lower-bounded, or
living on the rotation manifold) plus residual blocks that reference them.
Residual blocks sharing the same callback are evaluated in one vectorized
call, which is what makes pure-Python assembly fast enough for bundle-sized
problems.

Callback contract
-----------------
A callback ``fn(*params)`` receives one 2-D array per referenced parameter
slot, shaped ``(n_blocks, param_dim)`` (rows are the blocks batched for this
call), and returns ``(residuals, jacobians)`` where ``residuals`` is
``(n_blocks, residual_dim)`` and ``jacobians`` is a sequence with one
``(n_blocks, residual_dim, tangent_dim)`` array per parameter slot.

For EUCLIDEAN blocks the tangent dimension equals the parameter dimension.
ROTATION blocks store a unit quaternion (w, x, y, z) and update via a 3-dof
right-multiplicative tangent step ``q <- q * exp_map(delta)``; their
Jacobians must be taken with respect to that tangent increment at delta = 0.

Losses are applied by the solver (IRLS-style rescaling of residual and
Jacobian rows); callbacks always return raw residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Rotation, exp_map

EUCLIDEAN = "EUCLIDEAN"
ROTATION = "ROTATION"

# termination reasons
CONVERGED = "CONVERGED"
MAX_ITERATIONS = "MAX_ITERATIONS"
ALL_FIXED = "ALL_FIXED"
FAILURE = "FAILURE"


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrivialLoss:
    def cost_and_weight(self, norms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return 0.5 * norms * norms, np.ones_like(norms)


@dataclass(frozen=True)
class HuberLoss:
    """rho(x) = x^2/2 for |x| <= scale, else scale*|x| - scale^2/2."""

    scale: float

    def cost_and_weight(self, norms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d = self.scale
        small = norms <= d
        cost = np.where(small, 0.5 * norms * norms, d * norms - 0.5 * d * d)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(small, 1.0, d / np.where(norms > 0, norms, 1.0))
        return cost, w


@dataclass
class _ParamBlock:
    name: str
    values: np.ndarray
    fixed: bool
    lower_bound: Optional[np.ndarray]
    manifold: str
    index: int = -1  # column offset in the reduced system, -1 if fixed

    @property
    def dim(self) -> int:
        return len(self.values)

    @property
    def tangent_dim(self) -> int:
        return 3 if self.manifold == ROTATION else len(self.values)


@dataclass
class _BlockGroup:
    """Residual blocks sharing a callback/loss/slot signature."""

    fn: Callable
    loss: object
    residual_dim: int
    param_names: List[List[str]]  # one name list per block, same arity


@dataclass
class SolverReport:
    termination: str
    iterations: int
    initial_cost: float
    final_cost: float
    gradient_norm: float
    step_norm: float
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.termination in (CONVERGED, MAX_ITERATIONS)


@dataclass
class SolverOptions:
    max_iters: int = 100
    fn_tol: float = 1e-12
    grad_tol: float = 1e-12
    step_tol: float = 0.0
    initial_lambda: float = 1e-4
    max_lambda: float = 1e32
    # Parameter blocks to Schur-eliminate before the linear solve. Off by
    # default; callers may list block names whose coupling is block-diagonal
    # (no residual may reference two eliminated blocks).
    eliminate: Tuple[str, ...] = ()
    dense: bool = False  # dense reference solve (tests)


class Problem:
    """Residual blocks over parameter blocks with robust losses."""

    def __init__(self):
        self._params: Dict[str, _ParamBlock] = {}
        self._groups: Dict[Tuple, _BlockGroup] = {}

    # -- construction -----------------------------------------------------

    def add_parameter_block(
        self,
        name: str,
        values: np.ndarray,
        fixed: bool = False,
        lower_bound: Optional[np.ndarray] = None,
        manifold: str = EUCLIDEAN,
    ) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter block {name!r}")
        values = np.array(values, dtype=float).ravel()
        if manifold == ROTATION and len(values) != 4:
            raise ValueError("ROTATION blocks store a quaternion (w, x, y, z)")
        lb = None
        if lower_bound is not None:
            lb = np.broadcast_to(np.asarray(lower_bound, dtype=float), values.shape).copy()
            values = np.maximum(values, lb)
        self._params[name] = _ParamBlock(name, values, fixed, lb, manifold)

    def add_residual_block(
        self,
        fn: Callable,
        param_names: Sequence[str],
        residual_dim: int,
        loss: object = None,
    ) -> None:
        for n in param_names:
            if n not in self._params:
                raise ValueError(f"residual block references unknown parameter block {n!r}")
        loss = loss if loss is not None else TrivialLoss()
        key = (id(fn), loss, residual_dim, tuple(self._params[n].dim for n in param_names))
        group = self._groups.get(key)
        if group is None:
            group = _BlockGroup(fn, loss, residual_dim, [])
            self._groups[key] = group
        group.param_names.append(list(param_names))

    def set_fixed(self, name: str, fixed: bool = True) -> None:
        self._params[name].fixed = fixed

    def values(self, name: str) -> np.ndarray:
        return self._params[name].values.copy()

    def set_values(self, name: str, values: np.ndarray) -> None:
        block = self._params[name]
        values = np.array(values, dtype=float).ravel()
        if len(values) != block.dim:
            raise ValueError("dimension mismatch")
        if block.lower_bound is not None:
            values = np.maximum(values, block.lower_bound)
        block.values = values

    @property
    def parameter_names(self) -> List[str]:
        return list(self._params)

    def num_residual_blocks(self) -> int:
        return sum(len(g.param_names) for g in self._groups.values())

    # -- evaluation --------------------------------------------------------

    def _gather(self, group: _BlockGroup, slot: int) -> np.ndarray:
        names = [names[slot] for names in group.param_names]
        return np.stack([self._params[n].values for n in names])

    def _evaluate_group(self, group: _BlockGroup, with_jacobians: bool):
        arity = len(group.param_names[0])
        inputs = [self._gather(group, s) for s in range(arity)]
        res, jacs = group.fn(*inputs)
        res = np.asarray(res, dtype=float)
        n = len(group.param_names)
        if res.shape != (n, group.residual_dim):
            raise SolverError(
                f"callback returned residuals of shape {res.shape}, "
                f"expected {(n, group.residual_dim)}"
            )
        if not with_jacobians:
            return res, None
        jacs = [np.asarray(j, dtype=float) for j in jacs]
        return res, jacs

    def total_cost(self) -> float:
        """Robustified cost at the current values."""
        total = 0.0
        for group in self._groups.values():
            res, _ = self._evaluate_group(group, with_jacobians=False)
            norms = np.linalg.norm(res, axis=1)
            cost, _ = group.loss.cost_and_weight(norms)
            total += float(np.sum(cost))
        return total

    # -- manifold plus -----------------------------------------------------

    @staticmethod
    def _plus(block: _ParamBlock, values: np.ndarray, delta: np.ndarray) -> np.ndarray:
        if block.manifold == ROTATION:
            q = Rotation.from_quat(values)
            return (q * exp_map(delta)).q
        out = values + delta
        if block.lower_bound is not None:
            out = np.maximum(out, block.lower_bound)
        return out

    def apply_step(self, deltas: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Apply tangent steps; returns the previous values for rollback."""
        backup = {}
        for name, delta in deltas.items():
            block = self._params[name]
            backup[name] = block.values
            block.values = self._plus(block, block.values, delta)
        return backup

    def restore(self, backup: Dict[str, np.ndarray]) -> None:
        for name, values in backup.items():
            self._params[name].values = values


def _index_free_blocks(problem: Problem) -> Tuple[List[_ParamBlock], int]:
    free = []
    offset = 0
    for block in problem._params.values():
        if block.fixed:
            block.index = -1
        else:
            block.index = offset
            offset += block.tangent_dim
            free.append(block)
    return free, offset


def _assemble_normal_equations(problem: Problem, n_cols: int):
    """Returns (H coo triplets, g, cost) for the robustified linearization."""
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    g = np.zeros(n_cols)
    cost = 0.0
    for group in problem._groups.values():
        res, jacs = problem._evaluate_group(group, with_jacobians=True)
        if not np.all(np.isfinite(res)):
            bad = int(np.argwhere(~np.all(np.isfinite(res), axis=1))[0][0])
            raise SolverError(
                f"non-finite residual in block with parameters {group.param_names[bad]}"
            )
        norms = np.linalg.norm(res, axis=1)
        block_cost, weights = group.loss.cost_and_weight(norms)
        cost += float(np.sum(block_cost))
        sw = np.sqrt(weights)[:, None]
        res_w = res * sw

        arity = len(group.param_names[0])
        n = len(group.param_names)
        offsets = np.empty((arity, n), dtype=np.int64)
        tdims = []
        for s in range(arity):
            blocks = [problem._params[names[s]] for names in group.param_names]
            offsets[s] = [b.index for b in blocks]
            tdims.append(blocks[0].tangent_dim)

        jw = [j * sw[:, :, None] for j in jacs]
        for s in range(arity):
            active_s = offsets[s] >= 0
            if not np.any(active_s):
                continue
            # gradient: J_s^T r
            gs = np.einsum("nrd,nr->nd", jw[s][active_s], res_w[active_s])
            flat_idx = (
                offsets[s][active_s, None] + np.arange(tdims[s])[None, :]
            ).ravel()
            np.add.at(g, flat_idx, gs.ravel())
            for s2 in range(s, arity):
                active = active_s & (offsets[s2] >= 0)
                if not np.any(active):
                    continue
                h = np.einsum("nri,nrj->nij", jw[s][active], jw[s2][active])
                r_idx = (
                    offsets[s][active, None, None]
                    + np.arange(tdims[s])[None, :, None]
                    + np.zeros((1, 1, tdims[s2]), dtype=np.int64)
                ).ravel()
                c_idx = (
                    offsets[s2][active, None, None]
                    + np.zeros((1, tdims[s], 1), dtype=np.int64)
                    + np.arange(tdims[s2])[None, None, :]
                ).ravel()
                rows.append(r_idx)
                cols.append(c_idx)
                vals.append(h.ravel())
                if s2 != s:
                    rows.append(c_idx)
                    cols.append(r_idx)
                    vals.append(h.ravel())
    return rows, cols, vals, g, cost


def _solve_linear(
    H: sp.csr_matrix,
    g: np.ndarray,
    lam: float,
    options: SolverOptions,
    elim_mask: Optional[np.ndarray],
    elim_dims: Optional[np.ndarray],
) -> Optional[np.ndarray]:
    """Solve (H + lam*diag(H)) delta = -g; returns None if the solve fails."""
    diag = H.diagonal()
    damped_diag = diag + lam * diag
    damped_diag = np.where(damped_diag > 0, damped_diag, lam if lam > 0 else 1e-12)
    Hd = H + sp.diags(damped_diag - diag)
    try:
        if elim_mask is not None and np.any(elim_mask):
            return _solve_schur(Hd.tocsr(), g, elim_mask, elim_dims)
        if options.dense:
            return np.linalg.solve(Hd.toarray(), -g)
        lu = spla.splu(Hd.tocsc(), permc_spec="MMD_AT_PLUS_A")
        delta = lu.solve(-g)
        if not np.all(np.isfinite(delta)):
            return None
        return delta
    except (RuntimeError, np.linalg.LinAlgError, ValueError):
        return None


def _block_diag_inverse(C: sp.csr_matrix, dims: np.ndarray) -> Optional[sp.csr_matrix]:
    """Invert a block-diagonal matrix with the given per-block sizes."""
    starts = np.concatenate([[0], np.cumsum(dims)])
    coo = C.tocoo()
    block_of = np.repeat(np.arange(len(dims)), dims)
    if np.any(block_of[coo.row] != block_of[coo.col]):
        raise SolverError("eliminated system is not block-diagonal")
    inv_rows, inv_cols, inv_vals = [], [], []
    for d in np.unique(dims):
        sel = dims == d
        ids = np.nonzero(sel)[0]
        mats = np.zeros((len(ids), d, d))
        # gather entries of the selected blocks
        kmap = np.full(len(dims), -1, dtype=np.int64)
        kmap[ids] = np.arange(len(ids))
        mask = sel[block_of[coo.row]]
        r, c, v = coo.row[mask], coo.col[mask], coo.data[mask]
        b = block_of[r]
        mats[kmap[b], r - starts[b], c - starts[b]] = v
        try:
            inv = np.linalg.inv(mats)
        except np.linalg.LinAlgError:
            return None
        ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
        inv_rows.append((starts[ids][:, None, None] + ii[None]).ravel())
        inv_cols.append((starts[ids][:, None, None] + jj[None]).ravel())
        inv_vals.append(inv.ravel())
    n = C.shape[0]
    return sp.coo_matrix(
        (np.concatenate(inv_vals), (np.concatenate(inv_rows), np.concatenate(inv_cols))),
        shape=(n, n),
    ).tocsr()


def _solve_schur(
    Hd: sp.csr_matrix, g: np.ndarray, elim: np.ndarray, elim_dims: np.ndarray
) -> Optional[np.ndarray]:
    """Eliminate the `elim` coordinates (block-diagonal among themselves)."""
    keep = ~elim
    A = Hd[keep][:, keep]
    B = Hd[keep][:, elim].tocsr()
    C = Hd[elim][:, elim].tocsr()
    g_a = g[keep]
    g_b = g[elim]
    Cinv = _block_diag_inverse(C, elim_dims)
    if Cinv is None:
        return None
    BCinv = (B @ Cinv).tocsr()
    S = A.toarray() - (BCinv @ B.T).toarray()
    rhs = -(g_a - BCinv @ g_b)
    try:
        delta_a = np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        return None
    delta_b = -(Cinv @ (g_b + B.T @ delta_a))
    delta = np.empty(len(g))
    delta[keep] = delta_a
    delta[elim] = delta_b
    if not np.all(np.isfinite(delta)):
        return None
    return delta


def _check_elimination(problem: Problem, names: Iterable[str]) -> None:
    elim = set(names)
    for group in problem._groups.values():
        for block_names in group.param_names:
            hits = [n for n in block_names if n in elim]
            if len(hits) > 1:
                raise SolverError(
                    f"cannot eliminate coupled blocks {hits} (shared residual)"
                )


def solve(problem: Problem, options: Optional[SolverOptions] = None) -> SolverReport:
    """Levenberg-Marquardt with lambda*diag damping and step rejection."""
    options = options or SolverOptions()
    free, n_cols = _index_free_blocks(problem)
    if n_cols == 0:
        cost = problem.total_cost()
        return SolverReport(ALL_FIXED, 0, cost, cost, 0.0, 0.0)
    if options.eliminate:
        _check_elimination(problem, options.eliminate)
        elim_mask = np.zeros(n_cols, dtype=bool)
        elim_blocks = []
        for name in options.eliminate:
            block = problem._params[name]
            if block.index >= 0:
                elim_mask[block.index : block.index + block.tangent_dim] = True
                elim_blocks.append(block)
        elim_blocks.sort(key=lambda b: b.index)
        elim_dims = np.array([b.tangent_dim for b in elim_blocks], dtype=np.int64)
    else:
        elim_mask = None
        elim_dims = None

    lam = options.initial_lambda
    initial_cost = math.nan
    cost = math.nan
    grad_norm = math.nan
    step_norm = 0.0
    iterations = 0
    termination = MAX_ITERATIONS
    message = ""

    for iterations in range(1, options.max_iters + 1):
        rows, cols, vals, g, cost = _assemble_normal_equations(problem, n_cols)
        if iterations == 1:
            initial_cost = cost
        grad_norm = float(np.max(np.abs(g))) if len(g) else 0.0
        if grad_norm < options.grad_tol:
            termination = CONVERGED
            message = "gradient tolerance reached"
            iterations -= 1
            break
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_cols, n_cols),
        ).tocsr()

        accepted = False
        while True:
            delta = _solve_linear(H, g, lam, options, elim_mask, elim_dims)
            if delta is not None:
                deltas = {
                    b.name: delta[b.index : b.index + b.tangent_dim] for b in free
                }
                backup = problem.apply_step(deltas)
                new_cost = problem.total_cost()
                if np.isfinite(new_cost) and new_cost < cost:
                    accepted = True
                    step_norm = float(np.linalg.norm(delta))
                    lam = max(lam / 3.0, 1e-18)
                    cost_drop = cost - new_cost
                    cost = new_cost
                    break
                problem.restore(backup)
            lam *= 2.0
            if lam > options.max_lambda:
                break
        if not accepted:
            termination = CONVERGED
            message = "no acceptable step (lambda escalation exhausted)"
            break
        if cost_drop <= options.fn_tol * max(cost, 1.0):
            termination = CONVERGED
            message = "function tolerance reached"
            break
        if options.step_tol > 0.0 and step_norm < options.step_tol:
            termination = CONVERGED
            message = "step tolerance reached"
            break

    final_cost = problem.total_cost()
    if not math.isfinite(final_cost):
        termination = FAILURE
        message = "non-finite final cost"
    if math.isnan(initial_cost):
        initial_cost = final_cost
    return SolverReport(
        termination, iterations, initial_cost, final_cost, grad_norm, step_norm, message
    )


def check_jacobian(problem: Problem, epsilon: float = 1e-6) -> float:
    """Central finite differences vs. analytic Jacobians.

    Returns the worst relative deviation |analytic - numeric| /
    max(1, |analytic|, |numeric|) over all residual blocks.
    """
    worst = 0.0
    for group in problem._groups.values():
        arity = len(group.param_names[0])
        inputs = [problem._gather(group, s) for s in range(arity)]
        _, jacs = group.fn(*inputs)
        jacs = [np.asarray(j, dtype=float) for j in jacs]
        for s in range(arity):
            blocks = [problem._params[names[s]] for names in group.param_names]
            tdim = blocks[0].tangent_dim
            for j in range(tdim):
                plus_inputs = [a.copy() for a in inputs]
                minus_inputs = [a.copy() for a in inputs]
                for b_idx, block in enumerate(blocks):
                    e = np.zeros(tdim)
                    e[j] = epsilon
                    if block.manifold == ROTATION:
                        q = Rotation.from_quat(inputs[s][b_idx])
                        plus_inputs[s][b_idx] = (q * exp_map(e)).q
                        minus_inputs[s][b_idx] = (q * exp_map(-e)).q
                    else:
                        plus_inputs[s][b_idx] = inputs[s][b_idx] + e
                        minus_inputs[s][b_idx] = inputs[s][b_idx] - e
                r_plus, _ = group.fn(*plus_inputs)
                r_minus, _ = group.fn(*minus_inputs)
                numeric = (np.asarray(r_plus) - np.asarray(r_minus)) / (2 * epsilon)
                analytic = jacs[s][:, :, j]
                denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
                dev = float(np.max(np.abs(analytic - numeric) / denom))
                worst = max(worst, dev)
    return worst
