"""Global rotation estimation from pairwise relative rotations.

Spanning-tree initialization followed by two IRLS phases over tangent-space
updates: an L1 phase to shed outliers, then a smooth robust phase
(Geman-McClure-style reweighting) for accuracy. The anchor node's rotation
is pinned to the identity throughout.

Each edge (i, j, R_ij) encodes R_ij ~ R_j R_i^T; its residual is
log_map(R_j^T R_ij R_i), which vanishes exactly on consistent input.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Rotation, angular_distance, exp_map, log_map
from .viewgraph import ViewGraph


@dataclass
class RotationEdge:
    i: int
    j: int
    rotation: Rotation  # R_ij
    weight: float = 1.0  # inlier match count

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("edge weight must be positive")


@dataclass
class RotationProblem:
    nodes: List[int]
    edges: List[RotationEdge]
    anchor: Optional[int] = None

    def __post_init__(self):
        if self.anchor is None and self.nodes:
            self.anchor = max(self.nodes, key=lambda n: (self.degree(n), -n))

    def degree(self, node: int) -> int:
        return sum(1 for e in self.edges if node in (e.i, e.j))


@dataclass
class RotationSolution:
    rotations: Dict[int, Rotation]
    converged: bool
    iterations_l1: int
    iterations_irls: int
    final_objective: float


def connected_components(nodes: Sequence[int], edges: Sequence[RotationEdge]) -> List[List[int]]:
    adj: Dict[int, List[int]] = {n: [] for n in nodes}
    for e in edges:
        adj[e.i].append(e.j)
        adj[e.j].append(e.i)
    seen = set()
    comps = []
    for start in nodes:
        if start in seen:
            continue
        stack = [start]
        comp = []
        seen.add(start)
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        comps.append(sorted(comp))
    comps.sort(key=lambda c: (-len(c), c[0]))
    return comps


def init_spanning_tree(problem: RotationProblem) -> Dict[int, Rotation]:
    """Maximum-weight spanning tree init: anchor = identity, children
    propagate R_j = R_ij * R_i along tree edges."""
    if not problem.nodes:
        raise ValueError("empty rotation problem")
    adj: Dict[int, List[Tuple[float, int, int, Rotation, bool]]] = {
        n: [] for n in problem.nodes
    }
    for e in problem.edges:
        adj[e.i].append((e.weight, e.j, e.i, e.rotation, True))  # forward: i -> j
        adj[e.j].append((e.weight, e.i, e.j, e.rotation, False))  # backward: j -> i
    rotations: Dict[int, Rotation] = {problem.anchor: Rotation.identity()}
    # Prim's algorithm with a max-heap (negated weights); deterministic
    # tie-break by target node id.
    heap: List[Tuple[float, int, int, int]] = []
    edge_payload = {}
    counter = 0
    for item in adj[problem.anchor]:
        heapq.heappush(heap, (-item[0], item[1], counter))
        edge_payload[counter] = item
        counter += 1
    while heap:
        _, target, token = heapq.heappop(heap)
        if target in rotations:
            continue
        weight, tgt, src, R_ij, forward = edge_payload.pop(token)
        base = rotations[src]
        if forward:
            rotations[tgt] = R_ij * base  # R_j = R_ij R_i
        else:
            rotations[tgt] = R_ij.inverse() * base  # R_i = R_ij^T R_j
        for item in adj[tgt]:
            if item[1] not in rotations:
                heapq.heappush(heap, (-item[0], item[1], counter))
                edge_payload[counter] = item
                counter += 1
    missing = [n for n in problem.nodes if n not in rotations]
    if missing:
        raise ValueError(f"graph not connected: unreachable nodes {missing}")
    return rotations


def _edge_residuals(
    edges: Sequence[RotationEdge], rotations: Dict[int, Rotation]
) -> np.ndarray:
    res = np.empty((len(edges), 3))
    for k, e in enumerate(edges):
        delta = rotations[e.j].inverse() * e.rotation * rotations[e.i]
        res[k] = log_map(delta)
    return res


def _objective(res_norms: np.ndarray, match_w: np.ndarray, sigma: float) -> float:
    # Geman-McClure-style: rho(x) = x^2 / (x^2 + sigma^2)
    x2 = res_norms * res_norms
    return float(np.sum(match_w * x2 / (x2 + sigma * sigma)))


def solve_rotation_averaging(
    problem: RotationProblem,
    initial: Optional[Dict[int, Rotation]] = None,
    l1_iters: int = 100,
    irls_iters: int = 100,
    sigma_deg: float = 5.0,
    l1_epsilon: float = 1e-5,
    step_tol: float = 1e-5,
) -> RotationSolution:
    """Two-phase robust averaging; returns the best iterate with a
    convergence flag (non-convergence is not an error)."""
    rotations = dict(initial) if initial is not None else init_spanning_tree(problem)
    nodes = [n for n in problem.nodes if n != problem.anchor]
    index = {n: 3 * k for k, n in enumerate(nodes)}
    n_cols = 3 * len(nodes)
    edges = problem.edges
    match_w = np.array([e.weight for e in edges], dtype=float)
    sigma = math.radians(sigma_deg)

    if n_cols == 0 or not edges:
        res = _edge_residuals(edges, rotations) if edges else np.zeros((0, 3))
        norms = np.linalg.norm(res, axis=1) if len(res) else np.zeros(0)
        return RotationSolution(rotations, True, 0, 0, _objective(norms, match_w, sigma))

    # static structure of the linear system: rows 3 per edge
    rows_i = np.array([index.get(e.i, -1) for e in edges])
    rows_j = np.array([index.get(e.j, -1) for e in edges])

    def solve_ls(weights: np.ndarray, res: np.ndarray) -> np.ndarray:
        """Weighted LS for omega: omega_j - omega_i = r per edge."""
        rows: List[np.ndarray] = []
        cols: List[np.ndarray] = []
        vals: List[np.ndarray] = []
        rhs = np.zeros(n_cols)
        sw = weights  # one scalar per edge applied to the squared row
        r3 = np.arange(3)
        for which, sign in ((rows_j, 1.0), (rows_i, -1.0)):
            active = which >= 0
            if not np.any(active):
                continue
            idx = which[active, None] + r3[None, :]
            np.add.at(rhs, idx.ravel(), (sign * sw[active, None] * res[active]).ravel())
        # normal equations: block Laplacian
        for which_a, sign_a in ((rows_j, 1.0), (rows_i, -1.0)):
            for which_b, sign_b in ((rows_j, 1.0), (rows_i, -1.0)):
                active = (which_a >= 0) & (which_b >= 0)
                if not np.any(active):
                    continue
                idx_a = (which_a[active, None] + r3[None, :]).ravel()
                idx_b = (which_b[active, None] + r3[None, :]).ravel()
                v = np.repeat(sign_a * sign_b * sw[active], 3)
                rows.append(idx_a)
                cols.append(idx_b)
                vals.append(v)
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_cols, n_cols),
        ).tocsc()
        H = H + sp.identity(n_cols, format="csc") * (1e-10 * (1 + H.diagonal().max()))
        try:
            lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A")
            return lu.solve(rhs)
        except RuntimeError:
            return np.zeros(n_cols)

    def apply(omega: np.ndarray) -> Dict[int, Rotation]:
        out = dict(rotations)
        for n in nodes:
            k = index[n]
            out[n] = out[n] * exp_map(omega[k : k + 3])
        return out

    converged = False
    used_l1 = 0
    used_irls = 0

    # phase 1: L1 via IRLS weights 1 / max(||r||, eps)
    for it in range(l1_iters):
        res = _edge_residuals(edges, rotations)
        norms = np.linalg.norm(res, axis=1)
        w = match_w / np.maximum(norms, l1_epsilon)
        omega = solve_ls(w, res)
        rotations = apply(omega)
        used_l1 = it + 1
        if np.max(np.linalg.norm(omega.reshape(-1, 3), axis=1)) < step_tol:
            break

    # phase 2: smooth robust reweighting with step acceptance so the
    # objective is non-increasing across accepted iterations
    res = _edge_residuals(edges, rotations)
    norms = np.linalg.norm(res, axis=1)
    objective = _objective(norms, match_w, sigma)
    for it in range(irls_iters):
        x2 = norms * norms
        w = match_w * (sigma * sigma) / (x2 + sigma * sigma) ** 2
        omega = solve_ls(w, res)
        step = float(np.max(np.linalg.norm(omega.reshape(-1, 3), axis=1)))
        accepted = False
        scale = 1.0
        for _ in range(8):
            candidate = apply(omega * scale)
            c_res = _edge_residuals(edges, candidate)
            c_norms = np.linalg.norm(c_res, axis=1)
            c_obj = _objective(c_norms, match_w, sigma)
            if c_obj <= objective:
                rotations = candidate
                res, norms, objective = c_res, c_norms, c_obj
                accepted = True
                break
            scale *= 0.5
        used_irls = it + 1
        if not accepted:
            converged = True  # objective cannot decrease further
            break
        if step * scale < step_tol:
            converged = True
            break

    if irls_iters == 0:
        converged = True
    return RotationSolution(rotations, converged, used_l1, used_irls, objective)


def filter_edges_by_rotation(
    graph: ViewGraph,
    rotations: Dict[int, Rotation],
    max_angle_deg: float = 10.0,
) -> Tuple[ViewGraph, List[int]]:
    """Remove edges inconsistent with the solved rotations.

    Keeps edges with angular_distance(R_ij, R_j R_i^-1) <= max_angle_deg.
    Returns the pruned graph plus the image ids outside its largest
    remaining component (to be marked unregistered).
    """
    max_rad = math.radians(max_angle_deg)
    pruned = ViewGraph(images=dict(graph.images), cameras=dict(graph.cameras))
    for key in sorted(graph.edges):
        edge = graph.edges[key]
        if not edge.valid or edge.rotation is None:
            continue
        if edge.i not in rotations or edge.j not in rotations:
            continue
        implied = rotations[edge.j] * rotations[edge.i].inverse()
        if angular_distance(edge.rotation, implied) <= max_rad:
            pruned.edges[key] = edge
    survivors = [
        RotationEdge(e.i, e.j, e.rotation, max(len(e.matches), 1))
        for e in pruned.edges.values()
    ]
    comps = connected_components(sorted(pruned.images), survivors)
    largest = set(comps[0]) if comps else set()
    unregistered = sorted(set(pruned.images) - largest)
    return pruned, unregistered
