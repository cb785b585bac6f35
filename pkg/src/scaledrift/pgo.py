"""Seven-DoF pose graph over keyframes and localised geo-tagged images.

Nodes are world-from-camera similarities.  Two relative edge families tie
keyframe/keyframe and keyframe/geo-image pairs to their pre-optimisation
relative pose, and an anchor edge pulls each geo image's camera centre to
its geo-tag position::

    e1(i, j) = log(dS_ij * S_i^-1 * S_j),   dS_ij = (S_i0^-1 * S_j0)^-1
    e2(k, l) = log(dS_kl * S_k^-1 * S_l)
    e3(m)    = trans(S_m) - y_m

    E = l1 * sum |e1|^2 + l2 * sum |e2|^2 + l3 * sum |e3|^2

The relative terms act on the inverted (camera-from-world) poses, which
makes them invariant to any world-side similarity; the anchor term reads
the camera centre straight off the world-from-camera pose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import manifold as mf
from .manifold import Sim3, se3_to_sim3
from .scene import GeoCorrespondence, Scene
from .solver import Problem, Sim3Manifold, SolveReport, SolverOptions, solve

log = logging.getLogger(__name__)


@dataclass
class PgoOptions:
    lambda1: float = 1e5
    lambda2: float = 1e5
    lambda3: float = 1.0
    covisibility_threshold: int = 15
    full_history: bool = False
    fix_boundary: bool = True


@dataclass
class GraphWindow:
    """Keyframes (c1), correspondences (c2), covisible pairs (c3) and keyframe/geo pairs (c4).

    ``boundary`` lists keyframes outside c1 that are covisible with it;
    they enter the graph as fixed nodes so the window stays attached to
    the rest of the map.
    """

    c1: list[int]
    c2: list[GeoCorrespondence]
    c3: list[tuple[int, int]]
    c4: list[tuple[int, str]]
    boundary: list[int] = field(default_factory=list)

    @property
    def keyframe_range(self) -> tuple[int, int]:
        return self.c1[0], self.c1[-1]


@dataclass
class PoseGraph:
    keyframe_nodes: dict[int, Sim3]
    geo_nodes: dict[str, Sim3]
    rel_edges_kf: list[tuple[int, int, Sim3]] = field(default_factory=list)
    rel_edges_geo: list[tuple[int, str, Sim3]] = field(default_factory=list)
    anchor_edges: list[tuple[str, np.ndarray]] = field(default_factory=list)
    boundary_edges: list[tuple[int, int, Sim3]] = field(default_factory=list)
    lambda1: float = 1e5
    lambda2: float = 1e5
    lambda3: float = 1.0
    fixed_keyframes: set = field(default_factory=set)

    def node(self, key) -> Sim3:
        kind, ident = key
        return self.keyframe_nodes[ident] if kind == "kf" else self.geo_nodes[ident]


# ---------------------------------------------------------------------------
# window selection
# ---------------------------------------------------------------------------


def covisibility_pairs(scene: Scene, keyframes, threshold: int) -> list[tuple[int, int]]:
    """Keyframe pairs sharing at least ``threshold`` observed map points."""
    kfs = list(keyframes)
    if len(kfs) < 2:
        return []
    pos = {k: i for i, k in enumerate(kfs)}
    sel = np.isin(scene.obs_keyframe, kfs)
    if not np.any(sel):
        return []
    rows = np.array([pos[k] for k in scene.obs_keyframe[sel].tolist()])
    _, cols = np.unique(scene.obs_point[sel], return_inverse=True)
    B = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(kfs), cols.max() + 1))
    B.sum_duplicates()
    B.data[:] = 1.0  # a keyframe observing a point twice still counts once
    C = (B @ B.T).tocoo()
    keep = (C.row < C.col) & (C.data >= threshold)
    pairs = sorted((kfs[i], kfs[j]) for i, j in zip(C.row[keep], C.col[keep]))
    return pairs


def build_window(scene: Scene, window_size: int = 3, covisibility_threshold: int = 15,
                 full_history: bool = False, fix_boundary: bool = True) -> GraphWindow:
    corrs = scene.geo_correspondences
    if len(corrs) < 1:
        raise ValueError("pose graph window needs at least one geo correspondence")
    c2 = list(corrs) if full_history else list(corrs[-window_size:])
    lo, hi = c2[0].keyframe_id, c2[-1].keyframe_id
    c1 = [k for k in scene.keyframes if lo <= k <= hi]
    c4 = [(c.keyframe_id, c.geo_id) for c in c2]
    if not fix_boundary:
        return GraphWindow(c1, c2, covisibility_pairs(scene, c1, covisibility_threshold), c4)
    seen = np.unique(scene.obs_point[np.isin(scene.obs_keyframe, c1)])
    near = np.unique(scene.obs_keyframe[np.isin(scene.obs_point, seen)])
    inside = set(c1)
    candidates = [k for k in near.tolist() if k not in inside]
    pairs = covisibility_pairs(scene, sorted(candidates + c1), covisibility_threshold)
    c3 = [(i, j) for i, j in pairs if i in inside or j in inside]
    boundary = sorted({k for pair in c3 for k in pair} - inside)
    return GraphWindow(c1, c2, c3, c4, boundary)


# ---------------------------------------------------------------------------
# graph + residuals
# ---------------------------------------------------------------------------


def relative_snapshot(S_i: Sim3, S_j: Sim3) -> Sim3:
    """The fixed ``dS_ij`` that zeroes the relative edge at the current poses."""
    return mf.inverse(S_i.inverse() @ S_j)


def build_graph(scene: Scene, window: GraphWindow, options: PgoOptions | None = None) -> PoseGraph:
    opt = options or PgoOptions()
    kf_nodes = {k: se3_to_sim3(scene.keyframes[k]) for k in sorted(set(window.c1) | set(window.boundary))}
    geo_nodes = {c.geo_id: c.map_pose for c in window.c2}
    g = PoseGraph(kf_nodes, geo_nodes, lambda1=opt.lambda1, lambda2=opt.lambda2, lambda3=opt.lambda3,
                  fixed_keyframes=set(window.boundary))
    fixed = set(window.boundary)
    for i, j in window.c3:
        edge = (i, j, relative_snapshot(kf_nodes[i], kf_nodes[j]))
        (g.boundary_edges if i in fixed or j in fixed else g.rel_edges_kf).append(edge)
    for k, l in window.c4:
        g.rel_edges_geo.append((k, l, relative_snapshot(kf_nodes[k], geo_nodes[l])))
    for c in window.c2:
        g.anchor_edges.append((c.geo_id, c.world_point))
    return g


def _relative_residual(dS: np.ndarray, Pi: np.ndarray, Pj: np.ndarray) -> np.ndarray:
    qi, ti, si = mf.sim3_inverse(Pi[:, :4], Pi[:, 4:7], Pi[:, 7])
    q, t, s = mf.sim3_compose(qi, ti, si, Pj[:, :4], Pj[:, 4:7], Pj[:, 7])
    q, t, s = mf.sim3_compose(dS[:, :4], dS[:, 4:7], dS[:, 7], q, t, s)
    return mf.sim3_log(q, t, s)


def _relative_jacobian(dS: np.ndarray, Pi: np.ndarray, Pj: np.ndarray):
    e = _relative_residual(dS, Pi, Pj)
    jr_inv = mf.sim3_right_jacobian_inv(e)
    q, t, s = mf.sim3_inverse(Pj[:, :4], Pj[:, 4:7], Pj[:, 7])
    A = jr_inv @ mf.sim3_adjoint(q, t, s)
    return [-A, A]


def _anchor_residual(y: np.ndarray, P: np.ndarray) -> np.ndarray:
    return P[:, 4:7] - y


def _anchor_jacobian(y: np.ndarray, P: np.ndarray):
    t = P[:, 4:7]
    J = np.zeros((len(P), 3, 7))
    J[:, :, :3] = -mf.skew(t)
    J[:, :, 3] = t
    J[:, :, 4:] = np.eye(3)
    return [J]


def _params(nodes) -> np.ndarray:
    return np.array([S.params() for S in nodes]).reshape(-1, 8)


def residual_e1(graph: PoseGraph, i: int, j: int) -> np.ndarray:
    for a, b, dS in graph.rel_edges_kf:
        if a == i and b == j:
            return _relative_residual(_params([dS]), _params([graph.keyframe_nodes[i]]),
                                      _params([graph.keyframe_nodes[j]]))[0]
    raise KeyError(f"no keyframe edge ({i}, {j})")


def residual_e2(graph: PoseGraph, k: int, l: str) -> np.ndarray:
    for a, b, dS in graph.rel_edges_geo:
        if a == k and b == l:
            return _relative_residual(_params([dS]), _params([graph.keyframe_nodes[k]]),
                                      _params([graph.geo_nodes[l]]))[0]
    raise KeyError(f"no keyframe/geo edge ({k}, {l})")


def residual_e3(graph: PoseGraph, m: str) -> np.ndarray:
    for a, y in graph.anchor_edges:
        if a == m:
            return graph.geo_nodes[m].translation - np.asarray(y, dtype=float)
    raise KeyError(f"no anchor edge for geo image {m!r}")


def _node_order(graph: PoseGraph):
    keys = [("kf", k) for k in graph.keyframe_nodes] + [("geo", g) for g in graph.geo_nodes]
    return keys, {k: i for i, k in enumerate(keys)}


def graph_problem(graph: PoseGraph, fixed_keys=()) -> tuple[Problem, list]:
    """Solver problem whose cost equals the graph's E_PGO."""
    keys, index = _node_order(graph)
    prob = Problem()
    fixed_keys = set(fixed_keys) | {("kf", k) for k in graph.fixed_keyframes}
    fixed = np.array([k in fixed_keys for k in keys], dtype=bool)
    prob.add_variables("nodes", Sim3Manifold(), _params([graph.node(k) for k in keys]), fixed)

    def add_rel(name, edges, kind_j, weight):
        if not edges:
            return
        dS = _params([e[2] for e in edges])
        ii = np.array([index[("kf", e[0])] for e in edges])
        jj = np.array([index[(kind_j, e[1])] for e in edges])
        prob.add_residuals(
            name,
            lambda Pi, Pj, dS=dS: _relative_residual(dS, Pi, Pj),
            [("nodes", ii), ("nodes", jj)],
            7,
            weight=weight,
            jacobian=lambda Pi, Pj, dS=dS: _relative_jacobian(dS, Pi, Pj),
        )

    add_rel("e1", graph.rel_edges_kf, "kf", graph.lambda1)
    if graph.boundary_edges:
        # attitude-only tie to fixed neighbours outside the window
        dS = _params([e[2] for e in graph.boundary_edges])
        ii = np.array([index[("kf", e[0])] for e in graph.boundary_edges])
        jj = np.array([index[("kf", e[1])] for e in graph.boundary_edges])
        prob.add_residuals(
            "e1_boundary",
            lambda Pi, Pj, dS=dS: _relative_residual(dS, Pi, Pj)[:, :3],
            [("nodes", ii), ("nodes", jj)],
            3,
            weight=graph.lambda1,
            jacobian=lambda Pi, Pj, dS=dS: [J[:, :3] for J in _relative_jacobian(dS, Pi, Pj)],
        )
    add_rel("e2", graph.rel_edges_geo, "geo", graph.lambda2)
    if graph.anchor_edges:
        y = np.array([a[1] for a in graph.anchor_edges], dtype=float).reshape(-1, 3)
        mm = np.array([index[("geo", a[0])] for a in graph.anchor_edges])
        prob.add_residuals(
            "e3",
            lambda P, y=y: _anchor_residual(y, P),
            [("nodes", mm)],
            3,
            weight=graph.lambda3,
            jacobian=lambda P, y=y: _anchor_jacobian(y, P),
        )
    return prob, keys


def pgo_cost(graph: PoseGraph) -> float:
    prob, _ = graph_problem(graph)
    return prob.cost()


# ---------------------------------------------------------------------------
# optimisation + write-back
# ---------------------------------------------------------------------------


def optimize_graph(graph: PoseGraph, solver_options: SolverOptions | None = None) -> SolveReport:
    """Solve the graph in place (node values are replaced)."""
    prob, keys = graph_problem(graph)
    report = solve(prob, solver_options)
    vals = prob.variables["nodes"].values
    for key, row in zip(keys, vals):
        S = Sim3.from_params(row)
        if key[0] == "kf":
            graph.keyframe_nodes[key[1]] = S
        else:
            graph.geo_nodes[key[1]] = S
    return report


def optimize_window(scene: Scene, window: GraphWindow, options: PgoOptions | None = None,
                    solver_options: SolverOptions | None = None) -> SolveReport:
    """Minimise E_PGO over the window's keyframes and geo images and update the scene.

    Keyframes keep rotation and camera centre of their optimised node (the
    node's scale goes into ``scene.keyframe_scale``); map points follow
    their reference keyframe's correction.
    """
    if not window.c1:
        raise ValueError("pose graph window contains no keyframes")
    graph = build_graph(scene, window, options)
    old = dict(graph.keyframe_nodes)
    report = optimize_graph(graph, solver_options)
    for k in window.c1:
        S = graph.keyframe_nodes[k]
        scene.keyframes[k] = S.to_se3()
        scene.keyframe_scale[k] *= S.scale
    for c in window.c2:
        S = graph.geo_nodes[c.geo_id]
        c.map_pose = Sim3(S.rotation, S.translation, 1.0)
    propagate_to_map_points(scene, {k: old[k] for k in window.c1}, {k: graph.keyframe_nodes[k] for k in window.c1})
    log.debug("pgo window %s: cost %.6g -> %.6g in %d it", window.keyframe_range,
              report.initial_cost, report.final_cost, report.iterations)
    return report


def propagate_to_map_points(scene: Scene, old_poses: dict[int, Sim3], new_poses: dict[int, Sim3]) -> None:
    """Move each map point with its reference keyframe: ``X <- S_new S_old^-1 X``."""
    if len(scene.point_ids) == 0:
        return
    missing = set(np.unique(scene.point_ref).tolist()) - set(scene.keyframes)
    if missing:
        raise KeyError(f"map points reference missing keyframes {sorted(missing)}")
    keys = [k for k in new_poses if k in old_poses]
    if not keys:
        return
    G = [new_poses[k] @ old_poses[k].inverse() for k in keys]
    lookup = {k: i for i, k in enumerate(keys)}
    mask = np.isin(scene.point_ref, keys)
    if not np.any(mask):
        return
    rows = np.array([lookup[r] for r in scene.point_ref[mask].tolist()])
    q = np.array([g.rotation.q for g in G])[rows]
    t = np.array([g.translation for g in G])[rows]
    s = np.array([g.scale for g in G])[rows]
    xyz = scene.point_xyz.copy()
    xyz[mask] = mf.sim3_act(q, t, s, xyz[mask])
    scene.point_xyz = xyz
