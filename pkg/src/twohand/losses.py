"""Training losses for predicted two-hand meshes and the weak-perspective camera."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import ShapeError

N_JOINTS = 21
ROOT_JOINT = 0
MIDDLE_MCP = 9


@dataclass(frozen=True)
class Camera:
    """Weak perspective: ``(x, y) -> s * (x, y) + (tx, ty)``; depth is dropped."""
    s: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"camera scale must be positive, got {self.s}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return self.s * p[:, :2] + np.array([self.tx, self.ty])


@dataclass(frozen=True)
class JointRegressor:
    matrix: np.ndarray  # (J, N), nonnegative rows summing to 1

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError(f"regressor must be 2-D, got {m.shape}")
        if np.any(m < 0):
            raise ValueError("regressor entries must be nonnegative")
        if np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("regressor rows must sum to 1")

    @property
    def n_joints(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, vertices: np.ndarray) -> np.ndarray:
        return self.matrix @ vertices


def uniform_patch_regressor(vertices, n_fingers: int = 5, bands=(0.45, 0.60, 0.73, 0.86, 1.0001),
                            wrist_fraction: float = 0.04) -> JointRegressor:
    """21-joint regressor averaging vertex patches of a hand-like template.

    The long bounding-box axis runs wrist to fingertip and the second-longest
    spans the palm. Joint 0 averages the lowest ``wrist_fraction`` of the
    long axis; joints ``1 + 4 * finger + band`` average one of ``n_fingers``
    equal-count width strips within one band along the length.
    """
    v = np.asarray(vertices, dtype=np.float64)
    ext = v.max(axis=0) - v.min(axis=0)
    long_ax, wide_ax = np.argsort(ext)[::-1][:2]
    u = (v[:, long_ax] - v[:, long_ax].min()) / ext[long_ax]
    x = v[:, wide_ax]
    strips = []
    for k in range(len(bands) - 1):
        idx = np.flatnonzero((u >= bands[k]) & (u < bands[k + 1]))
        idx = idx[np.lexsort((idx, x[idx]))]
        strips.append(np.array_split(idx, n_fingers))
    rows = [u <= wrist_fraction + 1e-12]
    for finger in range(n_fingers):
        for k in range(len(bands) - 1):
            row = np.zeros(len(v), dtype=bool)
            row[strips[k][finger]] = True
            rows.append(row)
    rows = np.array(rows, dtype=np.float64)
    empty = np.flatnonzero(rows.sum(axis=1) == 0)
    if len(empty):
        raise ValueError(f"joint patches {empty.tolist()} are empty for this template")
    return JointRegressor(rows / rows.sum(axis=1, keepdims=True))


def load_regressor(path) -> JointRegressor:
    return JointRegressor(np.loadtxt(Path(path), delimiter=",", ndmin=2))


# ------------------------------------------------------------------ losses

def project(vertices, cam: Camera) -> nc.Node:
    v = nc.as_node(vertices)
    xy = nc.slice_cols(v, 0, 2)
    return nc.add(nc.scale(xy, cam.s), np.array([cam.tx, cam.ty]))


def vertex_loss(pred, gt, cam: Camera) -> nc.Node:
    """Sum over vertices of the 3-D L1 error plus the squared 2-D projection error."""
    pred = nc.as_node(pred)
    gt = np.asarray(gt.value if isinstance(gt, nc.Node) else gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"vertex_loss: prediction {pred.shape} vs ground truth {gt.shape}")
    l3 = nc.l1(pred, gt, reduction="sum")
    l2 = nc.mse(project(pred, cam), cam.apply(gt), reduction="sum")
    return nc.add(l3, l2)


def joint_loss(pred, gt, regressor: JointRegressor, cam: Camera) -> nc.Node:
    pred = nc.as_node(pred)
    m = regressor.matrix
    if m.shape[1] != pred.shape[0]:
        raise ShapeError(f"joint_loss: regressor has {m.shape[1]} columns, mesh has {pred.shape[0]} vertices")
    return vertex_loss(nc.matmul(m, pred), m @ np.asarray(gt), cam)


def face_normals(vertices, faces) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals and a mask of faces with nonzero area."""
    v = np.asarray(vertices)
    f = np.asarray(faces)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 1e-15
    unit = np.zeros_like(n)
    unit[ok] = n[ok] / norm[ok, None]
    return unit, ok


@dataclass
class NormalDiagnostics:
    skipped_faces: int = 0


def normal_loss(pred, faces, gt, diagnostics: NormalDiagnostics | None = None) -> nc.Node:
    """Sum of |unit predicted edge . ground-truth face normal| over all face edges.

    Faces whose ground-truth triangle has zero area are skipped and counted
    in ``diagnostics``. Zero-length predicted edges contribute nothing.
    """
    pred = nc.as_node(pred)
    faces = np.asarray(faces)
    normals, ok = face_normals(gt, faces)
    if diagnostics is not None:
        diagnostics.skipped_faces += int((~ok).sum())
    faces, normals = faces[ok], normals[ok]
    terms = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        e = nc.sub(nc.take_rows(pred, faces[:, j]), nc.take_rows(pred, faces[:, i]))
        norms = nc.row_norms(e)
        # a collapsed predicted edge has no direction; it contributes zero instead of 0/0
        e_unit = nc.div(e, nc.add(norms, (norms.value == 0).astype(float)))
        dots = nc.sum(nc.mul(e_unit, normals), axis=1)
        terms.append(nc.sum(nc.absolute(dots)))
    return nc.add(nc.add(terms[0], terms[1]), terms[2])


def edge_loss(pred, edges, gt) -> nc.Node:
    """Sum over edges of the absolute difference of predicted and true edge lengths."""
    pred = nc.as_node(pred)
    edges = np.asarray(edges)
    g = np.asarray(gt)
    gt_len = np.linalg.norm(g[edges[:, 1]] - g[edges[:, 0]], axis=1, keepdims=True)
    e = nc.sub(nc.take_rows(pred, edges[:, 1]), nc.take_rows(pred, edges[:, 0]))
    return nc.l1(nc.row_norms(e), gt_len, reduction="sum")


@dataclass(frozen=True)
class LossWeights:
    vertex: float = 1.0
    joint: float = 1.0
    normal: float = 0.1
    edge: float = 1.0

    def __post_init__(self):
        if min(self.vertex, self.joint, self.normal, self.edge) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossTerms:
    total: nc.Node
    parts: dict[str, float] = field(default_factory=dict)


HANDS = ("left", "right")


def total_loss(prediction, sample, hierarchy, regressor: JointRegressor,
               weights: LossWeights = LossWeights()) -> LossTerms:
    """Weighted sum of the four losses over both hands.

    The vertex loss covers every hierarchy level and the full mesh; the joint,
    normal and edge losses apply to the full mesh.
    """
    faces = hierarchy.template.faces
    edges = hierarchy.template.edges()
    cam = sample.camera
    sums = {"vertex": [], "joint": [], "normal": [], "edge": []}
    for hand in HANDS:
        gt_full = sample.vertices[hand]
        full = prediction.full[hand]
        for t, coords in enumerate(prediction.levels[hand]):
            sums["vertex"].append(vertex_loss(coords, sample.level_vertices[hand][t], cam))
        sums["vertex"].append(vertex_loss(full, gt_full, cam))
        sums["joint"].append(joint_loss(full, gt_full, regressor, cam))
        sums["normal"].append(normal_loss(full, faces, gt_full))
        sums["edge"].append(edge_loss(full, edges, gt_full))
    terms = {}
    for key, nodes in sums.items():
        acc = nodes[0]
        for nd in nodes[1:]:
            acc = nc.add(acc, nd)
        terms[key] = acc
    total = nc.add(
        nc.add(nc.scale(terms["vertex"], weights.vertex), nc.scale(terms["joint"], weights.joint)),
        nc.add(nc.scale(terms["normal"], weights.normal), nc.scale(terms["edge"], weights.edge)),
    )
    return LossTerms(total, {k: v.item() for k, v in terms.items()})
