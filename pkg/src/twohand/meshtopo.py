"""Template meshes and the coarse-to-fine hierarchy built on them.

The hierarchy is produced by greedy heavy-edge matching (the Graclus/Metis
matching step): vertices are visited by ascending degree and each is merged
with the unmatched neighbour of largest normalized-cut weight
``w_ij * (1/d_i + 1/d_j)``. Passes repeat on the contracted graph until the
level reaches its exact target size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (DisconnectedGraphError, MeshError, MeshFormatError,
                     MeshIndexError, NonManifoldError)

FULL_SIZE = 778
FULL_LEVELS = (63, 126, 252)
DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class TemplateMesh:
    vertices: np.ndarray  # (N, 3) metres
    faces: np.ndarray  # (F, 3) zero-based

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edges(self) -> np.ndarray:
        return self._edges

    @cached_property
    def _edges(self) -> np.ndarray:
        return unique_edges(self.faces)


def unique_edges(faces) -> np.ndarray:
    """Sorted undirected edge list (E, 2) of a triangle list."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def validate_mesh(vertices, faces) -> None:
    n = len(vertices)
    if faces.size and (faces.min() < 0 or faces.max() >= n):
        bad = int(faces.max()) if faces.max() >= n else int(faces.min())
        raise MeshIndexError(f"face index {bad} out of range for {n} vertices")
    for f in faces:
        if len(set(f.tolist())) < 3:
            raise MeshError(f"degenerate face {f.tolist()}")
    if len(faces):
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        if counts.max() > 2:
            i = int(np.argmax(counts))
            raise NonManifoldError(
                f"edge {uniq[i].tolist()} is shared by {counts[i]} faces")


_IGNORED = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l"}


def parse_obj(text: str) -> TemplateMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                if len(rest) < 3:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(x) for x in rest[:3]])
            elif tag == "f":
                if len(rest) != 3:
                    raise ValueError(f"only triangles are supported, got {len(rest)} indices")
                faces.append([int(tok.split("/")[0]) - 1 for tok in rest])
            elif tag not in _IGNORED:
                raise ValueError(f"unknown record {tag!r}")
        except ValueError as exc:
            raise MeshFormatError(f"line {lineno}: {exc}") from None
    if not verts:
        raise MeshFormatError("no vertices")
    v = np.array(verts, dtype=np.float64)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    validate_mesh(v, f)
    return TemplateMesh(v, f)


def load_template(path) -> TemplateMesh:
    return parse_obj(Path(path).read_text())


def obj_text(vertices, faces, header: str | None = None) -> str:
    lines = [f"# {h}" for h in (header.splitlines() if header else [])]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    return "\n".join(lines) + "\n"


def save_obj(path, vertices, faces, header: str | None = None) -> None:
    Path(path).write_text(obj_text(vertices, faces, header))


def bundled_template(name: str = "full") -> TemplateMesh:
    """The procedurally generated hands shipped with the package.

    ``"full"`` has the 778-vertex count of the MANO topology; ``"small"``
    has 197 vertices and coarsens to 16/32/64.
    """
    files = {"full": "synthetic_hand_778.obj", "small": "synthetic_hand_197.obj"}
    if name not in files:
        raise ValueError(f"unknown bundled template {name!r}; choose from {sorted(files)}")
    return load_template(DATA_DIR / files[name])


# ------------------------------------------------------------------ graphs

def adjacency_from_faces(faces, n: int) -> np.ndarray:
    a = np.zeros((n, n))
    e = unique_edges(faces)
    a[e[:, 0], e[:, 1]] = 1.0
    a[e[:, 1], e[:, 0]] = 1.0
    return a


def components(adjacency) -> list[np.ndarray]:
    n, labels = connected_components(csr_matrix(adjacency), directed=False)
    return [np.flatnonzero(labels == k) for k in range(n)]


def scaled_laplacian(adjacency, lmax: float = 2.0) -> np.ndarray:
    """Chebyshev-domain Laplacian ``(2/lmax) * (I - D^-1/2 A D^-1/2) - I``.

    A zero-degree vertex takes degree 1 in the normalization, so its row of
    the normalized adjacency is empty and its diagonal entry becomes
    ``2/lmax - 1``.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not np.allclose(a, a.T, atol=0, rtol=0):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency must not contain self-loops")
    d = a.sum(axis=1)
    d = np.where(d > 0, d, 1.0)
    dm = 1.0 / np.sqrt(d)
    n = len(a)
    lsym = np.eye(n) - dm[:, None] * a * dm[None, :]
    lhat = (2.0 / lmax) * lsym - np.eye(n)
    return 0.5 * (lhat + lhat.T)


def level_sizes(n_vertices: int) -> tuple[int, int, int]:
    """Level sizes scaled from 63/126/252 for a 778-vertex mesh."""
    n2 = int(math.floor(n_vertices * FULL_LEVELS[2] / FULL_SIZE + 0.5))
    n1 = int(math.floor(n2 / 2 + 0.5))
    n0 = int(math.floor(n1 / 2 + 0.5))
    return n0, n1, n2


def matching_pass(w: np.ndarray, target: int) -> np.ndarray:
    """One greedy heavy-edge matching sweep; stops as soon as ``target`` clusters remain.

    Returns the cluster id of every vertex. Unmatched vertices become
    singleton clusters (their fake partner is discarded).
    """
    n = len(w)
    deg = w.sum(axis=1)
    safe = np.where(deg > 0, deg, 1.0)
    order = np.lexsort((np.arange(n), deg))
    assign = np.full(n, -1, dtype=np.int64)
    count = n
    nxt = 0
    for i in order:
        if assign[i] >= 0:
            continue
        assign[i] = nxt
        if count > target:
            nbrs = np.flatnonzero((w[i] > 0) & (assign < 0))
            nbrs = nbrs[nbrs != i]
            if len(nbrs):
                score = w[i, nbrs] * (1.0 / safe[i] + 1.0 / safe[nbrs])
                best = nbrs[np.flatnonzero(score == score.max())[0]]
                assign[best] = nxt
                count -= 1
        nxt += 1
    return assign


def contract(w: np.ndarray, assign: np.ndarray) -> np.ndarray:
    m = int(assign.max()) + 1
    p = np.zeros((len(w), m))
    p[np.arange(len(w)), assign] = 1.0
    wc = p.T @ w @ p
    np.fill_diagonal(wc, 0.0)
    return wc


def coarsen_graph(w: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Repeat matching passes until exactly ``target`` clusters remain."""
    n = len(w)
    if target > n:
        raise ValueError(f"cannot coarsen {n} vertices up to {target}")
    assign = np.arange(n)
    while int(assign.max()) + 1 > target:
        step = matching_pass(w, target)
        if step.max() + 1 == len(w):
            raise MeshError("matching made no progress; graph has no edges left to merge")
        assign = step[assign]
        w = contract(w, step)
    return assign, w


@dataclass(frozen=True)
class MeshHierarchy:
    """Coarse-to-fine levels of one hand template.

    ``assign[t]`` maps every template vertex to its cluster at level ``t``;
    ``parents[t]`` maps level ``t + 1`` vertices to their level ``t`` parent;
    ``up_ops[t]`` is the (N_{t+1}, N_t) interpolation from level ``t``.
    Level 2 maps to the template through ``final_up_init``.
    """
    template: TemplateMesh
    sizes: tuple[int, ...]
    adjacency: tuple[np.ndarray, ...]
    laplacians: tuple[np.ndarray, ...]
    faces: tuple[np.ndarray, ...]
    positions: tuple[np.ndarray, ...]
    assign: tuple[np.ndarray, ...]
    parents: tuple[np.ndarray, ...]
    up_ops: tuple[np.ndarray, ...]
    final_up_init: np.ndarray

    @property
    def n_levels(self) -> int:
        return len(self.sizes)

    def pool(self, fine_values, level: int) -> np.ndarray:
        """Average template-resolution rows over each level-``level`` cluster."""
        return cluster_mean(np.asarray(fine_values), self.assign[level], self.sizes[level])

    def stats(self) -> dict[str, object]:
        out: dict[str, object] = {"template_vertices": self.template.n_vertices,
                                  "template_faces": len(self.template.faces)}
        for t, size in enumerate(self.sizes):
            eig = np.linalg.eigvalsh(self.laplacians[t])
            out[f"level{t}.vertices"] = size
            out[f"level{t}.edges"] = int(self.adjacency[t].sum() // 2)
            out[f"level{t}.faces"] = len(self.faces[t])
            out[f"level{t}.laplacian_min_eig"] = float(eig.min())
            out[f"level{t}.laplacian_max_eig"] = float(eig.max())
            counts = np.bincount(self.assign[t], minlength=size)
            out[f"level{t}.cluster_size_max"] = int(counts.max())
        return out


def cluster_mean(values: np.ndarray, assign: np.ndarray, m: int) -> np.ndarray:
    sums = np.zeros((m,) + values.shape[1:])
    np.add.at(sums, assign, values)
    counts = np.bincount(assign, minlength=m).astype(np.float64)
    return sums / counts.reshape((m,) + (1,) * (values.ndim - 1))


def _parent_matrix(child_to_parent: np.ndarray, n_parent: int) -> np.ndarray:
    up = np.zeros((len(child_to_parent), n_parent))
    up[np.arange(len(child_to_parent)), child_to_parent] = 1.0
    return up


def _level_faces(faces: np.ndarray, assign: np.ndarray) -> np.ndarray:
    mapped = assign[faces]
    keep = (mapped[:, 0] != mapped[:, 1]) & (mapped[:, 1] != mapped[:, 2]) & (mapped[:, 0] != mapped[:, 2])
    mapped = mapped[keep]
    if not len(mapped):
        return np.zeros((0, 3), dtype=np.int64)
    _, first = np.unique(np.sort(mapped, axis=1), axis=0, return_index=True)
    return mapped[np.sort(first)]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def coarsen(mesh: TemplateMesh, levels: int = 3, sizes=None) -> MeshHierarchy:
    if levels != 3:
        raise ValueError("only 3-level hierarchies are supported")
    n = mesh.n_vertices
    sizes = tuple(sizes) if sizes is not None else level_sizes(n)
    if len(sizes) != levels or not all(0 < sizes[t] < sizes[t + 1] for t in range(levels - 1)) \
            or sizes[-1] > n:
        raise ValueError(f"invalid level sizes {sizes} for {n} vertices")
    w = adjacency_from_faces(mesh.faces, n)
    comps = components(w)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)

    # finest level first, then each coarser level from the one above it
    assign = [None] * levels
    parents = [None] * (levels - 1)
    a_fine, w_level = coarsen_graph(w, sizes[-1])
    assign[-1] = a_fine
    for t in range(levels - 2, -1, -1):
        step, w_level = coarsen_graph(w_level, sizes[t])
        parents[t] = step
        assign[t] = step[assign[t + 1]]

    adjacency, laplacians, faces, positions = [], [], [], []
    for t in range(levels):
        f_t = _level_faces(mesh.faces, assign[t])
        a_t = np.zeros((sizes[t], sizes[t]))
        e = np.stack([assign[t][mesh.edges()[:, 0]], assign[t][mesh.edges()[:, 1]]], axis=1)
        e = e[e[:, 0] != e[:, 1]]
        a_t[e[:, 0], e[:, 1]] = 1.0
        a_t[e[:, 1], e[:, 0]] = 1.0
        adjacency.append(_frozen(a_t))
        laplacians.append(_frozen(scaled_laplacian(a_t)))
        faces.append(_frozen(f_t))
        positions.append(_frozen(cluster_mean(mesh.vertices, assign[t], sizes[t])))
    up_ops = [_frozen(_parent_matrix(parents[t], sizes[t])) for t in range(levels - 1)]
    return MeshHierarchy(
        template=mesh,
        sizes=sizes,
        adjacency=tuple(adjacency),
        laplacians=tuple(laplacians),
        faces=tuple(faces),
        positions=tuple(positions),
        assign=tuple(_frozen(a) for a in assign),
        parents=tuple(_frozen(p) for p in parents),
        up_ops=tuple(up_ops),
        final_up_init=_frozen(_parent_matrix(assign[-1], sizes[-1])),
    )


# -------------------------------------------------------- matching encoding

@dataclass(frozen=True)
class DenseMatchingEncoding:
    colors: tuple[np.ndarray, ...]  # one (N_t, 3) array per level, then the template

    def level(self, t: int) -> np.ndarray:
        return self.colors[t]

    @property
    def full(self) -> np.ndarray:
        return self.colors[-1]


def normalized_coordinates(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    lo, hi = p.min(axis=0), p.max(axis=0)
    ext = hi - lo
    out = np.full_like(p, 0.5)
    ok = ext > 0
    out[:, ok] = (p[:, ok] - lo[ok]) / ext[ok]
    return out


def dense_matching_encoding(hierarchy: MeshHierarchy) -> DenseMatchingEncoding:
    cols = [normalized_coordinates(p) for p in hierarchy.positions]
    cols.append(normalized_coordinates(hierarchy.template.vertices))
    return DenseMatchingEncoding(tuple(_frozen(c) for c in cols))


# ---------------------------------------------------- procedural template

def _half_width(u):
    # narrow wrist, broad palm, rounded fingertip end
    base = 0.030 + 0.014 * np.clip(u / 0.25, 0.0, 1.0) - 0.010 * np.clip((u - 0.5) / 0.5, 0.0, 1.0)
    tip = np.clip(1.0 - ((u - 0.80) / 0.20) ** 2, 0.0, 1.0)
    return base * np.where(u > 0.80, tip, 1.0)


def _half_thickness(u):
    base = 0.016 - 0.004 * np.clip((u - 0.4) / 0.6, 0.0, 1.0)
    tip = np.clip(1.0 - ((u - 0.80) / 0.20) ** 2, 0.0, 1.0)
    return base * np.where(u > 0.80, tip, 1.0)


def synthetic_hand(rings: int, segments: int, length: float = 0.19) -> TemplateMesh:
    """Flattened tube open at the wrist and closed by an apex at the fingertips.

    The vertex count is ``rings * segments + 1``; the long axis is +y and the
    palm width runs along x.
    """
    u = np.arange(rings) / rings
    phi = 2.0 * np.pi * np.arange(segments) / segments
    a = _half_width(u)[:, None]
    b = _half_thickness(u)[:, None]
    x = a * np.cos(phi)[None, :]
    z = b * np.sin(phi)[None, :]
    y = np.broadcast_to((length * u)[:, None], x.shape)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    apex = np.array([[0.0, length, 0.0]])
    verts = np.concatenate([verts, apex])

    def vid(r, s):
        return r * segments + s % segments

    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            faces.append([vid(r, s), vid(r, s + 1), vid(r + 1, s + 1)])
            faces.append([vid(r, s), vid(r + 1, s + 1), vid(r + 1, s)])
    top = rings * segments
    for s in range(segments):
        faces.append([vid(rings - 1, s), vid(rings - 1, s + 1), top])
    return TemplateMesh(verts, np.array(faces, dtype=np.int64))
