"""Tetrahedral meshes of k-space regions with iterated longest-edge bisection.

Vertices are addressed by integer ids.  Midpoints are created once per
bisected edge and looked up by the endpoint-id pair, so neighbouring
elements splitting the same edge share the new vertex exactly.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DomainError, HPBandsError, MeshValidationError

EDGE_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
FACE_TRIPLES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))
SCAN_LIMIT = 5000
MAX_CLOSURE_STEPS = 10**6
LOCATE_TOL = 1e-10


def _edge(i, j):
    return (i, j) if i < j else (j, i)


def signed_volume(p):
    p = np.asarray(p, float)
    return np.linalg.det(np.array([p[1] - p[0], p[2] - p[0], p[3] - p[0]])) / 6.0


class TetMesh:
    """Conforming tetrahedral mesh with refinement bookkeeping.

    ``r[t]`` counts every bisection in the ancestry of tet ``t`` (closure
    bisections included).  ``generation`` starts at 1 and grows by one per
    refine call; ``n_iter = generation - 1`` is the number of refinement loops
    and the layer of a live tet is ``n_iter - r[t]``.
    """

    def __init__(self, vertices, tets, generation=1, r=None, validate=True):
        self._verts = [tuple(float(c) for c in v) for v in np.asarray(vertices, float).reshape(-1, 3)]
        tets = [tuple(int(i) for i in t) for t in np.asarray(tets, dtype=int).reshape(-1, 4)]
        self.tets = []
        self.r = []
        self.alive = []
        self.marked = []
        self.parent = []
        self.generation = int(generation)
        self.edge_mid = {}
        self.edge_tets = defaultdict(set)
        self._geom = None
        self._last_hit = 0
        self.last_split = None
        for i, t in enumerate(tets):
            self._add_tet(t, 0 if r is None else int(r[i]), -1)
        self.domain_volume = float(sum(self.volume(t) for t in self.live()))
        self._boundary = self._boundary_faces()
        if validate:
            self._validate_input()

    # basic access

    @property
    def vertices(self):
        return np.array(self._verts)

    @property
    def n_vertices(self):
        return len(self._verts)

    def live(self):
        return [t for t, a in enumerate(self.alive) if a]

    @property
    def n_live(self):
        return sum(self.alive)

    def live_vertex_ids(self):
        ids = set()
        for t in self.live():
            ids.update(self.tets[t])
        return sorted(ids)

    def points(self, t):
        return np.array([self._verts[i] for i in self.tets[t]])

    def volume(self, t):
        return signed_volume(self.points(t))

    def diameter(self, t):
        p = self.points(t)
        return max(np.linalg.norm(p[i] - p[j]) for i, j in EDGE_PAIRS)

    def inradius_diameter(self, t):
        p = self.points(t)
        area = 0.0
        for f in FACE_TRIPLES:
            a, b, c = p[list(f)]
            area += 0.5 * np.linalg.norm(np.cross(b - a, c - a))
        return 6.0 * abs(self.volume(t)) / area

    @property
    def n_iter(self):
        return self.generation - 1

    def layer(self, t):
        return self.n_iter - self.r[t]

    def layers(self):
        return {t: self.layer(t) for t in self.live()}

    def h_initial(self):
        return max(self.diameter(t) for t in range(len(self.tets)) if self.parent[t] < 0)

    def edges_of(self, t):
        v = self.tets[t]
        return [_edge(v[i], v[j]) for i, j in EDGE_PAIRS]

    def faces_of(self, t):
        v = self.tets[t]
        return [tuple(sorted((v[i], v[j], v[k]))) for i, j, k in FACE_TRIPLES]

    # construction

    def _add_tet(self, verts, r, parent):
        tid = len(self.tets)
        self.tets.append(tuple(verts))
        self.r.append(r)
        self.alive.append(True)
        self.marked.append(False)
        self.parent.append(parent)
        for e in self.edges_of(tid):
            self.edge_tets[e].add(tid)
        self._geom = None
        return tid

    def _kill(self, t):
        self.alive[t] = False
        for e in self.edges_of(t):
            s = self.edge_tets[e]
            s.discard(t)
            if not s:
                del self.edge_tets[e]
        self._geom = None

    def _boundary_faces(self):
        count = defaultdict(int)
        for t in self.live():
            for f in self.faces_of(t):
                count[f] += 1
        out = []
        for f, c in sorted(count.items()):
            if c == 1:
                p = np.array([self._verts[i] for i in f])
                n = np.cross(p[1] - p[0], p[2] - p[0])
                out.append((p, n / np.linalg.norm(n)))
        return out

    def _validate_input(self):
        tol = 1e-14 * max(self.domain_volume, 1e-300)
        for t in self.live():
            v = self.volume(t)
            if not v > tol:
                raise MeshValidationError(f"tet {t} {self.tets[t]} is inverted or degenerate (volume {v:.3e})")
        rep = check_conformity(self)
        if rep["defects"]:
            raise MeshValidationError(f"initial mesh is not conforming: {rep['defects'][:3]}")

    # refinement

    def longest_edge(self, t):
        cands = []
        for e in self.edges_of(t):
            a, b = np.array(self._verts[e[0]]), np.array(self._verts[e[1]])
            cands.append((float(np.linalg.norm(b - a)), e))
        best_len = max(c[0] for c in cands)
        ties = [e for L, e in cands if L >= best_len * (1 - 1e-10)]
        return min(ties)

    def midpoint(self, e):
        m = self.edge_mid.get(e)
        if m is None:
            a, b = np.array(self._verts[e[0]]), np.array(self._verts[e[1]])
            self._verts.append(tuple(0.5 * (a + b)))
            m = len(self._verts) - 1
            self.edge_mid[e] = m
        return m

    def bisect(self, t):
        """Split live tet ``t`` at the midpoint of its longest edge; returns the child ids."""
        if not self.alive[t]:
            raise HPBandsError(f"tet {t} is not alive")
        e = self.longest_edge(t)
        m = self.midpoint(e)
        v = list(self.tets[t])
        ia, ib = v.index(e[0]), v.index(e[1])
        c1, c2 = list(v), list(v)
        c1[ib] = m
        c2[ia] = m
        self._kill(t)
        self.last_split = e
        k1 = self._add_tet(c1, self.r[t] + 1, t)
        k2 = self._add_tet(c2, self.r[t] + 1, t)
        return k1, k2

    def _hanging(self, t):
        return any(e in self.edge_mid for e in self.edges_of(t))

    def refine(self, marked):
        """Bisect every marked tet, then close the mesh; advances the generation."""
        marked = sorted(set(int(t) for t in marked))
        for t in marked:
            if not (0 <= t < len(self.tets)) or not self.alive[t]:
                raise ConfigError(f"tet {t} is not a live element")
        queue = []
        for t in marked:
            if self.alive[t]:
                queue.extend(self.bisect(t))
                queue.extend(sorted(self.edge_tets.get(self.last_split, ())))
        steps = 0
        while queue:
            t = queue.pop()
            if not self.alive[t] or not self._hanging(t):
                continue
            steps += 1
            if steps > MAX_CLOSURE_STEPS:
                raise HPBandsError("conformity closure did not terminate")
            queue.extend(self.bisect(t))
            queue.extend(sorted(self.edge_tets.get(self.last_split, ())))
        self.generation += 1
        return self

    # geometry cache for point location

    def _geometry(self):
        if self._geom is None:
            ids = np.array(self.live(), dtype=int)
            P = np.array([self.points(t) for t in ids])
            A = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0], P[:, 3] - P[:, 0]], axis=2)
            self._geom = (ids, P[:, 0].copy(), np.linalg.inv(A), {int(t): i for i, t in enumerate(ids)})
        return self._geom

    def barycentric(self, t, k):
        p = self.points(t)
        A = np.column_stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])
        s = np.linalg.solve(A, np.asarray(k, float) - p[0])
        return np.concatenate([[1.0 - s.sum()], s])

    def _scan(self, k):
        ids, v0, Ainv, _ = self._geometry()
        best_t, best_b, best_min = None, None, -np.inf
        for lo in range(0, len(ids), 4096):
            s = np.einsum("tij,tj->ti", Ainv[lo:lo + 4096], k - v0[lo:lo + 4096])
            b = np.column_stack([1.0 - s.sum(axis=1), s])
            mins = b.min(axis=1)
            i = int(np.argmax(mins))
            if mins[i] > best_min:
                best_min, best_t, best_b = mins[i], int(ids[lo + i]), b[i]
        return best_t, best_b, best_min

    def _walk(self, k, start):
        ids, v0, Ainv, index = self._geometry()
        t = start
        seen = set()
        face_nb = self._face_neighbours()
        for _ in range(len(ids)):
            i = index[t]
            s = Ainv[i] @ (k - v0[i])
            b = np.concatenate([[1.0 - s.sum()], s])
            if b.min() >= -LOCATE_TOL:
                return t, b, b.min()
            seen.add(t)
            j = int(np.argmin(b))
            nxt = face_nb.get((t, j))
            if nxt is None or nxt in seen:
                return None
            t = nxt
        return None

    def _face_neighbours(self):
        cache = getattr(self, "_fn_cache", None)
        if cache is not None and cache[0] is self._geom:
            return cache[1]
        owners = defaultdict(list)
        for t in self.live():
            v = self.tets[t]
            for j in range(4):
                f = tuple(sorted(v[:j] + v[j + 1:]))
                owners[f].append((t, j))
        nb = {}
        for lst in owners.values():
            if len(lst) == 2:
                (t1, j1), (t2, j2) = lst
                nb[(t1, j1)] = t2
                nb[(t2, j2)] = t1
        self._fn_cache = (self._geom, nb)
        return nb

    def locate(self, k):
        """(live tet id, barycentric coordinates in the tet's vertex order) for point ``k``."""
        k = np.asarray(k, dtype=float).reshape(3)
        ids = self._geometry()[0]
        hit = None
        if len(ids) >= SCAN_LIMIT:
            start = self._last_hit if (self._last_hit < len(self.alive) and self.alive[self._last_hit]) else int(ids[0])
            hit = self._walk(k, start)
        if hit is None:
            hit = self._scan(k)
        t, b, bmin = hit
        if t is None or bmin < -LOCATE_TOL:
            raise DomainError(f"point {k.tolist()} lies outside the mesh")
        self._last_hit = t
        return t, b

    # serialization

    def to_dict(self):
        live = self.live()
        return {
            "vertices": [list(v) for v in self._verts],
            "tets": [list(self.tets[t]) for t in live],
            "refinements": [self.r[t] for t in live],
            "layers": [self.layer(t) for t in live],
            "marks": [bool(self.marked[t]) for t in live],
            "generation": self.generation,
            "domain_volume": self.domain_volume,
        }

    @classmethod
    def from_dict(cls, d):
        mesh = cls(d["vertices"], d["tets"], generation=d["generation"], r=d.get("refinements"), validate=False)
        for t, m in enumerate(d.get("marks", [])):
            mesh.marked[t] = bool(m)
        if "domain_volume" in d:
            mesh.domain_volume = float(d["domain_volume"])
        return mesh

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# domain builders

def _oriented(P, tets):
    out = []
    for t in tets:
        t = list(t)
        if signed_volume(P[t]) < 0:
            t[2], t[3] = t[3], t[2]
        out.append(t)
    return out


def ibz_sc_full_sym(a=1.0):
    """Single tetrahedron Gamma-X-M-R of the simple cubic lattice."""
    p = math.pi / a
    P = np.array([[0, 0, 0], [p, 0, 0], [p, p, 0], [p, p, p]], float)
    return TetMesh(P, _oriented(P, [[0, 1, 2, 3]]))


def ibz_sc_xy_sym(a=1.0):
    """Prism 0 <= ky <= kx <= pi/a, 0 <= kz <= pi/a as three tetrahedra."""
    p = math.pi / a
    # Gamma, X, M, Z, (pi,0,pi), R
    P = np.array([[0, 0, 0], [p, 0, 0], [p, p, 0], [0, 0, p], [p, 0, p], [p, p, p]], float)
    return TetMesh(P, _oriented(P, [[0, 1, 2, 5], [0, 1, 4, 5], [0, 3, 4, 5]]))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    """Axis-aligned box split into the six Kuhn tetrahedra around the main diagonal."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if np.any(hi <= lo):
        raise ConfigError("box needs hi > lo in every coordinate")
    P = np.array([[lo[0] if i == 0 else hi[0], lo[1] if j == 0 else hi[1], lo[2] if k == 0 else hi[2]]
                  for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    tets = []
    for perm in itertools.permutations(range(3)):
        c = [0, 0, 0]
        chain = [0]
        for ax in perm:
            c[ax] = 1
            chain.append(4 * c[0] + 2 * c[1] + c[2])
        tets.append(chain)
    return TetMesh(P, _oriented(P, tets))


def build_initial_mesh(domain, a=1.0, lo=None, hi=None, vertices=None, tets=None):
    if domain == "ibz_sc_full_sym":
        return ibz_sc_full_sym(a)
    if domain == "ibz_sc_xy_sym":
        return ibz_sc_xy_sym(a)
    if domain == "box":
        return box_mesh(lo if lo is not None else (0, 0, 0), hi if hi is not None else (1, 1, 1))
    if domain == "explicit":
        if vertices is None or tets is None:
            raise ConfigError("explicit domain needs vertices and tets")
        return TetMesh(vertices, tets)
    raise ConfigError(f"unknown domain {domain!r}")


def refine_marked(mesh, marked):
    return mesh.refine(marked)


def bisect_element(mesh, t):
    return mesh.bisect(t)


def locate_point(mesh, k):
    return mesh.locate(k)


def check_conformity(mesh, tol=1e-10):
    """Defect report: bad face multiplicities, hanging vertices, orientation; max h/rho."""
    defects = []
    live = mesh.live()
    V = mesh.vertices
    scale = max(np.ptp(V, axis=0).max(), 1e-300)
    count = defaultdict(int)
    for t in live:
        for f in mesh.faces_of(t):
            count[f] += 1
    for f, c in count.items():
        if c > 2:
            defects.append(("face_multiplicity", f, c))
        elif c == 1 and not _on_boundary(V[list(f)], mesh._boundary, tol * scale):
            defects.append(("unmatched_face", f, c))
    used = sorted({i for t in live for i in mesh.tets[t]})
    tree = cKDTree(V[used])
    for f in count:
        P = V[list(f)]
        c = P.mean(axis=0)
        rad = max(np.linalg.norm(P - c, axis=1))
        for j in tree.query_ball_point(c, rad * (1 + 1e-9)):
            v = used[j]
            if v in f:
                continue
            where = _strictly_inside_triangle(V[v], P, tol * scale)
            if where:
                defects.append(("hanging_vertex", v, f, where))
    for t in live:
        if mesh.volume(t) <= 1e-14 * mesh.domain_volume:
            defects.append(("inverted", t))
    ratio = max((mesh.diameter(t) / mesh.inradius_diameter(t) for t in live), default=0.0)
    # a hanging vertex on an edge is reported once per face containing that edge
    seen, unique = set(), []
    for d in defects:
        key = (d[0], d[1]) if d[0] == "hanging_vertex" else d
        if key not in seen:
            seen.add(key)
            unique.append(d)
    return {"defects": unique, "max_shape_ratio": float(ratio), "n_tets": len(live)}


def _strictly_inside_triangle(x, P, tol):
    a, b, c = P
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n)
    if abs((x - a) @ n) / nn > tol:
        return None
    # barycentrics within the plane
    T = np.column_stack([b - a, c - a])
    s, *_ = np.linalg.lstsq(T, x - a, rcond=None)
    w = np.array([1 - s.sum(), s[0], s[1]])
    edge_scale = tol / max(np.linalg.norm(b - a), np.linalg.norm(c - a))
    if np.any(w < -edge_scale):
        return None
    inner = w > edge_scale
    if inner.sum() == 3:
        return "face"
    if inner.sum() == 2:
        return "edge"
    return None


def _on_boundary(P, boundary, tol):
    for Q, n in boundary:
        if np.all(np.abs((P - Q[0]) @ n) <= tol):
            ok = True
            for x in P:
                T = np.column_stack([Q[1] - Q[0], Q[2] - Q[0]])
                s, *_ = np.linalg.lstsq(T, x - Q[0], rcond=None)
                w = np.array([1 - s.sum(), s[0], s[1]])
                if np.any(w < -1e-9):
                    ok = False
                    break
            if ok:
                return True
    return False


def element_geometry(mesh, t):
    """Affine data of tet ``t``: A, b with x = A xhat + b mapping the reference tet."""
    p = mesh.points(t)
    A = np.column_stack([p[0] - p[3], p[1] - p[3], p[2] - p[3]])
    return {
        "A": A,
        "b": p[3].copy(),
        "h": mesh.diameter(t),
        "rho": mesh.inradius_diameter(t),
        "vertices": list(mesh.tets[t]),
        "edges": mesh.edges_of(t),
        "faces": mesh.faces_of(t),
    }


C_CONST = (3.0 + math.sqrt(3.0)) / math.sqrt(2.0)
