"""Variable-degree continuous interpolation on tetrahedral meshes.

Reference tetrahedron: vertices z1=(1,0,0), z2=(0,1,0), z3=(0,0,1), z4=0
with hat functions N1=x, N2=y, N3=z, N4=1-x-y-z.  Everything below works
in barycentric coordinates L = (N1, N2, N3, N4).

Local basis, in this order:
  nodal     N_i
  edge      N_j N_k (N_k - N_j)^(v-2),  v = 2..q_jk, edges (j, k) with j > k
  face      N_a N_b N_c (N_b - N_a)^s (N_c - N_a)^t,  s + t <= p - 3
  internal  N1 N2 N3 N4 (N1-N4)^a (N2-N4)^b (N3-N4)^c,  a + b + c <= n - 4

Elements are mapped with their vertices in ascending global id order, so
neighbours see shared edges and faces with identical local orientation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import ConditioningError, ConfigError

# local edges (j, k), j > k, zero-based
EDGES = ((1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2))
# face i is opposite vertex i; its vertices in ascending order
FACES = tuple(tuple(v for v in range(4) if v != i) for i in range(4))
DEGREE_CAP = 8
COND_LIMIT = 1e12


# ---------------------------------------------------------------- 1D nodes

def _legendre(n, x):
    """P_n(x) and P_n'(x) by the three-term recurrence."""
    p0, p1 = np.ones_like(x), x.copy()
    if n == 0:
        return p0, np.zeros_like(x)
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    return p1, dp


@lru_cache(maxsize=None)
def _lobatto_interior(n):
    """Zeros of P_n' in (-1, 1), ascending, by Newton with deflation."""
    if n < 2:
        return ()
    roots = []
    for i in range(1, n):
        x = -math.cos(math.pi * i / n)
        for _ in range(100):
            p, dp = _legendre(n, np.array([x]))
            p, dp = float(p[0]), float(dp[0])
            # P'' from the Legendre equation
            d2p = (2.0 * x * dp - n * (n + 1) * p) / (1.0 - x * x)
            defl = sum(1.0 / (x - r) for r in roots)
            step = dp / (d2p - dp * defl)
            x -= step
            if abs(step) < 1e-16:
                break
        roots.append(x)
    roots = np.sort(np.array(roots))
    # exact mirror symmetry
    roots = 0.5 * (roots - roots[::-1])
    return tuple(roots)


def lobatto_nodes(n):
    """n+1 Gauss-Lobatto nodes on [0, 1]: 0, (1+t_i)/2 for zeros t_i of P_n', 1."""
    if n < 1:
        raise ConfigError("lobatto_nodes needs n >= 1")
    t = np.array(_lobatto_interior(n))
    return np.concatenate([[0.0], 0.5 * (1.0 + t), [1.0]])


# ---------------------------------------------------------------- signatures

@dataclass(frozen=True)
class Signature:
    """Degrees of one element: total n, face p[i] (opposite vertex i), edge q[e] (EDGES order)."""

    n: int
    p: tuple
    q: tuple

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(int(v) for v in self.p))
        object.__setattr__(self, "q", tuple(int(v) for v in self.q))
        if len(self.p) != 4 or len(self.q) != 6:
            raise ConfigError("signature needs 4 face and 6 edge degrees")
        if min(self.q) < 1:
            raise ConfigError("degrees must be >= 1")
        for i, face in enumerate(FACES):
            if self.p[i] > self.n:
                raise ConfigError(f"face degree {self.p[i]} exceeds total degree {self.n}")
            for e, (j, k) in enumerate(EDGES):
                if j in face and k in face and self.q[e] > self.p[i]:
                    raise ConfigError(f"edge degree {self.q[e]} exceeds face degree {self.p[i]}")

    @classmethod
    def uniform(cls, n):
        return cls(n, (n,) * 4, (n,) * 6)

    def dim(self):
        return (4 + sum(q - 1 for q in self.q) + sum(math.comb(p - 1, 2) for p in self.p)
                + math.comb(self.n - 1, 3))


def _face_exponents(p):
    return [(s, d - s) for d in range(p - 2) for s in range(d, -1, -1)]


def _internal_exponents(n):
    out = []
    for d in range(n - 3):
        for a in range(d, -1, -1):
            for b in range(d - a, -1, -1):
                out.append((a, b, d - a - b))
    return out


def _compositions(total, parts, lo=2):
    """Index tuples >= lo with the given sum, lexicographic."""
    if parts == 1:
        return [(total,)] if total >= lo else []
    out = []
    for first in range(lo, total - lo * (parts - 1) + 1):
        out.extend((first,) + rest for rest in _compositions(total - first, parts - 1, lo))
    return out


# ---------------------------------------------------------------- points

def edge_point_weights(q):
    """(q-1, 2) weights (N_j, N_k) of the interior points of an edge of degree q."""
    v = lobatto_nodes(q)[1:-1]
    return np.column_stack([v, 1.0 - v])


def face_point_indices(p):
    return _compositions(p + 3, 3)


def face_point_weights(p):
    """(C(p-1,2), 3) weights on the ascending face vertices."""
    if p < 3:
        return np.zeros((0, 3))
    v = np.concatenate([[0.0], lobatto_nodes(p)])  # 1-based
    out = []
    for i, j, k in face_point_indices(p):
        a = (1.0 + 2.0 * v[i] - v[j] - v[k]) / 3.0
        b = (1.0 - v[i] + 2.0 * v[j] - v[k]) / 3.0
        out.append((a, b, 1.0 - a - b))
    return np.array(out)


def internal_point_indices(n):
    return _compositions(n + 4, 4)


def internal_point_weights(n):
    """(C(n-1,3), 4) barycentric coordinates of the internal points."""
    if n < 4:
        return np.zeros((0, 4))
    v = np.concatenate([[0.0], lobatto_nodes(n)])
    out = []
    for i, j, k, l in internal_point_indices(n):
        x = (1.0 + 3.0 * v[i] - v[j] - v[k] - v[l]) / 4.0
        y = (1.0 - v[i] + 3.0 * v[j] - v[k] - v[l]) / 4.0
        z = (1.0 - v[i] - v[j] + 3.0 * v[k] - v[l]) / 4.0
        out.append((x, y, z, 1.0 - x - y - z))
    return np.array(out)


@lru_cache(maxsize=4096)
def reference_points(sig: Signature):
    """Barycentric points (N, 4) and their partition labels, matching the basis order."""
    pts, labels = [], []
    for i in range(4):
        L = np.zeros(4)
        L[i] = 1.0
        pts.append(L)
        labels.append(("vertex", i, (i,)))
    for e, (j, k) in enumerate(EDGES):
        for nu, (wj, wk) in enumerate(edge_point_weights(sig.q[e])):
            L = np.zeros(4)
            L[j], L[k] = wj, wk
            pts.append(L)
            labels.append(("edge", e, (nu,)))
    for i, face in enumerate(FACES):
        for idx, w in zip(face_point_indices(sig.p[i]), face_point_weights(sig.p[i])):
            L = np.zeros(4)
            L[list(face)] = w
            pts.append(L)
            labels.append(("face", i, idx))
    for idx, L in zip(internal_point_indices(sig.n), internal_point_weights(sig.n)):
        pts.append(np.asarray(L))
        labels.append(("internal", 0, idx))
    P = np.array(pts)
    P.setflags(write=False)
    return P, tuple(labels)


def bary_to_xyz(L):
    return np.asarray(L)[..., :3]


def xyz_to_bary(x):
    x = np.asarray(x, float)
    return np.concatenate([x, 1.0 - x.sum(axis=-1, keepdims=True)], axis=-1)


# ---------------------------------------------------------------- basis

def basis_eval(sig: Signature, L):
    """Basis values (P, dim) at barycentric points L (P, 4)."""
    L = np.atleast_2d(np.asarray(L, float))
    cols = [L[:, i] for i in range(4)]
    for e, (j, k) in enumerate(EDGES):
        base = L[:, j] * L[:, k]
        d = L[:, k] - L[:, j]
        for nu in range(2, sig.q[e] + 1):
            cols.append(base * d ** (nu - 2))
    for i, (a, b, c) in enumerate(FACES):
        bub = L[:, a] * L[:, b] * L[:, c]
        u, w = L[:, b] - L[:, a], L[:, c] - L[:, a]
        for s, t in _face_exponents(sig.p[i]):
            cols.append(bub * u**s * w**t)
    bub = L[:, 0] * L[:, 1] * L[:, 2] * L[:, 3]
    d1, d2, d3 = L[:, 0] - L[:, 3], L[:, 1] - L[:, 3], L[:, 2] - L[:, 3]
    for a, b, c in _internal_exponents(sig.n):
        cols.append(bub * d1**a * d2**b * d3**c)
    return np.column_stack(cols)


def basis_partition(sig: Signature):
    """Slices of the basis (and point) vector: nodal, per-edge, per-face, internal."""
    out = {"nodal": slice(0, 4)}
    pos = 4
    for e in range(6):
        out[("edge", e)] = slice(pos, pos + sig.q[e] - 1)
        pos += sig.q[e] - 1
    for i in range(4):
        m = math.comb(sig.p[i] - 1, 2)
        out[("face", i)] = slice(pos, pos + m)
        pos += m
    out["internal"] = slice(pos, pos + math.comb(sig.n - 1, 3))
    return out


@lru_cache(maxsize=None)
def _edge_block(q):
    W = edge_point_weights(q)
    v, u = W[:, 0], W[:, 1]
    A = np.column_stack([v * u * (u - v) ** (nu - 2) for nu in range(2, q + 1)]).reshape(q - 1, q - 1)
    return _factor(A, f"edge degree {q}")


@lru_cache(maxsize=None)
def _face_block(p):
    W = face_point_weights(p)
    a, b, c = W[:, 0], W[:, 1], W[:, 2]
    bub = a * b * c
    A = np.column_stack([bub * (b - a) ** s * (c - a) ** t for s, t in _face_exponents(p)])
    return _factor(A, f"face degree {p}")


@lru_cache(maxsize=None)
def _internal_block(n):
    L = internal_point_weights(n)
    sig = Signature(n, (2,) * 4, (2,) * 6)
    A = basis_eval(sig, L)[:, basis_partition(sig)["internal"]]
    return _factor(A, f"total degree {n}")


def _factor(A, what):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise ConditioningError(f"interpolation matrix for {what} has condition number {cond:.3e}")
    return scipy.linalg.lu_factor(A), cond


def block_conditions(sig: Signature):
    """Condition numbers of the square systems solved for this signature."""
    out = {}
    for q in set(sig.q):
        if q >= 2:
            out[("edge", q)] = _edge_block(q)[1]
    for p in set(sig.p):
        if p >= 3:
            out[("face", p)] = _face_block(p)[1]
    if sig.n >= 4:
        out[("internal", sig.n)] = _internal_block(sig.n)[1]
    return out


@lru_cache(maxsize=4096)
def _point_basis(sig: Signature):
    P, _ = reference_points(sig)
    B = basis_eval(sig, P)
    B.setflags(write=False)
    return B


def local_interpolate(values, sig: Signature):
    """Coefficients of the interpolant of ``values`` given at reference_points(sig).

    ``values`` may be (N,) or (N, m) for m functions at once.  Solved in
    stages: vertices, each edge, each face, interior, each stage on the
    residual of the previous ones.
    """
    f = np.asarray(values, float)
    squeeze = f.ndim == 1
    f = f.reshape(len(f), -1)
    B = _point_basis(sig)
    if B.shape[0] != f.shape[0]:
        raise ConfigError(f"expected {B.shape[0]} values, got {f.shape[0]}")
    part = basis_partition(sig)
    c = np.zeros_like(f)
    c[:4] = f[:4]
    done = slice(0, 4)
    for e in range(6):
        s = part[("edge", e)]
        if s.stop > s.start:
            lu, _ = _edge_block(sig.q[e])
            r = f[s] - B[s, done] @ c[done]
            c[s] = scipy.linalg.lu_solve(lu, r)
    # edge functions are supported on their own edge points only up to the edge stage
    edge_end = part[("edge", 5)].stop
    done = slice(0, edge_end)
    for i in range(4):
        s = part[("face", i)]
        if s.stop > s.start:
            lu, _ = _face_block(sig.p[i])
            r = f[s] - B[s, done] @ c[done]
            c[s] = scipy.linalg.lu_solve(lu, r)
    s = part["internal"]
    if s.stop > s.start:
        lu, _ = _internal_block(sig.n)
        r = f[s] - B[s, : s.start] @ c[: s.start]
        c[s] = scipy.linalg.lu_solve(lu, r)
    return c[:, 0] if squeeze else c


def evaluate_local(coef, sig: Signature, L):
    return basis_eval(sig, L) @ coef


def lebesgue_estimate(n, n_samples=20000, seed=0):
    """Max over random reference points of the summed |internal cardinal functions|."""
    if n < 4:
        return 0.0
    rng = np.random.default_rng(seed)
    L = rng.dirichlet(np.ones(4), size=n_samples)
    sig = Signature(n, (2,) * 4, (2,) * 6)
    Bi = basis_eval(sig, L)[:, basis_partition(sig)["internal"]]
    lu, _ = _internal_block(n)
    # cardinal functions: Bi @ A^{-1}
    A = basis_eval(sig, internal_point_weights(n))[:, basis_partition(sig)["internal"]]
    card = np.linalg.solve(A.T, Bi.T).T
    return float(np.max(np.sum(np.abs(card), axis=1)))


# ---------------------------------------------------------------- degrees

@dataclass
class DegreeMap:
    n_T: dict
    m_F: dict
    m_E: dict
    mu: float
    cap: int = DEGREE_CAP

    def signature(self, mesh, t):
        g = sorted(mesh.tets[t])
        p = tuple(self.m_F[tuple(g[v] for v in face)] for face in FACES)
        q = tuple(self.m_E[(g[k], g[j])] for j, k in EDGES)
        return Signature(self.n_T[t], p, q)


def element_degree(layer, marked, mu=1.0, cap=DEGREE_CAP):
    if marked:
        return 2
    return int(min(cap, max(2, math.ceil(mu * layer - 1e-12))))


def assign_degrees(mesh, marked, mu=1.0, cap=DEGREE_CAP):
    """Element degrees from layers and marks; face and edge degrees by the min rule."""
    if not mu > 0:
        raise ConfigError("mu must be positive")
    marked = set(int(t) for t in marked)
    n_T = {t: element_degree(mesh.layer(t), t in marked, mu, cap) for t in mesh.live()}
    return degrees_from_elements(mesh, n_T, mu, cap)


def degrees_from_elements(mesh, n_T, mu=1.0, cap=DEGREE_CAP):
    """Complete element degrees with face minima and edge minima over faces."""
    m_F = {}
    for t, n in n_T.items():
        g = sorted(mesh.tets[t])
        for face in FACES:
            key = tuple(g[v] for v in face)
            m_F[key] = min(m_F.get(key, n), n)
    m_E = {}
    for (a, b, c), m in m_F.items():
        for key in ((a, b), (a, c), (b, c)):
            m_E[key] = min(m_E.get(key, m), m)
    return DegreeMap(dict(n_T), m_F, m_E, mu, cap)


# ---------------------------------------------------------------- global interpolant

def _entity_key(g, label):
    kind, ent, idx = label
    if kind == "vertex":
        return ("v", g[ent])
    if kind == "edge":
        j, k = EDGES[ent]
        return ("e", (g[k], g[j]), idx)
    if kind == "face":
        return ("f", tuple(g[v] for v in FACES[ent]), idx)
    return ("i", tuple(g), idx)


def _entity_point(X, g, label, L):
    # sum over the entity's vertices in ascending id order, so shared points are bitwise equal
    kind, ent, _ = label
    if kind == "vertex":
        return X[g[ent]]
    if kind == "edge":
        j, k = EDGES[ent]
        verts = (k, j)
    elif kind == "face":
        verts = FACES[ent]
    else:
        verts = (0, 1, 2, 3)
    out = np.zeros(3)
    for v in verts:
        out = out + L[v] * X[g[v]]
    return out


class Interpolant:
    """Continuous piecewise polynomial reconstruction of selected bands."""

    def __init__(self, mesh, degrees, bands, signatures, coefs, points, values, keys):
        self.mesh = mesh
        self.degrees = degrees
        self.bands = tuple(bands)
        self.signatures = signatures
        self.coefs = coefs
        self.points = points
        self.values = values
        self.keys = keys

    @property
    def n_points(self):
        return len(self.points)

    def _local_bary(self, t, b):
        # barycentrics are in the mesh's vertex order; reorder to ascending ids
        order = np.argsort(self.mesh.tets[t], kind="stable")
        return np.asarray(b)[order]

    def evaluate(self, k, band):
        t, b = self.mesh.locate(k)
        return float(self.evaluate_in(t, k, band))

    def evaluate_in(self, t, ks, band=None):
        """Polynomial of element ``t`` at points ``ks`` (no location step; may extrapolate)."""
        ks = np.asarray(ks, float)
        single = ks.ndim == 1
        ks = ks.reshape(-1, 3)
        g = sorted(self.mesh.tets[t])
        P = self.mesh.vertices[g]
        A = np.column_stack([P[0] - P[3], P[1] - P[3], P[2] - P[3]])
        L = xyz_to_bary(np.linalg.solve(A, (ks - P[3]).T).T)
        out = basis_eval(self.signatures[t], L) @ self.coefs[t]
        if band is not None:
            out = out[:, self.bands.index(band)]
        return out[0] if single else out

    def evaluate_many(self, ks, band=None):
        """Values (P, n_bands) at points ``ks``, or (P,) for one ``band``."""
        ks = np.asarray(ks, float).reshape(-1, 3)
        out = np.empty((len(ks), len(self.bands)))
        hits = [self.mesh.locate(k) for k in ks]
        by_tet = {}
        for i, (t, b) in enumerate(hits):
            by_tet.setdefault(t, []).append((i, self._local_bary(t, b)))
        for t, lst in by_tet.items():
            idx = [i for i, _ in lst]
            L = np.array([b for _, b in lst])
            out[idx] = basis_eval(self.signatures[t], L) @ self.coefs[t]
        if band is None:
            return out
        return out[:, self.bands.index(band)]

    def to_dict(self):
        return {
            "bands": list(self.bands),
            "mu": self.degrees.mu,
            "cap": self.degrees.cap,
            "mesh": self.mesh.to_dict(),
            "elements": [
                {
                    "tet": list(self.mesh.tets[t]),
                    "n": self.signatures[t].n,
                    "p": list(self.signatures[t].p),
                    "q": list(self.signatures[t].q),
                    "coefficients": self.coefs[t].tolist(),
                }
                for t in self.mesh.live()
            ],
            "n_points": self.n_points,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        from .bzmesh import TetMesh

        mesh = TetMesh.from_dict(d["mesh"])
        sigs, coefs, n_T = {}, {}, {}
        for t, el in zip(mesh.live(), d["elements"]):
            sigs[t] = Signature(el["n"], el["p"], el["q"])
            coefs[t] = np.array(el["coefficients"], float).reshape(-1, len(d["bands"]))
            n_T[t] = el["n"]
        degrees = DegreeMap(n_T, {}, {}, d["mu"], d["cap"])
        return cls(mesh, degrees, d["bands"], sigs, coefs, np.zeros((d["n_points"], 3)), None, None)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sampling_plan(mesh, degrees):
    """Distinct global sampling points and, per element, indices into them.

    Returns (points (N, 3), keys, {tet: index array}, {tet: signature}).
    """
    X = mesh.vertices
    index, points, keys = {}, [], []
    local, sigs = {}, {}
    for t in mesh.live():
        sig = degrees.signature(mesh, t)
        sigs[t] = sig
        g = sorted(mesh.tets[t])
        P, labels = reference_points(sig)
        ids = np.empty(len(labels), dtype=int)
        for r, (L, lab) in enumerate(zip(P, labels)):
            key = _entity_key(g, lab)
            pos = index.get(key)
            if pos is None:
                pos = len(points)
                index[key] = pos
                points.append(_entity_point(X, g, lab, L))
                keys.append(key)
            ids[r] = pos
        local[t] = ids
    return np.array(points).reshape(-1, 3), keys, local, sigs


def build_interpolant(mesh, degrees, oracle, bands, workers=1):
    """Interpolate ``bands`` (1-based indices) of ``oracle`` on ``mesh`` with the given degrees."""
    from .oracle import eval_many

    bands = tuple(int(b) for b in bands)
    points, keys, local, sigs = sampling_plan(mesh, degrees)
    n_bands = max(bands)
    samples = eval_many(oracle, points, n_bands, False, workers)
    values = np.array([[s.values[b - 1] for b in bands] for s in samples]).reshape(len(points), len(bands))
    coefs = {}
    for t in mesh.live():
        try:
            coefs[t] = local_interpolate(values[local[t]], sigs[t])
        except ConditioningError as exc:
            raise ConditioningError(f"element {t} with degrees {sigs[t]}: {exc}") from exc
    return Interpolant(mesh, degrees, bands, sigs, coefs, points, values, keys)
