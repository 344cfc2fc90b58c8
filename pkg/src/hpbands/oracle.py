"""Band oracles: sorted eigenvalues lambda_1..lambda_L(k) and their k-gradients.

Two implementations share one calling convention, ``oracle.eval(k, n_bands)``:

* :class:`EmptyLatticeOracle` -- exact bands |k+G|^2 of free space.
* :class:`PWEOracle` -- plane-wave expansion of the curl eps^-1 curl problem
  in a transverse basis, solved densely.
"""

from __future__ import annotations

import itertools
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from .errors import ConfigError, NumericalError, ShellError

TIE_RTOL = 1e-12
GAMMA_OFFSET = 1e-6


@dataclass(frozen=True)
class BandSample:
    values: np.ndarray
    gradients: np.ndarray = None

    @property
    def n_bands(self):
        return len(self.values)


def _as_k(k):
    k = np.asarray(k, dtype=float).reshape(3)
    if not np.all(np.isfinite(k)):
        raise ConfigError(f"non-finite wave vector {k}")
    return k


def integer_grid(c):
    r = np.arange(-c, c + 1)
    return np.array(list(itertools.product(r, r, r)), dtype=int)


def _sorted_with_ties(values, keys):
    """Indices sorting ``values`` ascending; near-equal values ordered by ``keys`` rows."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    out = []
    i = 0
    n = len(order)
    while i < n:
        j = i + 1
        while j < n and v[j] - v[j - 1] <= TIE_RTOL * max(1.0, abs(v[j])):
            j += 1
        group = order[i:j]
        if len(group) > 1:
            kk = keys[group]
            group = group[np.lexsort(kk.T[::-1])]
        out.extend(group.tolist())
        i = j
    return np.asarray(out, dtype=int)


class EmptyLatticeOracle:
    """Free-space bands on the simple cubic lattice (eps = 1)."""

    name = "empty_lattice"

    def __init__(self, a=1.0, cutoff=3):
        self.a = float(a)
        self.cutoff = int(cutoff)
        self.indices = integer_grid(self.cutoff)
        self.G = (2.0 * math.pi / self.a) * self.indices

    def metadata(self):
        return {"oracle": self.name, "a": self.a, "cutoff": self.cutoff}

    @staticmethod
    def _shell_ok(k, top, c, b):
        return top < ((c + 1) * b - np.max(np.abs(k))) ** 2

    def _check_shell(self, k, top, n_bands):
        b = 2.0 * math.pi / self.a
        if self._shell_ok(k, top, self.cutoff, b):
            return
        need = self.cutoff + 1
        while True:
            G = b * integer_grid(need)
            vals = np.sort(np.einsum("ij,ij->i", k + G, k + G))
            if len(vals) >= n_bands and self._shell_ok(k, vals[n_bands - 1], need, b):
                break
            need += 1
        raise ShellError(
            f"cutoff {self.cutoff} cannot resolve {n_bands} bands at k={k.tolist()}; use cutoff >= {need}",
            required_cutoff=need,
        )

    def ranked(self, k):
        """(values, G index rows) of all lattice terms, sorted with the tie rule."""
        k = _as_k(k)
        kg = k + self.G
        vals = np.einsum("ij,ij->i", kg, kg)
        order = _sorted_with_ties(vals, self.indices)
        return vals[order], self.indices[order]

    def eval(self, k, n_bands, gradients=True):
        k = _as_k(k)
        vals, idx = self.ranked(k)
        self._check_shell(k, vals[min(n_bands, len(vals)) - 1] if n_bands <= len(vals) else np.inf, n_bands)
        grads = None
        if gradients:
            grads = 2.0 * (k + (2.0 * math.pi / self.a) * idx[:n_bands])
        # near-ties are ordered by G for the gradients; the values themselves stay sorted
        return BandSample(np.sort(vals)[:n_bands], grads)


@dataclass(frozen=True)
class PlanePatch:
    """Bisector plane {k : |k+G1|^2 = |k+G2|^2}, written as normal . k = offset."""

    g1: tuple
    g2: tuple
    normal: np.ndarray
    offset: float

    def contains(self, k, tol=1e-9):
        k = np.asarray(k, float)
        return abs(self.normal @ k - self.offset) <= tol * max(1.0, abs(self.offset))


class EmptyLatticeSingularSet:
    """Points where free-space bands q and q+1 tie, for min_band <= q < n_bands.

    Membership tests are exact up to LP tolerances: every difference
    |k+G|^2 - |k+G'|^2 is affine in k, so "bands q, q+1 tie somewhere in a
    tetrahedron" is a union of linear feasibility problems.
    """

    def __init__(self, a, n_bands, min_band=1, cutoff=2):
        if n_bands < 2 or min_band < 1 or min_band >= n_bands:
            raise ConfigError("need 1 <= min_band < n_bands")
        self.a = float(a)
        self.n_bands = int(n_bands)
        self.min_band = int(min_band)
        self.idx = integer_grid(cutoff)
        self.G = (2.0 * math.pi / self.a) * self.idx
        self.patches = []

    def __iter__(self):
        return iter(self.patches)

    def __len__(self):
        return len(self.patches)

    def _rows(self, i, j):
        # f_i(k) - f_j(k) = c . k + d
        c = 2.0 * (self.G[i] - self.G[j])
        d = self.G[i] @ self.G[i] - self.G[j] @ self.G[j]
        return c, d

    def patch(self, i, j):
        c, d = self._rows(i, j)
        return PlanePatch(tuple(self.idx[i]), tuple(self.idx[j]), c, -d)

    def _candidates(self, verts):
        """Pairs whose bisector meets the tetrahedron, cheapest first, plus the data the LPs need."""
        verts = np.asarray(verts, float).reshape(4, 3)
        kg = verts[:, None, :] + self.G[None, :, :]
        F = np.einsum("vgi,vgi->gv", kg, kg)
        diff = F[:, None, :] - F[None, :, :]
        dmin, dmax = diff.min(axis=2), diff.max(axis=2)
        scale = 1e-12 * max(1.0, float(np.max(np.abs(F))))
        # terms strictly below g everywhere (affine differences, so vertex values decide)
        forced = np.sum(dmax < -scale, axis=0)
        smax = self.n_bands - 2
        crosses = (dmin <= scale) & (dmax >= -scale)
        ii, jj = np.nonzero(np.triu(crosses, 1))
        keep = (forced[ii] <= smax) & (forced[jj] <= smax)
        ii, jj = ii[keep], jj[keep]
        order = np.argsort(np.minimum(F[ii].mean(axis=1), F[jj].mean(axis=1)), kind="stable")
        return ii[order], jj[order], diff, scale

    def tie_pairs(self, verts):
        """Lattice index pairs (i, j) whose tie is a window crossing inside the tetrahedron."""
        ii, jj, diff, scale = self._candidates(verts)
        return [(int(i), int(j)) for i, j in zip(ii, jj) if self._pair_feasible(i, j, diff, scale)]

    def intersects_tet(self, verts):
        """True if the closed tetrahedron (4, 3) meets the singular set."""
        ii, jj, diff, scale = self._candidates(verts)
        return any(self._pair_feasible(i, j, diff, scale) for i, j in zip(ii, jj))

    def _pair_feasible(self, i, j, diff, scale):
        smin, smax = self.min_band - 1, self.n_bands - 2
        # rows g: f_g - f_i at the vertices
        D = diff[:, i, :]
        others = np.ones(len(D), dtype=bool)
        others[[i, j]] = False
        below = others & (D.max(axis=1) < -scale)
        maybe = others & ~below & (D.min(axis=1) <= scale)
        n_below = int(below.sum())
        maybe_ids = np.nonzero(maybe)[0]
        for s in range(max(smin, n_below), smax + 1):
            extra = s - n_below
            if extra > len(maybe_ids):
                break
            for subset in itertools.combinations(maybe_ids, extra):
                S = below.copy()
                S[list(subset)] = True
                if self._lp(i, j, D, S, others):
                    return True
        return False

    def _lp(self, i, j, D, S, others):
        # barycentric weights w >= 0, sum 1; tie f_i = f_j;
        # f_g <= f_i for g in S, f_g >= f_i for the remaining terms that can reach f_i
        A_eq = np.vstack([np.ones(4), D[j]])
        b_eq = np.array([1.0, 0.0])
        rest = others & ~S & (D.min(axis=1) < 0)
        A_ub = np.vstack([D[S], -D[rest]]) if (S.any() or rest.any()) else None
        b_ub = np.zeros(len(A_ub)) if A_ub is not None else None
        res = linprog(np.zeros(4), A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=[(0, None)] * 4, method="highs")
        return res.status == 0


def _region_tets(region):
    arr = np.asarray(region, dtype=float)
    if arr.shape == (2, 3):
        lo, hi = arr
        if np.any(hi - lo <= 0):
            return []
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        return kuhn_tets(corners)
    if arr.shape == (4, 3):
        return [arr]
    if arr.ndim == 3 and arr.shape[1:] == (4, 3):
        return list(arr)
    raise ConfigError("region must be a (lo, hi) box, a tetrahedron or a list of tetrahedra")


def empty_lattice_singular_set(a, n_bands, region, min_band=1, cutoff=2):
    """Bisector-plane patches where free-space bands min_band..n_bands cross inside ``region``.

    ``region`` is an axis-aligned box ``(lo, hi)``, a single tetrahedron (4, 3),
    or a list of tetrahedra.  The returned object lists the contributing
    :class:`PlanePatch` objects and answers exact per-tetrahedron queries.
    """
    sset = EmptyLatticeSingularSet(a, n_bands, min_band, cutoff)
    pairs = set()
    for tet in _region_tets(region):
        if abs(np.linalg.det(tet[1:] - tet[0])) <= 0.0:
            continue
        pairs.update(sset.tie_pairs(tet))
    sset.patches = [sset.patch(i, j) for i, j in sorted(pairs)]
    return sset


def kuhn_tets(corners):
    """Six tetrahedra of a box whose 8 corners are in itertools.product order."""
    idx = {(i, j, k): 4 * i + 2 * j + k for i in (0, 1) for j in (0, 1) for k in (0, 1)}
    out = []
    for perm in itertools.permutations(range(3)):
        p = [0, 0, 0]
        chain = [tuple(p)]
        for ax in perm:
            p[ax] = 1
            chain.append(tuple(p))
        out.append(np.asarray(corners)[[idx[c] for c in chain]])
    return out


@dataclass(frozen=True)
class PWEConfig:
    modes_per_axis: int = 7
    n_bands: int = 6
    fd_step: float = None
    gradient: str = "fd"

    def __post_init__(self):
        m = self.modes_per_axis
        if m < 3 or m % 2 == 0:
            raise ConfigError(f"modes_per_axis must be odd and >= 3, got {m}")
        if self.n_bands > 2 * m**3 - 2:
            raise ConfigError("too many bands for this plane-wave basis")
        if self.fd_step is not None and self.fd_step <= 0:
            raise ConfigError("fd_step must be positive")
        if self.gradient not in ("hellmann_feynman", "fd"):
            raise ConfigError(f"unknown gradient method {self.gradient!r}")


class PWEOracle:
    """Plane-wave expansion of the Bloch-reduced Maxwell problem for the H field."""

    name = "pwe"

    def __init__(self, cell, cfg: PWEConfig = PWEConfig()):
        self.cell = cell
        self.cfg = cfg
        self.a = cell.a
        c = cfg.modes_per_axis // 2
        self.indices = integer_grid(c)
        self.b = 2.0 * math.pi / self.a
        self.G = self.b * self.indices
        # eta on the difference lattice, then gathered into the Toeplitz block
        diff = integer_grid(2 * c)
        eta = cell.eta_hat(self.b * diff).reshape((4 * c + 1,) * 3)
        dm = self.indices[:, None, :] - self.indices[None, :, :] + 2 * c
        self.eta = eta[dm[..., 0], dm[..., 1], dm[..., 2]]
        self.fd_step = cfg.fd_step if cfg.fd_step is not None else 1e-5 * self.b

    def metadata(self):
        return {
            "oracle": self.name,
            "a": self.a,
            "modes_per_axis": self.cfg.modes_per_axis,
            "fd_step": self.fd_step,
            "gradient": self.cfg.gradient,
            "gamma_offset": GAMMA_OFFSET * self.b,
        }

    def regularize(self, k):
        k = _as_k(k)
        kmin = GAMMA_OFFSET * self.b
        if np.linalg.norm(k) < kmin:
            return np.full(3, kmin / math.sqrt(3.0))
        return k

    def frame(self, k):
        """Unit polarization vectors e1, e2 (N, 3) orthogonal to k+G."""
        kg = k + self.G
        axis = np.array([0.0, 0.0, 1.0])
        e1 = np.cross(axis, kg)
        n1 = np.linalg.norm(e1, axis=1)
        bad = n1 < 1e-12
        if np.any(bad):
            e1[bad] = np.cross(np.array([1.0, 0.0, 0.0]), kg[bad])
            n1[bad] = np.linalg.norm(e1[bad], axis=1)
        e1 /= n1[:, None]
        e2 = np.cross(kg, e1)
        e2 /= np.linalg.norm(e2, axis=1)[:, None]
        return kg, e1, e2

    def assemble(self, k):
        """Hermitian matrix with rows/cols ordered (G, polarization)."""
        k = self.regularize(k)
        kg, e1, e2 = self.frame(k)
        nrm = np.linalg.norm(kg, axis=1)
        # (k+G) x e1 = |k+G| e2, (k+G) x e2 = -|k+G| e1
        W = np.empty((2 * len(kg), 3))
        W[0::2] = nrm[:, None] * e2
        W[1::2] = -nrm[:, None] * e1
        eta = np.repeat(np.repeat(self.eta, 2, axis=0), 2, axis=1)
        return eta * (W @ W.T)

    def _solve(self, k, n_bands, vectors):
        theta = self.assemble(k)
        try:
            if vectors:
                w, v = scipy.linalg.eigh(theta, subset_by_index=[0, n_bands - 1])
            else:
                w = scipy.linalg.eigh(theta, eigvals_only=True, subset_by_index=[0, n_bands - 1])
                v = None
        except (np.linalg.LinAlgError, ValueError) as exc:
            cond = np.linalg.cond(theta)
            raise NumericalError(f"eigensolver failed at k={np.asarray(k).tolist()} (cond={cond:.3e}): {exc}")
        scale = np.max(np.abs(np.diag(theta)))
        floor = -1e-10 * scale
        if np.any(w < floor):
            raise NumericalError(f"negative eigenvalue {w.min():.3e} at k={np.asarray(k).tolist()}")
        w = np.where(w < 0, 0.0, w)
        return w, v

    def eval(self, k, n_bands, gradients=True):
        if n_bands > 2 * len(self.G) - 2:
            raise ConfigError("too many bands for this plane-wave basis")
        k = self.regularize(k)
        if not gradients:
            w, _ = self._solve(k, n_bands, False)
            return BandSample(w, None)
        if self.cfg.gradient == "fd":
            w, _ = self._solve(k, n_bands, False)
            return BandSample(w, self.fd_gradients(k, n_bands))
        w, v = self._solve(k, n_bands, True)
        return BandSample(w, self.hf_gradients(k, v))

    def hf_gradients(self, k, vecs):
        """Exact derivatives of the discrete eigenvalues from their eigenvectors.

        The transverse matrix has the same nonzero spectrum as the Cartesian
        3N-basis matrix, whose basis does not depend on k, so the first-order
        perturbation formula applies there without any frame derivative.
        """
        kg, e1, e2 = self.frame(k)
        grads = np.empty((vecs.shape[1], 3))
        for q in range(vecs.shape[1]):
            c = vecs[:, q]
            h = c[0::2, None] * e1 + c[1::2, None] * e2
            B = np.cross(kg, h)
            Y = self.eta @ B
            grads[q] = 2.0 * np.real(np.sum(np.cross(np.conj(h), Y), axis=0))
        return grads

    def fd_gradients(self, k, n_bands, step=None):
        """Second-order central differences, eigenvalues matched by sorted index."""
        step = self.fd_step if step is None else step
        k = _as_k(k)
        grads = np.empty((n_bands, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            wp, _ = self._solve(k + e, n_bands, False)
            wm, _ = self._solve(k - e, n_bands, False)
            grads[:, j] = (wp - wm) / (2.0 * step)
        return grads


class CountingOracle:
    """Wraps an oracle, counting calls and memoizing on the exact k bytes.

    A cached sample with at least the requested bands (and gradients, if
    requested) is reused, truncated to the requested count.
    """

    def __init__(self, inner, memo=True):
        self.inner = inner
        self.name = inner.name
        self.calls = 0
        self.memo = {} if memo else None
        self._lock = threading.Lock()

    def metadata(self):
        return self.inner.metadata()

    def eval(self, k, n_bands, gradients=True):
        k = np.asarray(k, dtype=float).reshape(3)
        key = k.tobytes()
        if self.memo is not None:
            hit = self.memo.get(key)
            if hit is not None and hit.n_bands >= n_bands and (hit.gradients is not None or not gradients):
                if hit.n_bands == n_bands and (gradients or hit.gradients is None):
                    return hit
                g = hit.gradients[:n_bands] if gradients else None
                return BandSample(hit.values[:n_bands], g)
        with self._lock:
            self.calls += 1
        out = self.inner.eval(k, n_bands, gradients)
        if self.memo is not None:
            old = self.memo.get(key)
            if old is None or old.n_bands <= n_bands:
                self.memo[key] = out
        return out


def eval_many(oracle, ks, n_bands, gradients=True, workers=1):
    """Evaluate ``oracle`` at each row of ``ks``; order of results follows ``ks``."""
    ks = np.asarray(ks, dtype=float).reshape(-1, 3)
    if workers is None or workers <= 1 or len(ks) < 2:
        return [oracle.eval(k, n_bands, gradients) for k in ks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda k: oracle.eval(k, n_bands, gradients), ks))


def band_gradient(oracle, k, q):
    """Gradient of band ``q`` (1-based) at ``k``; deterministic at ties."""
    return oracle.eval(k, q, True).gradients[q - 1]


def make_oracle(name, cell=None, modes_per_axis=7, n_bands=6, fd_step=None, gradient="fd",
                a=1.0, cutoff=3):
    if name == "empty_lattice":
        return EmptyLatticeOracle(a=a, cutoff=cutoff)
    if name == "pwe":
        if cell is None:
            raise ConfigError("the pwe oracle needs a unit cell")
        return PWEOracle(cell, PWEConfig(modes_per_axis, n_bands, fd_step, gradient))
    raise ConfigError(f"unknown oracle {name!r}")
