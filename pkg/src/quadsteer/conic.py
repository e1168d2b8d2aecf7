"""Backend-neutral conic program representation and solver backends.

Variables live in one packed scalar vector. Symmetric matrix blocks are
stored in scaled-triangle ("svec") coordinates: the upper triangle stacked
column by column with off-diagonal entries multiplied by sqrt(2), so that
``<A, B> = svec(A) @ svec(B)`` and PSD-cone membership of the matrix equals
cone membership of its svec image.

Constraints are stored as ``s = b - A x`` with ``s`` required to lie in one
of: the zero cone (equalities), the nonnegative orthant, a second-order cone
(s[0] >= ||s[1:]||), or a PSD triangle cone. Convex quadratic objective terms
are lifted at construction into epigraph variables plus second-order cones,
so any backend only ever sees a linear objective over those cones.

Backends: ClarabelBackend maps the representation directly onto Clarabel's
native interface; CvxpyBackend rebuilds it as a cvxpy problem (any installed
conic solver). Both return the same RawSolution structure.

The program also serializes to a plain-text sparse-triplet interchange format
(see ``export_text``) for debugging against external tooling.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ConicProgram",
    "RawSolution",
    "SolverBackend",
    "ClarabelBackend",
    "CvxpyBackend",
    "get_backend",
    "svec",
    "smat",
    "svec_dim",
    "congruence_operator",
    "cross_term_operator",
]

_SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# Scaled symmetric vectorization


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def _triu_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) pairs of the upper triangle, stacked column by column."""
    cols, rows = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = rows <= cols
    return rows[mask], cols[mask]


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled upper-triangle vectorization (off-diagonals times sqrt(2))."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    r, c = _triu_indices(n)
    out = M[r, c].astype(float).copy()
    out[r != c] *= _SQRT2
    return out


def smat(s: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`svec`."""
    s = np.asarray(s, dtype=float)
    r, c = _triu_indices(n)
    vals = s.copy()
    vals[r != c] /= _SQRT2
    M = np.zeros((n, n))
    M[r, c] = vals
    M[c, r] = vals
    return M


def _svec_basis(n: int) -> list[np.ndarray]:
    """Orthonormal symmetric basis matrices E_j with svec(E_j) = e_j."""
    r, c = _triu_indices(n)
    basis = []
    for i, j in zip(r, c):
        E = np.zeros((n, n))
        if i == j:
            E[i, j] = 1.0
        else:
            E[i, j] = E[j, i] = 1.0 / _SQRT2
        basis.append(E)
    return basis


def congruence_operator(A: np.ndarray) -> np.ndarray:
    """Matrix M with ``svec(A X A') = M @ svec(X)`` for symmetric X.

    A may be rectangular (p x n); the output then lives in svec(p)-space.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[1]
    cols = [svec(A @ E @ A.T) for E in _svec_basis(n)]
    return np.column_stack(cols)


def cross_term_operator(B: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Matrix M with ``svec(B U A' + A U' B') = M @ vec(U)`` (column-major
    vec) for U of shape (m, n) given B (p x m) and A (p x n)."""
    B = np.asarray(B, dtype=float)
    A = np.asarray(A, dtype=float)
    m, n = B.shape[1], A.shape[1]
    cols = []
    for j in range(n):  # column-major vec ordering
        for i in range(m):
            U = np.zeros((m, n))
            U[i, j] = 1.0
            S = B @ U @ A.T
            cols.append(svec(S + S.T))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Program representation


@dataclass(frozen=True)
class VarBlock:
    """One named variable block inside the packed scalar vector.

    kind 'vec': plain vector of length ``dim``; kind 'sym': symmetric
    ``dim x dim`` matrix in svec coordinates; kind 'mat': general
    ``dim x dim2`` matrix in column-major vec coordinates.
    """

    name: str
    kind: str
    dim: int
    dim2: int
    offset: int

    @property
    def size(self) -> int:
        if self.kind == "sym":
            return svec_dim(self.dim)
        if self.kind == "mat":
            return self.dim * self.dim2
        return self.dim

    def unpack(self, x: np.ndarray) -> np.ndarray:
        seg = x[self.offset : self.offset + self.size]
        if self.kind == "sym":
            return smat(seg, self.dim)
        if self.kind == "mat":
            return seg.reshape((self.dim, self.dim2), order="F")
        return seg.copy()


@dataclass
class _ConeBlock:
    kind: str  # "zero" | "nonneg" | "soc" | "psd"
    rows: int
    dim: int  # matrix side for psd, cone length for soc, 0 otherwise
    label: str = ""


class ConicProgram:
    """Sparse conic program builder (see module docstring for conventions)."""

    def __init__(self):
        self._blocks: dict[str, VarBlock] = {}
        self._nvar = 0
        self._obj: dict[int, float] = {}
        self._obj_const = 0.0
        # triplets per cone family, so rows can be emitted grouped by cone
        self._families = {
            "zero": _TripletRows(),
            "nonneg": _TripletRows(),
            "soc": _TripletRows(),
            "psd": _TripletRows(),
        }
        self._cones: dict[str, list[_ConeBlock]] = {
            "zero": [],
            "nonneg": [],
            "soc": [],
            "psd": [],
        }
        self._epigraph_count = 0

    # -- variables ---------------------------------------------------------

    def add_var(self, name: str, kind: str, dim: int, dim2: int = 0) -> VarBlock:
        if name in self._blocks:
            raise ValueError(f"duplicate variable block {name!r}")
        if kind not in ("vec", "sym", "mat"):
            raise ValueError(f"unknown variable kind {kind!r}")
        blk = VarBlock(name=name, kind=kind, dim=dim, dim2=dim2, offset=self._nvar)
        self._blocks[name] = blk
        self._nvar += blk.size
        return blk

    def block(self, name: str) -> VarBlock:
        return self._blocks[name]

    @property
    def nvar(self) -> int:
        return self._nvar

    @property
    def blocks(self) -> list[VarBlock]:
        return list(self._blocks.values())

    # -- objective ----------------------------------------------------------

    def add_linear_cost(self, blk: VarBlock, coeffs: np.ndarray) -> None:
        """Add ``coeffs . x_blk`` to the objective (svec coords for sym)."""
        coeffs = np.asarray(coeffs, dtype=float).ravel()
        if coeffs.size != blk.size:
            raise ValueError("coefficient length does not match block size")
        for j, cval in enumerate(coeffs):
            if cval != 0.0:
                idx = blk.offset + j
                self._obj[idx] = self._obj.get(idx, 0.0) + cval

    def add_constant_cost(self, value: float) -> None:
        self._obj_const += float(value)

    def add_quadratic_cost(self, blk: VarBlock, W: np.ndarray, label: str = "") -> VarBlock:
        """Add ``x_blk' W x_blk`` (W PSD) to the objective.

        Lifted immediately: introduces epigraph t with t >= ||F x||^2 where
        W = F'F, encoded as the second-order cone
        ||(t - 1/2, sqrt(2) F x)|| <= t + 1/2. Returns the epigraph block.
        """
        W = np.asarray(W, dtype=float)
        if blk.kind != "vec" or W.shape != (blk.size, blk.size):
            raise ValueError("quadratic cost expects a vec block and matching W")
        wmax = np.abs(W).max()
        if wmax == 0.0:
            raise ValueError("quadratic cost with zero weight; skip instead")
        evals, evecs = np.linalg.eigh(0.5 * (W + W.T))
        if evals.min() < -1e-10 * max(1.0, evals.max()):
            raise ValueError("quadratic cost weight must be PSD")
        keep = evals > 1e-14 * max(1.0, evals.max())
        F = (evecs[:, keep] * np.sqrt(evals[keep])).T  # W = F'F

        t = self.add_var(f"_epi{self._epigraph_count}{('_' + label) if label else ''}", "vec", 1)
        self._epigraph_count += 1
        self.add_linear_cost(t, np.array([1.0]))

        # rows of s = b - Ax in SOC order: s0 = t + 1/2, s1 = t - 1/2, s2: = sqrt(2) F x
        rows = 2 + F.shape[0]
        tr = self._families["soc"]
        base = tr.rows
        tr.add(base + 0, t.offset, -1.0)
        tr.set_rhs(base + 0, 0.5)
        tr.add(base + 1, t.offset, -1.0)
        tr.set_rhs(base + 1, -0.5)
        for i in range(F.shape[0]):
            for j, fval in enumerate(F[i]):
                if fval != 0.0:
                    tr.add(base + 2 + i, blk.offset + j, _SQRT2 * fval)
        tr.rows += rows
        self._cones["soc"].append(_ConeBlock("soc", rows, rows, label or "quad_cost"))
        return t

    # -- constraints ---------------------------------------------------------

    def _add_rows(
        self,
        family: str,
        terms: list[tuple[VarBlock, np.ndarray]],
        rhs: np.ndarray,
        dim: int,
        label: str,
    ) -> None:
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        nrows = rhs.size
        tr = self._families[family]
        base = tr.rows
        for blk, mat in terms:
            M = np.asarray(mat, dtype=float)
            if M.ndim == 1:
                M = M.reshape(1, -1)
            if M.shape != (nrows, blk.size):
                raise ValueError(
                    f"coefficient block for {blk.name!r} has shape {M.shape}, "
                    f"expected ({nrows}, {blk.size})"
                )
            rr, cc = np.nonzero(M)
            tr.extend(base + rr, blk.offset + cc, M[rr, cc])
        for i, bval in enumerate(rhs):
            if bval != 0.0:
                tr.set_rhs(base + i, bval)
        tr.rows += nrows
        self._cones[family].append(_ConeBlock(family, nrows, dim, label))

    def add_equality(self, terms, rhs, label: str = "") -> None:
        """sum_i M_i x_blk_i = rhs (rowwise)."""
        self._add_rows("zero", terms, rhs, 0, label)

    def add_inequality(self, terms, rhs, label: str = "") -> None:
        """sum_i M_i x_blk_i <= rhs (rowwise)."""
        self._add_rows("nonneg", terms, rhs, 0, label)

    def add_psd(self, terms, const: np.ndarray, label: str = "") -> None:
        """Require ``const + sum_i map_i(x)`` PSD.

        ``const`` is the symmetric constant part (d x d); each term supplies
        svec-coordinate coefficient rows, i.e. the matrix map of the block
        into svec(d)-space. Internally stored as s = svec(const) - (-A)x.
        """
        const = np.asarray(const, dtype=float)
        d = const.shape[0]
        rhs = svec(const)
        negated = [(blk, -np.asarray(M, dtype=float)) for blk, M in terms]
        self._add_rows("psd", negated, rhs, d, label)

    def add_soc(self, terms, const: np.ndarray, label: str = "") -> None:
        """Require ``const + sum_i M_i x`` in the second-order cone
        (first row >= norm of the rest)."""
        const = np.asarray(const, dtype=float).ravel()
        negated = [(blk, -np.asarray(M, dtype=float)) for blk, M in terms]
        self._add_rows("soc", negated, const, const.size, label)

    # -- finalization --------------------------------------------------------

    def build(self):
        """Pack into (c, A, b, cone spec list) with rows grouped as
        zero, nonneg, soc, psd."""
        c = np.zeros(self._nvar)
        for idx, val in self._obj.items():
            c[idx] = val
        mats, rhss, cones = [], [], []
        for fam in ("zero", "nonneg", "soc", "psd"):
            tr = self._families[fam]
            if tr.rows == 0:
                continue
            mats.append(tr.matrix(self._nvar))
            rhss.append(tr.rhs_vector())
            cones.extend(self._cones[fam])
        if mats:
            A = sp.vstack(mats, format="csc")
            b = np.concatenate(rhss)
        else:
            A = sp.csc_matrix((0, self._nvar))
            b = np.zeros(0)
        return c, A, b, cones

    def stats(self) -> dict:
        counts = {fam: tr.rows for fam, tr in self._families.items()}
        return {
            "variables": self._nvar,
            "rows": counts,
            "psd_blocks": len(self._cones["psd"]),
            "soc_blocks": len(self._cones["soc"]),
        }

    # -- interchange export ---------------------------------------------------

    def export_text(self, stream=None) -> str:
        """Plain-text sparse-triplet interchange dump.

        Layout (whitespace separated, '#' comments):
          VER 1
          VARS <count>            then: <name> <kind> <dim> <dim2> <offset> <size>
          OBJCONST <value>
          OBJ <nnz>               then: <col> <value>
          CONES <count>           then: <family> <rows> <dim> <label>
          A <nnz> (rows grouped zero,nonneg,soc,psd)   then: <row> <col> <value>
          B <nnz>                 then: <row> <value>
        Symmetric blocks use scaled-triangle (svec) coordinates; solutions of
        external solvers can be mapped back through the VARS table.
        """
        c, A, b, cones = self.build()
        out = stream or io.StringIO()
        out.write("# conic interchange, svec scaling sqrt(2), s = b - A x in cones\n")
        out.write("VER 1\n")
        out.write(f"VARS {len(self._blocks)}\n")
        for blk in self._blocks.values():
            out.write(
                f"{blk.name} {blk.kind} {blk.dim} {blk.dim2} {blk.offset} {blk.size}\n"
            )
        out.write(f"OBJCONST {self._obj_const!r}\n")
        nz = np.nonzero(c)[0]
        out.write(f"OBJ {nz.size}\n")
        for j in nz:
            out.write(f"{j} {c[j]!r}\n")
        out.write(f"CONES {len(cones)}\n")
        for cb in cones:
            out.write(f"{cb.kind} {cb.rows} {cb.dim} {cb.label or '-'}\n")
        Acoo = A.tocoo()
        out.write(f"A {Acoo.nnz}\n")
        for i, j, v in zip(Acoo.row, Acoo.col, Acoo.data):
            out.write(f"{i} {j} {v!r}\n")
        bnz = np.nonzero(b)[0]
        out.write(f"B {bnz.size}\n")
        for i in bnz:
            out.write(f"{i} {b[i]!r}\n")
        if stream is None:
            return out.getvalue()
        return ""


class _TripletRows:
    """Accumulates sparse rows for one cone family."""

    def __init__(self):
        self.rows = 0
        self._r: list[np.ndarray] = []
        self._c: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self._rhs: dict[int, float] = {}

    def add(self, row: int, col: int, val: float) -> None:
        self._r.append(np.array([row]))
        self._c.append(np.array([col]))
        self._v.append(np.array([float(val)]))

    def extend(self, rows, cols, vals) -> None:
        self._r.append(np.asarray(rows, dtype=np.int64))
        self._c.append(np.asarray(cols, dtype=np.int64))
        self._v.append(np.asarray(vals, dtype=float))

    def set_rhs(self, row: int, val: float) -> None:
        self._rhs[row] = self._rhs.get(row, 0.0) + float(val)

    def matrix(self, nvar: int) -> sp.csc_matrix:
        if self._r:
            r = np.concatenate(self._r)
            c = np.concatenate(self._c)
            v = np.concatenate(self._v)
        else:
            r = c = v = np.zeros(0)
        return sp.coo_matrix((v, (r, c)), shape=(self.rows, nvar)).tocsc()

    def rhs_vector(self) -> np.ndarray:
        b = np.zeros(self.rows)
        for i, val in self._rhs.items():
            b[i] = val
        return b


# ---------------------------------------------------------------------------
# Solutions and backends


@dataclass
class RawSolution:
    """Primal blocks plus solver status.

    status: 'optimal' | 'infeasible' | 'inaccurate' | 'failed'. Symmetric
    blocks are returned as full matrices, 'mat' blocks in their 2-D shape.
    """

    status: str
    objective: float
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    solve_time: float = 0.0
    solver_status: str = ""
    residuals: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "inaccurate")


class SolverBackend:
    """Backend contract: supports zero/nonneg/SOC/PSD cones, returns a
    RawSolution; infeasibility is a reported status, not an exception.
    Instances need not be shareable; create one per concurrent solve."""

    name = "abstract"

    def solve(self, prog: ConicProgram, *, verbose: bool = False, feas_tol: float = 1e-8) -> RawSolution:
        raise NotImplementedError


def _unpack_solution(prog: ConicProgram, x: np.ndarray) -> dict[str, np.ndarray]:
    return {blk.name: blk.unpack(x) for blk in prog.blocks if not blk.name.startswith("_epi")}


class ClarabelBackend(SolverBackend):
    """Direct mapping onto the Clarabel interior-point solver."""

    name = "clarabel"

    def __init__(self, max_iter: int = 200):
        self.max_iter = max_iter

    def solve(self, prog: ConicProgram, *, verbose: bool = False, feas_tol: float = 1e-8) -> RawSolution:
        import clarabel

        c, A, b, cones = prog.build()
        cone_spec = []
        for cb in cones:
            if cb.kind == "zero":
                cone_spec.append(clarabel.ZeroConeT(cb.rows))
            elif cb.kind == "nonneg":
                cone_spec.append(clarabel.NonnegativeConeT(cb.rows))
            elif cb.kind == "soc":
                cone_spec.append(clarabel.SecondOrderConeT(cb.rows))
            elif cb.kind == "psd":
                cone_spec.append(clarabel.PSDTriangleConeT(cb.dim))
            else:  # pragma: no cover - builder only emits the four kinds
                raise ValueError(f"unsupported cone kind {cb.kind}")
        P = sp.csc_matrix((prog.nvar, prog.nvar))
        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.max_iter = self.max_iter
        settings.tol_feas = feas_tol
        settings.tol_gap_abs = feas_tol
        settings.tol_gap_rel = feas_tol
        t0 = time.perf_counter()
        solver = clarabel.DefaultSolver(P, c, A, b, cone_spec, settings)
        sol = solver.solve()
        elapsed = time.perf_counter() - t0
        status = str(sol.status)
        if status in ("Solved",):
            state = "optimal"
        elif status in ("AlmostSolved",):
            state = "inaccurate"
        elif "Infeasible" in status:
            state = "infeasible"
        else:
            state = "failed"
        blocks: dict[str, np.ndarray] = {}
        obj = np.nan
        residuals: dict[str, float] = {}
        if state in ("optimal", "inaccurate"):
            x = np.asarray(sol.x, dtype=float)
            blocks = _unpack_solution(prog, x)
            obj = float(c @ x) + prog._obj_const
            s = b - A @ x
            row = 0
            eq_res = 0.0
            for cb in cones:
                seg = s[row : row + cb.rows]
                if cb.kind == "zero":
                    eq_res = max(eq_res, float(np.abs(seg).max(initial=0.0)))
                row += cb.rows
            residuals["max_equality_residual"] = eq_res
        return RawSolution(
            status=state,
            objective=obj,
            blocks=blocks,
            solve_time=elapsed,
            solver_status=status,
            residuals=residuals,
        )


class CvxpyBackend(SolverBackend):
    """Generic backend via cvxpy; any installed conic solver applies."""

    name = "cvxpy"

    def __init__(self, solver: str | None = None):
        self.solver = solver

    def solve(self, prog: ConicProgram, *, verbose: bool = False, feas_tol: float = 1e-8) -> RawSolution:
        import cvxpy as cp

        c, A, b, cones = prog.build()
        x = cp.Variable(prog.nvar)
        constraints = []
        row = 0
        for cb in cones:
            Ak = A[row : row + cb.rows]
            bk = b[row : row + cb.rows]
            expr = bk - Ak @ x  # s in cone
            if cb.kind == "zero":
                constraints.append(expr == 0)
            elif cb.kind == "nonneg":
                constraints.append(expr >= 0)
            elif cb.kind == "soc":
                constraints.append(cp.SOC(expr[0], expr[1:]))
            elif cb.kind == "psd":
                d = cb.dim
                T = _unsvec_matrix(d)
                constraints.append(cp.reshape(T @ expr, (d, d), order="F") >> 0)
            row += cb.rows
        objective = cp.Minimize(c @ x + prog._obj_const)
        problem = cp.Problem(objective, constraints)
        solver = self.solver or "CLARABEL"
        t0 = time.perf_counter()
        try:
            problem.solve(solver=solver, verbose=verbose)
        except cp.error.SolverError as exc:
            return RawSolution(status="failed", objective=np.nan, solver_status=str(exc))
        elapsed = time.perf_counter() - t0
        stat = problem.status
        if stat == cp.OPTIMAL:
            state = "optimal"
        elif stat == cp.OPTIMAL_INACCURATE:
            state = "inaccurate"
        elif stat in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            state = "infeasible"
        else:
            state = "failed"
        blocks: dict[str, np.ndarray] = {}
        obj = np.nan
        if state in ("optimal", "inaccurate"):
            blocks = _unpack_solution(prog, np.asarray(x.value, dtype=float))
            obj = float(problem.value)
        return RawSolution(
            status=state,
            objective=obj,
            blocks=blocks,
            solve_time=elapsed,
            solver_status=str(stat),
        )


def _unsvec_matrix(d: int) -> sp.csc_matrix:
    """Sparse map from svec(d) coordinates to column-major vec of the full
    symmetric matrix (undoing the sqrt(2) scaling)."""
    r, c = _triu_indices(d)
    rows, cols, vals = [], [], []
    for idx, (i, j) in enumerate(zip(r, c)):
        if i == j:
            rows.append(i + d * j)
            cols.append(idx)
            vals.append(1.0)
        else:
            scale = 1.0 / _SQRT2
            rows.extend([i + d * j, j + d * i])
            cols.extend([idx, idx])
            vals.extend([scale, scale])
    return sp.coo_matrix((vals, (rows, cols)), shape=(d * d, svec_dim(d))).tocsc()


_BACKENDS = {
    "clarabel": ClarabelBackend,
    "cvxpy": CvxpyBackend,
}


def get_backend(name: str | None = None) -> SolverBackend:
    """Resolve a backend by name; defaults to the QUADSTEER_BACKEND
    environment variable, then Clarabel."""
    import os

    if name is None:
        name = os.environ.get("QUADSTEER_BACKEND", "clarabel")
    key = name.lower()
    if key.startswith("cvxpy:"):
        return CvxpyBackend(solver=key.split(":", 1)[1].upper())
    if key not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(_BACKENDS)}")
    return _BACKENDS[key]()
