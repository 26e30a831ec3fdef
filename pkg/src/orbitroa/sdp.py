"""Dense primal-dual interior-point solver for small semidefinite programs.

Solves   min  sum_b <C_b, X_b> + c_f . w
         s.t. sum_b <A_kb, X_b> + G_k . w = h_k,   X_b PSD,  w free,

with Nesterov-Todd scaling and a Mehrotra predictor-corrector.  Free
variables are carried in an augmented KKT system rather than split into
cone differences.  Primal infeasibility is reported with a Farkas-style
certificate direction (y with A*(y) <= 0, G'y = 0, h'y > 0).  Scales to a
few thousand equality rows with PSD blocks of order ~50: the desk scale of
the Gram matrices produced by the sum-of-squares layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"


class SdpError(RuntimeError):
    pass


@dataclass
class SdpProblem:
    """Incrementally-built SDP in the primal form documented in the module."""

    block_sizes: list = field(default_factory=list)
    n_free: int = 0
    rows: list = field(default_factory=list)  # (blocks: {b: sym}, free: {i: c}, rhs)
    obj_blocks: dict = field(default_factory=dict)
    obj_free: dict = field(default_factory=dict)

    def add_psd_block(self, size: int) -> int:
        if size < 1:
            raise SdpError("PSD block must have positive size")
        self.block_sizes.append(size)
        return len(self.block_sizes) - 1

    def add_free(self, count: int = 1) -> list:
        idx = list(range(self.n_free, self.n_free + count))
        self.n_free += count
        return idx

    def add_constraint(self, rhs: float, blocks: dict | None = None, free: dict | None = None):
        blocks = {} if blocks is None else blocks
        for b, M in blocks.items():
            M = np.asarray(M, dtype=float)
            s = self.block_sizes[b]
            if M.shape != (s, s):
                raise SdpError(f"constraint matrix for block {b} must be {s}x{s}")
            blocks[b] = 0.5 * (M + M.T)
        self.rows.append((blocks, dict(free or {}), float(rhs)))

    def set_objective(self, blocks: dict | None = None, free: dict | None = None):
        self.obj_blocks = {
            b: 0.5 * (np.asarray(M, dtype=float) + np.asarray(M, dtype=float).T)
            for b, M in (blocks or {}).items()
        }
        self.obj_free = dict(free or {})

    @property
    def n_rows(self) -> int:
        return len(self.rows)


@dataclass
class SdpResult:
    status: str
    X: list  # PSD block values
    w: np.ndarray  # free variable values
    y: np.ndarray  # equality multipliers
    objective: float
    gap: float
    iterations: int
    certificate: np.ndarray | None = None  # Farkas direction on infeasible


def _nt_scaling(X: np.ndarray, Z: np.ndarray):
    """NT scaling W (W Z W = X) together with W^1/2 and W^-1/2."""
    Lx = np.linalg.cholesky(X)
    M1 = Lx.T @ Z @ Lx
    lam, Q = np.linalg.eigh(0.5 * (M1 + M1.T))
    lam = np.maximum(lam, 1e-300)
    inv_sqrt = Q @ np.diag(lam ** -0.5) @ Q.T
    W = Lx @ inv_sqrt @ Lx.T
    W = 0.5 * (W + W.T)
    sw, Uw = np.linalg.eigh(W)
    sw = np.maximum(sw, 1e-300)
    W_half = Uw @ np.diag(np.sqrt(sw)) @ Uw.T
    W_ihalf = Uw @ np.diag(1.0 / np.sqrt(sw)) @ Uw.T
    return W, W_half, W_ihalf


def _max_step(S: np.ndarray, dS: np.ndarray) -> float:
    """Largest alpha with S + alpha dS still PSD (S assumed PD)."""
    L = np.linalg.cholesky(S)
    Linv = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    lam_min = float(np.linalg.eigvalsh(Linv @ dS @ Linv.T)[0])
    if lam_min >= 0:
        return 1.0
    return min(1.0, -1.0 / lam_min)


def solve_sdp(
    problem: SdpProblem,
    max_iter: int = 100,
    tol_gap: float = 1e-9,
    tol_feas: float = 1e-9,
    tol_cert: float = 1e-8,
    verbose: bool = False,
) -> SdpResult:
    """Run the interior-point iteration; see module docstring for the form.

    Returns status "optimal" with duality gap <= tol_gap (relative),
    "infeasible"/"unbounded" with a certificate direction, or
    "numerical_failure" when neither can be concluded.
    """
    sizes = list(problem.block_sizes)
    nb = len(sizes)
    m = problem.n_rows
    nf = problem.n_free
    if m == 0:
        w0 = np.zeros(nf)
        return SdpResult(OPTIMAL, [np.eye(s) for s in sizes], w0, np.zeros(0), 0.0, 0.0, 0)

    # row-normalized constraint data, block-local dense storage
    h = np.zeros(m)
    G = np.zeros((m, nf))
    A_rows: list = [dict() for _ in range(m)]
    for k, (blocks, free, rhs) in enumerate(problem.rows):
        scale = max(
            [abs(rhs)]
            + [float(np.max(np.abs(M))) for M in blocks.values()]
            + [abs(c) for c in free.values()]
        )
        scale = scale if scale > 0 else 1.0
        h[k] = rhs / scale
        for i, c in free.items():
            G[k, i] = c / scale
        A_rows[k] = {b: M / scale for b, M in blocks.items()}

    # per-block: indices of rows touching it + stacked vec matrices
    block_rows: list = []
    block_mats: list = []
    for b in range(nb):
        rows_b = [k for k in range(m) if b in A_rows[k]]
        block_rows.append(np.array(rows_b, dtype=int))
        if rows_b:
            block_mats.append(np.stack([A_rows[k][b].ravel() for k in rows_b]))
        else:
            block_mats.append(np.zeros((0, sizes[b] ** 2)))

    C = [problem.obj_blocks.get(b, np.zeros((sizes[b], sizes[b]))) for b in range(nb)]
    c_f = np.zeros(nf)
    for i, c in problem.obj_free.items():
        c_f[i] = c

    def A_of(Xs):
        out = np.zeros(m)
        for b in range(nb):
            if block_rows[b].size:
                out[block_rows[b]] += block_mats[b] @ Xs[b].ravel()
        return out

    def At_of(y):
        return [
            (block_mats[b].T @ y[block_rows[b]]).reshape(sizes[b], sizes[b])
            if block_rows[b].size
            else np.zeros((sizes[b], sizes[b]))
            for b in range(nb)
        ]

    ntot = sum(sizes)
    scale0 = max(1.0, float(np.max(np.abs(h))))
    X = [scale0 * np.eye(s) for s in sizes]
    Z = [max(1.0, float(np.max(np.abs(C[b]))) if C[b].size else 1.0) * np.eye(s)
         for b, s in enumerate(sizes)]
    y = np.zeros(m)
    w = np.zeros(nf)

    hnorm = 1.0 + np.linalg.norm(h)
    cnorm = 1.0 + max([np.linalg.norm(M) for M in C] + [np.linalg.norm(c_f)])

    status = NUMERICAL_FAILURE
    it = 0
    for it in range(1, max_iter + 1):
        AtY = At_of(y)
        r_p = h - A_of(X) - G @ w
        R_d = [C[b] - Z[b] - AtY[b] for b in range(nb)]
        r_f = c_f - G.T @ y
        gap = sum(float(np.sum(X[b] * Z[b])) for b in range(nb))
        mu = gap / ntot
        pobj = sum(float(np.sum(C[b] * X[b])) for b in range(nb)) + float(c_f @ w)
        dobj = float(h @ y)
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        pres = np.linalg.norm(r_p) / hnorm
        dres = max(
            [np.linalg.norm(R_d[b]) / cnorm for b in range(nb)]
            + [np.linalg.norm(r_f) / cnorm]
        )
        if verbose:
            print(f"  it {it:3d}  mu {mu:9.2e}  pres {pres:8.1e}  dres {dres:8.1e}  gap {relgap:8.1e}")
        if pres <= tol_feas and dres <= tol_feas and (relgap <= tol_gap or gap <= tol_gap):
            status = OPTIMAL
            break

        # Farkas-style certificate checks
        ynorm = np.linalg.norm(y)
        if ynorm > 1e4:
            yhat = y / ynorm
            lam_max = max(float(np.linalg.eigvalsh(M)[-1]) for M in At_of(yhat)) if nb else 0.0
            if (
                float(h @ yhat) > tol_cert
                and lam_max <= tol_cert
                and np.linalg.norm(G.T @ yhat) <= tol_cert
            ):
                status = INFEASIBLE
                y = yhat
                break
        xscale = sum(float(np.trace(X[b])) for b in range(nb)) + np.linalg.norm(w)
        if xscale > 1e7:
            Xhat = [Xb / xscale for Xb in X]
            what = w / xscale
            obj_dir = sum(float(np.sum(C[b] * Xhat[b])) for b in range(nb)) + float(c_f @ what)
            if (
                np.linalg.norm(A_of(Xhat) + G @ what) <= tol_cert
                and obj_dir < -tol_cert
            ):
                status = UNBOUNDED
                break

        try:
            scalings = [_nt_scaling(X[b], Z[b]) for b in range(nb)]
            Ws = [s[0] for s in scalings]
            W_half = [s[1] for s in scalings]
            W_ihalf = [s[2] for s in scalings]
            WkW = [np.kron(Ws[b], Ws[b]) for b in range(nb)]
            Zinv = [np.linalg.inv(Z[b]) for b in range(nb)]
        except np.linalg.LinAlgError:
            break  # iterate hit the cone boundary; fall through to final checks

        # Schur complement over the equality multipliers
        M_big = np.zeros((m + nf, m + nf))
        for b in range(nb):
            if block_rows[b].size:
                Gb = block_mats[b]
                M_big[np.ix_(block_rows[b], block_rows[b])] += Gb @ WkW[b] @ Gb.T
        M_big[:m, m:] = G
        M_big[m:, :m] = G.T
        M_big[:m, :m] += 1e-14 * np.eye(m)
        try:
            lu = sla.lu_factor(M_big)
        except (ValueError, sla.LinAlgError):
            break

        def solve_direction(Rc):
            rhs1 = r_p.copy()
            for b in range(nb):
                if block_rows[b].size:
                    contrib = Rc[b] - Ws[b] @ R_d[b] @ Ws[b]
                    rhs1[block_rows[b]] -= block_mats[b] @ contrib.ravel()
            sol = sla.lu_solve(lu, np.concatenate([rhs1, r_f]))
            dy, dw = sol[:m], sol[m:]
            AtdY = At_of(dy)
            dZ = [R_d[b] - AtdY[b] for b in range(nb)]
            dX = [Rc[b] - Ws[b] @ dZ[b] @ Ws[b] for b in range(nb)]
            dX = [0.5 * (D + D.T) for D in dX]
            return dX, dy, dZ, dw

        # predictor
        Rc_aff = [-X[b] for b in range(nb)]
        dX_a, dy_a, dZ_a, dw_a = solve_direction(Rc_aff)
        ap = min((_max_step(X[b], dX_a[b]) for b in range(nb)), default=1.0)
        ad = min((_max_step(Z[b], dZ_a[b]) for b in range(nb)), default=1.0)
        mu_aff = sum(
            float(np.sum((X[b] + ap * dX_a[b]) * (Z[b] + ad * dZ_a[b]))) for b in range(nb)
        ) / ntot
        sigma = min(1.0, max((mu_aff / mu) ** 3 if mu > 0 else 0.1, 1e-8))

        # corrector with the NT-scaled Mehrotra second-order term:
        # W^1/2 H(d_lambda_x d_lambda_z) W^1/2 = (dX dZ W + W dZ dX)/2
        Rc = []
        for b in range(nb):
            corr = 0.5 * (dX_a[b] @ dZ_a[b] @ Ws[b] + Ws[b] @ dZ_a[b] @ dX_a[b])
            Rc.append(sigma * mu * Zinv[b] - X[b] - corr)
        dX, dy, dZ, dw = solve_direction(Rc)
        ap = 0.98 * min((_max_step(X[b], dX[b]) for b in range(nb)), default=1.0)
        ad = 0.98 * min((_max_step(Z[b], dZ[b]) for b in range(nb)), default=1.0)
        if ap < 1e-10 and ad < 1e-10:
            break
        for b in range(nb):
            X[b] = X[b] + ap * dX[b]
            Z[b] = Z[b] + ad * dZ[b]
        y = y + ad * dy
        w = w + ap * dw

    if status == NUMERICAL_FAILURE:
        # final certificate sweep before giving up
        ynorm = np.linalg.norm(y)
        if ynorm > 0:
            yhat = y / ynorm
            lam_max = max(
                (float(np.linalg.eigvalsh(M)[-1]) for M in At_of(yhat)), default=0.0
            )
            if (
                float(h @ yhat) > tol_cert
                and lam_max <= tol_cert
                and np.linalg.norm(G.T @ yhat) <= tol_cert
            ):
                status = INFEASIBLE
        xscale = sum(float(np.trace(X[b])) for b in range(nb)) + np.linalg.norm(w)
        if status == NUMERICAL_FAILURE and xscale > 1e5:
            Xhat = [Xb / xscale for Xb in X]
            what = w / xscale
            obj_dir = sum(float(np.sum(C[b] * Xhat[b])) for b in range(nb)) + float(c_f @ what)
            if np.linalg.norm(A_of(Xhat) + G @ what) <= 1e-6 and obj_dir < -1e-8:
                status = UNBOUNDED

    pobj = sum(float(np.sum(C[b] * X[b])) for b in range(nb)) + float(c_f @ w)
    gap = sum(float(np.sum(X[b] * Z[b])) for b in range(nb))
    cert = y.copy() if status == INFEASIBLE else None
    return SdpResult(
        status=status,
        X=[Xb.copy() for Xb in X],
        w=w.copy(),
        y=y.copy(),
        objective=pobj,
        gap=gap,
        iterations=it,
        certificate=cert,
    )
