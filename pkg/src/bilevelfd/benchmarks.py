"""Deterministic benchmark problems: a scalar worked example with full closed
forms, a rank-deficient quadratic game, and low-rank matrix sensing split
into an upper/lower pair.

Each problem bundles an oracle, a default regularizer, default solver
hyperparameters, a default initial triple, and (where derivable) smoothness
constants. Problems serialize to .npz snapshots (row-major float64 arrays
plus a JSON meta record) so runs replay without regeneration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import make_rng, symmetrize
from .problem import BilevelOracle, BoxIndicator, SmoothnessConstants, Zero
from .solver import HyperParams

Array = np.ndarray

SNAPSHOT_FORMAT = "bilevelfd-problem"
SNAPSHOT_VERSION = 1


# ---------------------------------------------------------------------------
# scalar worked example
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyProblem:
    """Scalar bilevel problem with a box-constrained upper variable.

    g(x, y) = x y^2 + x sin^2 y has minimizer y*(x) = 0 for x > 0 with
    curvature 4x there, yet loses convexity elsewhere (curvature 0 at
    y = pi/2); F(x) = f(x, 0) = x^2 is minimized at the box edge x = 1.
    """

    box_lo: float = 1.0
    box_hi: float = 2.0

    kind = "toy"

    def oracle(self) -> BilevelOracle:
        def f(x, y):
            return float(x[0] ** 2 + y[0] ** 2 + 3.0 * x[0] * np.sin(y[0]) ** 2)

        def g(x, y):
            return float(x[0] * y[0] ** 2 + x[0] * np.sin(y[0]) ** 2)

        def grad_f_x(x, y):
            return np.array([2.0 * x[0] + 3.0 * np.sin(y[0]) ** 2])

        def grad_f_y(x, y):
            return np.array([2.0 * y[0] + 3.0 * x[0] * np.sin(2.0 * y[0])])

        def grad_g_x(x, y):
            return np.array([y[0] ** 2 + np.sin(y[0]) ** 2])

        def grad_g_y(x, y):
            return np.array([2.0 * x[0] * y[0] + x[0] * np.sin(2.0 * y[0])])

        def hess_g_yy(x, y):
            return np.array([[2.0 * x[0] + 2.0 * x[0] * np.cos(2.0 * y[0])]])

        def cross_g_xy(x, y):
            return np.array([[2.0 * y[0] + np.sin(2.0 * y[0])]])

        return BilevelOracle(
            dim_x=1,
            dim_y=1,
            f=f,
            g=g,
            grad_f_x=grad_f_x,
            grad_f_y=grad_f_y,
            grad_g_x=grad_g_x,
            grad_g_y=grad_g_y,
            hess_g_yy=hess_g_yy,
            cross_g_xy=cross_g_xy,
            y_star=lambda x: np.zeros(1),
            lower_value=lambda x: 0.0,
        )

    def regularizer(self) -> BoxIndicator:
        return BoxIndicator(np.array([self.box_lo]), np.array([self.box_hi]))

    def constants(self) -> SmoothnessConstants:
        # Valid on the operating region x in [1, 2], |y| <= 3 (Hessian and
        # gradient bounds evaluated there; unbounded globally).
        return SmoothnessConstants(
            mu=1.0,
            l_f=15.0,
            l_g=13.0,
            c_fy=12.0,
            c_fx=7.0,
            c_gxy=7.0,
            c_gy=14.0,
            l_gxy=4.0,
            l_gyy=9.0,
        )

    def default_hyperparams(self, iters: int = 2000, seed: int = 0) -> HyperParams:
        c = self.constants()
        r_v = c.c_fy / c.mu
        return HyperParams(
            v_radius=r_v,
            hvp_cap=r_v * c.l_g,
            mu=c.mu,
            lip_g=c.l_g,
            iters=iters,
            seed=seed,
        )

    def default_init(self) -> tuple[Array, Array, Array]:
        return np.array([1.5]), np.array([0.3]), np.array([0.0])

    def metrics(self, x: Array, y: Array) -> dict:
        return {}

    def snapshot_payload(self) -> tuple[dict, dict]:
        return {"box_lo": self.box_lo, "box_hi": self.box_hi}, {}


def toy_problem(box_lo: float = 1.0, box_hi: float = 2.0) -> ToyProblem:
    return ToyProblem(box_lo=box_lo, box_hi=box_hi)


# ---------------------------------------------------------------------------
# quadratic game with rank-deficient curvature
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PLGameProblem:
    """Quadratic game: f = x'Px/2 + x'R1 y over g = y'Qy/2 + x'R2 y.

    P and Q are sample covariances of rank <= l < d, so the lower problem is
    gradient dominated but not strongly convex. With ``project_coupling`` the
    coupling matrix is projected onto range(Q), which makes the lower problem
    bounded for every x and unlocks the closed-form y*(x) and lower value.
    """

    d: int
    l: int
    n: int
    P: Array
    Q: Array
    R1: Array
    R2: Array
    x0: Array
    y0: Array
    seed: int
    diag_lo: float
    diag_hi: float
    project_coupling: bool
    _q_eigvals: Array = field(repr=False, default=None)
    _q_eigvecs: Array = field(repr=False, default=None)

    kind = "plgame"

    RANK_TOL = 1e-8

    def oracle(self) -> BilevelOracle:
        P, Q, R1, R2 = self.P, self.Q, self.R1, self.R2

        y_star = lower_value = None
        if self.project_coupling:
            vecs_r, vals_r = self._range_basis()

            def y_star(x, vecs_r=vecs_r, vals_r=vals_r):
                return -vecs_r @ ((vecs_r.T @ (R2.T @ x)) / vals_r)

            def lower_value(x):
                ys = y_star(x)
                return float(0.5 * ys @ (Q @ ys) + x @ (R2 @ ys))

        return BilevelOracle(
            dim_x=self.d,
            dim_y=self.d,
            f=lambda x, y: float(0.5 * x @ (P @ x) + x @ (R1 @ y)),
            g=lambda x, y: float(0.5 * y @ (Q @ y) + x @ (R2 @ y)),
            grad_f_x=lambda x, y: P @ x + R1 @ y,
            grad_f_y=lambda x, y: R1.T @ x,
            grad_g_x=lambda x, y: R2 @ y,
            grad_g_y=lambda x, y: Q @ y + R2.T @ x,
            hess_g_yy=lambda x, y: Q,
            cross_g_xy=lambda x, y: R2,
            y_star=y_star,
            lower_value=lower_value,
        )

    def _range_basis(self) -> tuple[Array, Array]:
        vals, vecs = self._q_spectrum()
        mask = vals > self.RANK_TOL
        return vecs[:, mask], vals[mask]

    def _q_spectrum(self) -> tuple[Array, Array]:
        return self._q_eigvals, self._q_eigvecs

    def regularizer(self) -> Zero:
        return Zero()

    def pl_constant(self) -> float:
        """Smallest nonzero eigenvalue of Q (gradient-dominance constant of
        the projected-coupling lower problem)."""
        vals, _ = self._q_spectrum()
        nz = vals[vals > self.RANK_TOL]
        return float(nz.min())

    def lip_lower(self) -> float:
        vals, _ = self._q_spectrum()
        return float(vals.max()) + float(np.linalg.norm(self.R2, 2))

    def default_hyperparams(self, iters: int = 1000, seed: int = 0) -> HyperParams:
        mu = self.pl_constant()
        lip = self.lip_lower()
        r_v = 10.0
        return HyperParams(
            v_radius=r_v,
            hvp_cap=r_v * lip,
            mu=mu,
            lip_g=lip,
            iters=iters,
            seed=seed,
        )

    def default_init(self) -> tuple[Array, Array, Array]:
        return self.x0.copy(), self.y0.copy(), np.zeros(self.d)

    def metrics(self, x: Array, y: Array) -> dict:
        return {}

    def snapshot_payload(self) -> tuple[dict, dict]:
        params = {
            "d": self.d,
            "l": self.l,
            "n": self.n,
            "seed": self.seed,
            "diag_lo": self.diag_lo,
            "diag_hi": self.diag_hi,
            "project_coupling": self.project_coupling,
        }
        arrays = {
            "P": self.P,
            "Q": self.Q,
            "R1": self.R1,
            "R2": self.R2,
            "x0": self.x0,
            "y0": self.y0,
        }
        return params, arrays


def gen_plgame(
    d: int,
    l: Optional[int] = None,
    n: Optional[int] = None,
    mu: float = 0.1,
    L: float = 1.0,
    seed: int = 0,
    project_coupling: bool = False,
) -> PLGameProblem:
    """Sample a game instance.

    P and Q are sample covariances of n draws from N(0, U D U') with
    column-orthogonal U (d x l) and diagonal D uniform in [mu, L], hence
    rank at most l < d. R1 and R2 are 0.01 times sample covariances of draws
    from N(0, 0.001 V V') with V a d x d standard normal matrix. Defaults:
    l = d // 2, n = 50 * d. The initial (x0, y0) standard normal pair is
    drawn from the same stream and stored with the instance.
    """
    if l is None:
        l = d // 2
    if n is None:
        n = 50 * d
    if not (0 < l < d):
        raise ValueError(f"need 0 < l < d, got l={l}, d={d}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if not (0 < mu < L):
        raise ValueError(f"need 0 < mu < L, got mu={mu}, L={L}")

    rng = make_rng(seed)

    def covariance_factor() -> Array:
        u = np.linalg.qr(rng.standard_normal((d, l)))[0]
        diag = rng.uniform(mu, L, size=l)
        return u * np.sqrt(diag)

    def low_rank_cov() -> Array:
        factor = covariance_factor()  # d x l, so samples are U sqrt(D) z
        z = rng.standard_normal((n, l))
        samples = z @ factor.T
        return symmetrize(samples.T @ samples / n)

    def coupling_cov() -> Array:
        v = rng.standard_normal((d, d))
        z = rng.standard_normal((n, d))
        samples = np.sqrt(0.001) * (z @ v.T)
        return 0.01 * symmetrize(samples.T @ samples / n)

    P = low_rank_cov()
    Q = low_rank_cov()
    R1 = coupling_cov()
    R2 = coupling_cov()
    x0 = rng.standard_normal(d)
    y0 = rng.standard_normal(d)

    return _finish_plgame(d, l, n, P, Q, R1, R2, x0, y0, seed, mu, L, project_coupling)


def _finish_plgame(d, l, n, P, Q, R1, R2, x0, y0, seed, mu, L, project_coupling) -> PLGameProblem:
    vals, vecs = np.linalg.eigh(Q)
    if project_coupling:
        mask = vals > PLGameProblem.RANK_TOL
        proj = vecs[:, mask] @ vecs[:, mask].T
        R2 = R2 @ proj
    return PLGameProblem(
        d=d,
        l=l,
        n=n,
        P=P,
        Q=Q,
        R1=R1,
        R2=R2,
        x0=x0,
        y0=y0,
        seed=seed,
        diag_lo=mu,
        diag_hi=L,
        project_coupling=project_coupling,
        _q_eigvals=vals,
        _q_eigvecs=vecs,
    )


# ---------------------------------------------------------------------------
# matrix sensing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MatrixSensingProblem:
    """Low-rank recovery from linear measurements, split into a bilevel pair.

    The factor U (d x r) is cut into an upper block x (first r-1 columns,
    column-major flattened) and a lower column y (last column). The upper
    objective averages the per-sample losses over the validation split, the
    lower objective over the training split. Labels are exact, so every
    split shares the global solutions U U' = H*.
    """

    d: int
    r: int
    n: int
    C: Array  # (n, d, d) sensing matrices
    o: Array  # (n,) exact labels <C_i, H*>
    U_star: Array  # (d, r) ground-truth factor
    train_idx: Array
    val_idx: Array
    U0: Array  # (d, r) default initial factor
    seed: int

    kind = "matsense"

    @property
    def H_star(self) -> Array:
        return self.U_star @ self.U_star.T

    def unflatten(self, x: Array, y: Array) -> Array:
        u = np.empty((self.d, self.r))
        u[:, : self.r - 1] = x.reshape((self.d, self.r - 1), order="F")
        u[:, self.r - 1] = y
        return u

    def flatten(self, U: Array) -> tuple[Array, Array]:
        return U[:, : self.r - 1].ravel(order="F").copy(), U[:, self.r - 1].copy()

    def _residuals(self, idx: Array, U: Array) -> Array:
        H = U @ U.T
        return np.einsum("nij,ij->n", self.C[idx], H) - self.o[idx]

    def _loss(self, idx: Array, U: Array) -> float:
        res = self._residuals(idx, U)
        return float(0.5 * np.mean(res**2))

    def _grad_U(self, idx: Array, U: Array) -> Array:
        res = self._residuals(idx, U)
        w = np.einsum("n,nij->ij", res, self.C[idx]) / idx.size
        return (w + w.T) @ U

    def _hess_yy(self, idx: Array, U: Array) -> Array:
        y = U[:, self.r - 1]
        res = self._residuals(idx, U)
        my = np.einsum("nij,j->ni", self.C[idx], y) + np.einsum("nji,j->ni", self.C[idx], y)
        term1 = np.einsum("ni,nj->ij", my, my) / idx.size
        w = np.einsum("n,nij->ij", res, self.C[idx]) / idx.size
        return symmetrize(term1 + w + w.T)

    def _cross_xy(self, idx: Array, U: Array) -> Array:
        xcols = U[:, : self.r - 1]
        y = U[:, self.r - 1]
        my = np.einsum("nij,j->ni", self.C[idx], y) + np.einsum("nji,j->ni", self.C[idx], y)
        mu_c = np.einsum("nij,jc->nic", self.C[idx], xcols) + np.einsum("nji,jc->nic", self.C[idx], xcols)
        blocks = np.einsum("nic,nk->cik", mu_c, my) / idx.size
        return blocks.reshape((self.d * (self.r - 1), self.d))

    def oracle(self) -> BilevelOracle:
        tr, va = self.train_idx, self.val_idx

        def split_grads(idx, x, y):
            g = self._grad_U(idx, self.unflatten(x, y))
            return g[:, : self.r - 1].ravel(order="F"), g[:, self.r - 1].copy()

        return BilevelOracle(
            dim_x=self.d * (self.r - 1),
            dim_y=self.d,
            f=lambda x, y: self._loss(va, self.unflatten(x, y)),
            g=lambda x, y: self._loss(tr, self.unflatten(x, y)),
            grad_f_x=lambda x, y: split_grads(va, x, y)[0],
            grad_f_y=lambda x, y: split_grads(va, x, y)[1],
            grad_g_x=lambda x, y: split_grads(tr, x, y)[0],
            grad_g_y=lambda x, y: split_grads(tr, x, y)[1],
            hess_g_yy=lambda x, y: self._hess_yy(tr, self.unflatten(x, y)),
            cross_g_xy=lambda x, y: self._cross_xy(tr, self.unflatten(x, y)),
        )

    def regularizer(self) -> Zero:
        return Zero()

    def default_hyperparams(self, iters: int = 5000, seed: int = 0) -> HyperParams:
        return HyperParams(
            v_radius=10.0,
            hvp_cap=1000.0,
            iters=iters,
            seed=seed,
        )

    def default_init(self) -> tuple[Array, Array, Array]:
        x0, y0 = self.flatten(self.U0)
        return x0, y0, np.zeros(self.d)

    def metrics(self, x: Array, y: Array) -> dict:
        loss, dist = sensing_metrics(self, self.unflatten(x, y))
        return {"loss": loss, "distance": dist}

    def snapshot_payload(self) -> tuple[dict, dict]:
        params = {"d": self.d, "r": self.r, "n": self.n, "seed": self.seed}
        arrays = {
            "C": self.C,
            "o": self.o,
            "U_star": self.U_star,
            "train_idx": self.train_idx,
            "val_idx": self.val_idx,
            "U0": self.U0,
        }
        return params, arrays


def gen_matsense(d: int, r: int, n: Optional[int] = None, seed: int = 0) -> MatrixSensingProblem:
    """Sample a sensing instance.

    The ground-truth factor has N(0, 1/d) entries, the n (default 30 * d)
    sensing matrices are standard normal, labels are exact inner products,
    and indices split 40% train / 60% validation from the same seed. The
    stored default initial factor is a small random multiple (0.3x) of a
    fresh N(0, 1/d) draw, far from the solution but off the saddle at zero.
    """
    if r < 2:
        raise ValueError(f"need r >= 2 for the upper/lower split, got {r}")
    if n is None:
        n = 30 * d
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")

    rng = make_rng(seed)
    U_star = rng.standard_normal((d, r)) / np.sqrt(d)
    C = rng.standard_normal((n, d, d))
    o = np.einsum("nij,ij->n", C, U_star @ U_star.T)
    perm = rng.permutation(n)
    n_train = int(round(0.4 * n))
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    U0 = 0.3 * rng.standard_normal((d, r)) / np.sqrt(d)

    return MatrixSensingProblem(
        d=d,
        r=r,
        n=n,
        C=C,
        o=o,
        U_star=U_star,
        train_idx=train_idx,
        val_idx=val_idx,
        U0=U0,
        seed=seed,
    )


def sensing_metrics(problem: MatrixSensingProblem, U: Array) -> tuple[float, float]:
    """Full-sample loss and normalized recovery distance.

    loss = (1/2n) sum_i (<C_i, U U'> - o_i)^2,
    distance = ||U U' - H*||_F^2 / ||H*||_F^2.
    """
    if U.shape != (problem.d, problem.r):
        raise ValueError(f"expected U of shape {(problem.d, problem.r)}, got {U.shape}")
    H = U @ U.T
    res = np.einsum("nij,ij->n", problem.C, H) - problem.o
    loss = float(0.5 * np.mean(res**2))
    diff = H - problem.H_star
    dist = float(np.sum(diff**2) / np.sum(problem.H_star**2))
    return loss, dist


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def save_problem(problem, path) -> None:
    """Serialize a problem to .npz: float64 arrays plus a JSON meta record."""
    params, arrays = problem.snapshot_payload()
    meta = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "kind": problem.kind,
        "params": params,
    }
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_problem(path):
    """Rebuild a problem from a snapshot written by ``save_problem``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != SNAPSHOT_FORMAT:
            raise ValueError(f"{path} is not a {SNAPSHOT_FORMAT} snapshot")
        if meta.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {meta.get('version')}")
        kind = meta["kind"]
        params = meta["params"]
        arrays = {k: data[k] for k in data.files if k != "__meta__"}

    if kind == "toy":
        return ToyProblem(box_lo=params["box_lo"], box_hi=params["box_hi"])
    if kind == "plgame":
        # R2 was already projected at generation time when the flag was set,
        # so rebuild without re-projecting and restore the flag afterwards.
        rebuilt = _finish_plgame(
            params["d"],
            params["l"],
            params["n"],
            arrays["P"],
            arrays["Q"],
            arrays["R1"],
            arrays["R2"],
            arrays["x0"],
            arrays["y0"],
            params["seed"],
            params["diag_lo"],
            params["diag_hi"],
            False,
        )
        return dataclasses.replace(rebuilt, project_coupling=params["project_coupling"])
    if kind == "matsense":
        return MatrixSensingProblem(
            d=params["d"],
            r=params["r"],
            n=params["n"],
            C=arrays["C"],
            o=arrays["o"],
            U_star=arrays["U_star"],
            train_idx=arrays["train_idx"],
            val_idx=arrays["val_idx"],
            U0=arrays["U0"],
            seed=params["seed"],
        )
    raise ValueError(f"unknown problem kind {kind!r}")
