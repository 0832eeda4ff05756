"""PDE operators for the 3D viscoelastic wave equations.

State ordering: q = (sxx, syy, szz, sxy, syz, sxz, u, v, w, theta^1_:, ...,
theta^m_:), one 6-component memory tensor per relaxation mechanism, so
N^q = 9 + 6m.  The system is

    q_t + A q_x + B q_y + C q_z = E q

with block Jacobians [[A_e, 0], [A_a, 0]] (the spatial operator never reads
memory variables) and coupling E = [[0, E_1..E_m], [0, -omega_l I]].  Each
memory tensor is a relaxation-filtered strain rate, d theta^l / dt =
omega_l (strain_rate - theta^l); the per-mechanism 9x6 blocks E_l apply the
anelastic Hooke tensor with moduli (lam+2mu)*Yp_l and mu*Ys_l, so zero
anelastic coefficients decouple the elastic solution exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

N_ELASTIC = 9


class InvalidMaterialError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class OverdeterminedFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Material:
    """Isotropic material: density, Lame parameters, quality factors."""

    rho: float
    lam: float
    mu: float
    qp: float = np.inf
    qs: float = np.inf

    def __post_init__(self):
        if not (self.rho > 0):
            raise InvalidMaterialError(f"density must be positive, got {self.rho}")
        if self.mu < 0 or self.lam + 2 * self.mu <= 0:
            raise InvalidMaterialError(
                f"degenerate moduli lam={self.lam} mu={self.mu}"
            )
        if not (self.qp > 0 and self.qs > 0):
            raise InvalidMaterialError("quality factors must be positive")

    @classmethod
    def from_velocities(cls, rho, vp, vs, qp=np.inf, qs=np.inf) -> "Material":
        mu = rho * vs**2
        lam = rho * vp**2 - 2 * mu
        return cls(rho=rho, lam=lam, mu=mu, qp=qp, qs=qs)

    @property
    def vp(self) -> float:
        return float(np.sqrt((self.lam + 2 * self.mu) / self.rho))

    @property
    def vs(self) -> float:
        return float(np.sqrt(self.mu / self.rho))


@dataclass(frozen=True)
class RelaxationSet:
    """Relaxation frequencies shared by all materials; m = 0 is pure elasticity.

    Anelastic coefficients are fitted per material via :func:`anelastic_coefficients`;
    only the frequencies and the fit band live here.
    """

    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    freq_band: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        object.__setattr__(self, "omega", om)
        if om.size and (np.any(om <= 0) or np.any(np.diff(om) <= 0)):
            raise ValueError("relaxation frequencies must be positive and increasing")

    @property
    def m(self) -> int:
        return int(self.omega.size)

    @property
    def nq(self) -> int:
        return N_ELASTIC + 6 * self.m


def fit_relaxation(center_freq: float, m: int) -> RelaxationSet:
    """Relaxation frequencies for m mechanisms, log-spaced over two decades
    around the center frequency (a single mechanism sits at the center)."""
    if m < 1:
        raise ValueError("m >= 1 required; use RelaxationSet() for elasticity")
    w_lo = 2 * np.pi * center_freq / 10.0
    w_hi = 2 * np.pi * center_freq * 10.0
    if m == 1:
        omega = np.array([np.sqrt(w_lo * w_hi)])
    else:
        omega = np.geomspace(w_lo, w_hi, m)
    return RelaxationSet(omega=omega, freq_band=(w_lo, w_hi))


def anelastic_coefficients(q_factor: float, relax: RelaxationSet) -> np.ndarray:
    """Anelastic coefficients Y_l approximating a constant-Q target over the band.

    Solves the exact linear relation sum_l Y_l (w_l w + w_l^2 / Q) / (w_l^2 + w^2)
    = 1/Q by least squares at 50 log-spaced test frequencies, sharpened toward
    the minimax fit by a few Lawson reweighting sweeps.  A single mechanism
    interpolates exactly at its own frequency.
    """
    m = relax.m
    if m == 0:
        return np.zeros(0)
    if m == 1:
        w_test = np.array([relax.omega[0]])
    else:
        w_test = np.geomspace(relax.freq_band[0], relax.freq_band[1], 50)
    q_inv = 1.0 / q_factor
    A = (relax.omega[None, :] * w_test[:, None] + relax.omega[None, :] ** 2 * q_inv) / (
        relax.omega[None, :] ** 2 + w_test[:, None] ** 2
    )
    rhs = np.full(w_test.size, q_inv)
    sing = np.linalg.svd(A, compute_uv=False)
    if m > w_test.size or sing[-1] < 1e-10 * sing[0]:
        warnings.warn(
            f"anelastic fit over-determined: {m} mechanisms against "
            f"{w_test.size} band samples (condition {sing[0] / sing[-1]:.1e})",
            OverdeterminedFitWarning,
        )
    wgt = np.ones(w_test.size)
    y = np.zeros(m)
    for _ in range(4):
        y, *_ = np.linalg.lstsq(A * wgt[:, None], rhs * wgt, rcond=None)
        resid = np.abs(A @ y - rhs)
        wgt = wgt * np.sqrt(resid / max(resid.max(), 1e-300) + 0.3)
    return y


def effective_q(omega_eval, y: np.ndarray, relax: RelaxationSet) -> np.ndarray:
    """Q(w) realized by coefficients y: Re M / Im M of the complex modulus."""
    w = np.atleast_1d(np.asarray(omega_eval, dtype=float))
    frac = relax.omega[None, :] / (relax.omega[None, :] + 1j * w[:, None])
    mod = 1.0 - np.sum(y[None, :] * frac, axis=1)
    return mod.real / mod.imag


def elastic_jacobians(mat: Material) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The 9x9 elastic Jacobians of the velocity-stress system."""
    lam, mu, rho = mat.lam, mat.mu, mat.rho
    lam2mu = lam + 2 * mu
    ri = 1.0 / rho
    A = np.zeros((9, 9))
    B = np.zeros((9, 9))
    C = np.zeros((9, 9))
    # stress rows: -dsigma/dt couplings to velocity gradients
    A[0, 6] = -lam2mu
    A[1, 6] = -lam
    A[2, 6] = -lam
    A[3, 7] = -mu
    A[5, 8] = -mu
    A[6, 0] = -ri
    A[7, 3] = -ri
    A[8, 5] = -ri

    B[0, 7] = -lam
    B[1, 7] = -lam2mu
    B[2, 7] = -lam
    B[3, 6] = -mu
    B[4, 8] = -mu
    B[6, 3] = -ri
    B[7, 1] = -ri
    B[8, 4] = -ri

    C[0, 8] = -lam
    C[1, 8] = -lam
    C[2, 8] = -lam2mu
    C[4, 7] = -mu
    C[5, 6] = -mu
    C[6, 5] = -ri
    C[7, 4] = -ri
    C[8, 2] = -ri
    return A, B, C


def anelastic_jacobians() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Material-independent 6x9 anelastic blocks: -(A_a dx + ...) q_e = strain rate."""
    Aa = np.zeros((6, 9))
    Ba = np.zeros((6, 9))
    Ca = np.zeros((6, 9))
    Aa[0, 6] = -1.0
    Aa[3, 7] = -0.5
    Aa[5, 8] = -0.5
    Ba[1, 7] = -1.0
    Ba[3, 6] = -0.5
    Ba[4, 8] = -0.5
    Ca[2, 8] = -1.0
    Ca[4, 7] = -0.5
    Ca[5, 6] = -0.5
    return Aa, Ba, Ca


def coupling_blocks(mat: Material, relax: RelaxationSet) -> list[np.ndarray]:
    """Per-mechanism 9x6 blocks E_l: stress rows receive -HookeY(theta^l)."""
    if relax.m == 0:
        return []
    yp = anelastic_coefficients(mat.qp, relax)
    ys = anelastic_coefficients(mat.qs, relax)
    blocks = []
    for l in range(relax.m):
        mu_a = mat.mu * ys[l]
        lam_a = (mat.lam + 2 * mat.mu) * yp[l] - 2 * mu_a
        E = np.zeros((9, 6))
        for i in range(3):
            for jj in range(3):
                E[i, jj] = -(lam_a + (2 * mu_a if i == jj else 0.0))
        for i in (3, 4, 5):
            E[i, i] = -2 * mu_a
        blocks.append(E)
    return blocks


@dataclass(frozen=True)
class JacobianSet:
    """All constant blocks of the hyperbolic system for one material."""

    Ae: np.ndarray
    Be: np.ndarray
    Ce: np.ndarray
    Aa: np.ndarray
    Ba: np.ndarray
    Ca: np.ndarray
    El: list[np.ndarray]
    omega: np.ndarray

    @property
    def m(self) -> int:
        return int(self.omega.size)

    @property
    def nq(self) -> int:
        return N_ELASTIC + 6 * self.m

    def full(self, which: str) -> np.ndarray:
        """Assemble the full N^q x N^q Jacobian ('x'|'y'|'z') or coupling ('E')."""
        nq = self.nq
        M = np.zeros((nq, nq))
        if which == "E":
            for l, E in enumerate(self.El):
                M[:9, 9 + 6 * l : 15 + 6 * l] = E
                M[9 + 6 * l : 15 + 6 * l, 9 + 6 * l : 15 + 6 * l] = -self.omega[
                    l
                ] * np.eye(6)
            return M
        e, a = {
            "x": (self.Ae, self.Aa),
            "y": (self.Be, self.Ba),
            "z": (self.Ce, self.Ca),
        }[which]
        M[:9, :9] = e
        for l in range(self.m):
            M[9 + 6 * l : 15 + 6 * l, :9] = self.omega[l] * a
        return M


def build_jacobians(mat: Material, relax: RelaxationSet) -> JacobianSet:
    Ae, Be, Ce = elastic_jacobians(mat)
    if relax.m:
        Aa, Ba, Ca = anelastic_jacobians()
        El = coupling_blocks(mat, relax)
    else:
        Aa = Ba = Ca = np.zeros((6, 9))
        El = []
    return JacobianSet(Ae, Be, Ce, Aa, Ba, Ca, El, relax.omega.copy())


# ---------------------------------------------------------------------------
# face frames, state rotation, Riemann flux solvers
# ---------------------------------------------------------------------------

_VOIGT = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)]


def stress_rotation(R: np.ndarray) -> np.ndarray:
    """6x6 Bond-type matrix rotating Voigt stresses: s' = T s for S' = R S R^T."""
    T = np.zeros((6, 6))
    for a, (i, j) in enumerate(_VOIGT):
        for b, (k, l) in enumerate(_VOIGT):
            if k == l:
                T[a, b] = R[i, k] * R[j, k]
            else:
                T[a, b] = R[i, k] * R[j, l] + R[i, l] * R[j, k]
    return T


def state_rotation(R: np.ndarray) -> np.ndarray:
    """9x9 elastic-state transformation for the 3x3 rotation R.

    Not orthogonal: the Voigt stress block is a Bond matrix, so the inverse
    is state_rotation(R.T), not the transpose.
    """
    T = np.zeros((9, 9))
    T[:6, :6] = stress_rotation(R)
    T[6:, 6:] = R
    return T


def _godunov_state_matrices(mat_in: Material, mat_out: Material):
    """Face-frame matrices G_in, G_out with q* = G_in q_in + G_out q_out.

    q* carries the six interface-continuous components (snn, sns, snt, vn,
    vs, vt); the remaining rows are zero and are never read by a face-normal
    Jacobian.
    """
    G_in = np.zeros((9, 9))
    G_out = np.zeros((9, 9))
    zp_in = mat_in.rho * mat_in.vp
    zp_out = mat_out.rho * mat_out.vp
    zs_in = mat_in.rho * mat_in.vs
    zs_out = mat_out.rho * mat_out.vs
    for tau_i, v_i, z_in, z_out in (
        (0, 6, zp_in, zp_out),
        (3, 7, zs_in, zs_out),
        (5, 8, zs_in, zs_out),
    ):
        zsum = z_in + z_out
        if zsum == 0.0:
            continue  # both sides fluidic in shear: no such wave
        G_in[tau_i, tau_i] = z_out / zsum
        G_in[tau_i, v_i] = -z_in * z_out / zsum
        G_out[tau_i, tau_i] = z_in / zsum
        G_out[tau_i, v_i] = z_in * z_out / zsum
        G_in[v_i, v_i] = z_in / zsum
        G_in[v_i, tau_i] = -1.0 / zsum
        G_out[v_i, v_i] = z_out / zsum
        G_out[v_i, tau_i] = 1.0 / zsum
    return G_in, G_out


# Ghost state for a traction-free face: mirrored tractions, copied velocities.
_MIRROR = np.diag([-1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0])


def flux_solvers(
    mat_in: Material,
    mat_out: Material | None,
    n: np.ndarray,
    s: np.ndarray,
    t: np.ndarray,
    boundary: str | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Godunov flux-solver matrices for one face of one element.

    Returns (Fe_in, Fe_out, Fa_in, Fa_out): the 9x9 / 6x9 matrices applied to
    the element's own trace and the neighbor's trace.  The surface-integral
    sign and the area/volume scaling are applied by the caller.  ``boundary``
    is None for interior faces, else 'free-surface' or 'outflow'.

    A free-surface face solves the same-material Riemann problem against the
    traction-mirrored ghost state (interface traction is exactly zero); an
    outflow face solves it against a zero exterior state, which reproduces
    the outgoing-characteristic (first-order absorbing) flux.
    """
    frame = np.stack([n, s, t])  # global -> face components
    Rot = state_rotation(frame)
    Rinv = state_rotation(frame.T)
    Ae_face, _, _ = elastic_jacobians(mat_in)
    Aa_face, _, _ = anelastic_jacobians()
    Rot_a = stress_rotation(frame.T)  # face -> global, 6-component tensors

    if boundary is None:
        if mat_out is None:
            raise ValueError("interior face needs the neighbor material")
        G_in, G_out = _godunov_state_matrices(mat_in, mat_out)
    elif boundary == "free-surface":
        g_in, g_out = _godunov_state_matrices(mat_in, mat_in)
        G_in = g_in + g_out @ _MIRROR
        G_out = np.zeros((9, 9))
    elif boundary == "outflow":
        G_in, _ = _godunov_state_matrices(mat_in, mat_in)
        G_out = np.zeros((9, 9))
    else:
        raise ValueError(f"unknown boundary kind {boundary!r}")

    Fe_in = Rinv @ Ae_face @ G_in @ Rot
    Fe_out = Rinv @ Ae_face @ G_out @ Rot
    Fa_in = Rot_a @ Aa_face @ G_in @ Rot
    Fa_out = Rot_a @ Aa_face @ G_out @ Rot
    return Fe_in, Fe_out, Fa_in, Fa_out


@dataclass
class ElementOperators:
    """Stacked per-element operators consumed by the kernels.

    AbarE (K,3,9,9), AbarA (K,3,6,9): reference-direction Jacobian combinations.
    El (K,m,9,6): anelastic coupling blocks.
    fluxE_in/out (K,4,9,9), fluxA_in/out (K,4,6,9): flux solvers including the
    surface sign and the |S_i| / (3 V_k) scaling.
    """

    AbarE: np.ndarray
    AbarA: np.ndarray
    El: np.ndarray
    fluxE_in: np.ndarray
    fluxE_out: np.ndarray
    fluxA_in: np.ndarray
    fluxA_out: np.ndarray
    omega: np.ndarray

    @property
    def m(self) -> int:
        return int(self.omega.size)

    @property
    def nq(self) -> int:
        return N_ELASTIC + 6 * self.m

    def astype(self, dtype) -> "ElementOperators":
        return ElementOperators(
            *(
                np.asarray(a, dtype=dtype)
                for a in (
                    self.AbarE,
                    self.AbarA,
                    self.El,
                    self.fluxE_in,
                    self.fluxE_out,
                    self.fluxA_in,
                    self.fluxA_out,
                )
            ),
            omega=np.asarray(self.omega, dtype=dtype),
        )


BND_INTERIOR = 0
BND_FREE_SURFACE = 1
BND_OUTFLOW = 2

_BOUNDARY_NAMES = {BND_FREE_SURFACE: "free-surface", BND_OUTFLOW: "outflow"}


def build_element_operators(
    elem_verts: np.ndarray,
    materials: list[Material],
    neighbor: np.ndarray,
    boundary_kind: np.ndarray,
    relax: RelaxationSet,
    ghost_materials: dict[tuple[int, int], Material] | None = None,
) -> ElementOperators:
    """Assemble all per-element operators.

    elem_verts (K,4,3): physical vertex coordinates, positively oriented.
    neighbor (K,4): face-neighbor element index, -1 on boundary faces.
    boundary_kind (K,4): BND_* code per face.
    ghost_materials: neighbor material for interior faces whose neighbor
    lives in another partition (neighbor index -1, interior code).
    """
    from .basis import FACE_VERTICES  # local import: avoids a cycle at module load

    K = elem_verts.shape[0]
    m = relax.m
    Ae_blocks = {}
    ops = ElementOperators(
        AbarE=np.zeros((K, 3, 9, 9)),
        AbarA=np.zeros((K, 3, 6, 9)),
        El=np.zeros((K, m, 9, 6)),
        fluxE_in=np.zeros((K, 4, 9, 9)),
        fluxE_out=np.zeros((K, 4, 9, 9)),
        fluxA_in=np.zeros((K, 4, 6, 9)),
        fluxA_out=np.zeros((K, 4, 6, 9)),
        omega=relax.omega.copy(),
    )
    Aa, Ba, Ca = anelastic_jacobians()
    Aa_dirs = np.stack([Aa, Ba, Ca])
    for k in range(K):
        v = elem_verts[k]
        J = (v[1:] - v[0]).T  # columns are edge vectors
        detJ = np.linalg.det(J)
        if detJ <= 0:
            raise GeometryError(f"element {k} is degenerate or inverted (detJ={detJ})")
        Jinv = np.linalg.inv(J)
        mat = materials[k]
        if mat not in Ae_blocks:
            El_k = np.stack(coupling_blocks(mat, relax)) if m else None
            Ae_blocks[mat] = (np.stack(elastic_jacobians(mat)), El_k)
        Ae_dirs, El_k = Ae_blocks[mat]
        # Abar_c = sum_dir Jinv[c, dir] * A_dir
        ops.AbarE[k] = np.einsum("cd,dij->cij", Jinv, Ae_dirs)
        ops.AbarA[k] = np.einsum("cd,dij->cij", Jinv, Aa_dirs)
        if m:
            ops.El[k] = El_k
        for i in range(4):
            p = v[list(FACE_VERTICES[i])]
            cross = np.cross(p[1] - p[0], p[2] - p[0])
            area2 = np.linalg.norm(cross)
            if area2 <= 0:
                raise GeometryError(f"element {k} face {i} has zero area")
            n = cross / area2
            s = (p[1] - p[0]) / np.linalg.norm(p[1] - p[0])
            t = np.cross(n, s)
            scale = -area2 / detJ  # = -(2*|S_i|) / (6 V_k)
            kind = int(boundary_kind[k, i])
            if kind == BND_INTERIOR:
                if neighbor[k, i] >= 0:
                    mat_out = materials[neighbor[k, i]]
                else:
                    mat_out = (ghost_materials or {}).get((k, i))
                    if mat_out is None:
                        raise GeometryError(
                            f"element {k} face {i}: interior face without neighbor material"
                        )
                fe_in, fe_out, fa_in, fa_out = flux_solvers(mat, mat_out, n, s, t)
            else:
                fe_in, fe_out, fa_in, fa_out = flux_solvers(
                    mat, None, n, s, t, boundary=_BOUNDARY_NAMES[kind]
                )
            ops.fluxE_in[k, i] = scale * fe_in
            ops.fluxE_out[k, i] = scale * fe_out
            ops.fluxA_in[k, i] = scale * fa_in
            ops.fluxA_out[k, i] = scale * fa_out
    return ops
