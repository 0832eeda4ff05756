"""Reference-tetrahedron machinery: modal basis, quadrature, and operator matrices.

The modal basis is the orthonormal Dubiner-type expansion on the unit
tetrahedron T = {xi >= 0, xi_1 + xi_2 + xi_3 <= 1}, built from Jacobi
polynomials in collapsed coordinates.  All matrices that a solver kernel
touches (stiffness ``Kc``, flux ``Ftilde``/``Fhat``/``Fbar``) are returned
premultiplied by the inverse of the (diagonal) mass matrix, so the kernels
never see a mass solve.

Face conventions
----------------
Local faces carry an *ordered* vertex tuple whose right-handed normal points
outward; faces are parametrized from the unit triangle {chi, tau >= 0,
chi + tau <= 1} via ``point = A + chi*(B-A) + tau*(C-A)``.  A neighboring
element sees the shared face through one of three relative orientations
``h in {1,2,3}``: h-1 is the index of the neighbor-tuple vertex that matches
the local tuple's first vertex, with reversed traversal (outward normals of
the two elements are opposite).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import eval_jacobi, roots_jacobi

# Unit reference tetrahedron.
REF_VERTICES = np.array(
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
)

# Ordered face vertex tuples; right-handed normal of each tuple is outward.
FACE_VERTICES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))

REF_FACE_NORMALS = np.array(
    [
        [0.0, 0.0, -1.0],
        [0.0, -1.0, 0.0],
        [-1.0, 0.0, 0.0],
        [1.0 / np.sqrt(3.0)] * 3,
    ]
)


class AssemblyError(RuntimeError):
    """Raised when reference-matrix assembly cannot meet its exactness guard."""


def basis_counts(order: int) -> tuple[int, int]:
    """Number of 3D (tet) and 2D (triangle) modes for a given order.

    B(O) = O(O+1)(O+2)/6 and F(O) = O(O+1)/2.
    """
    if not 1 <= order <= 8:
        raise ValueError(f"order must be in [1, 8], got {order}")
    nb3d = order * (order + 1) * (order + 2) // 6
    nb2d = order * (order + 1) // 2
    return nb3d, nb2d


@dataclass(frozen=True)
class BasisInfo:
    order: int
    nb3d: int
    nb2d: int

    @classmethod
    def for_order(cls, order: int) -> "BasisInfo":
        nb3d, nb2d = basis_counts(order)
        return cls(order=order, nb3d=nb3d, nb2d=nb2d)


def tet_mode_indices(order: int) -> list[tuple[int, int, int]]:
    """(p, q, u) exponent triples, graded by total degree; constant mode first."""
    modes = []
    for deg in range(order):
        for p in range(deg + 1):
            for q in range(deg - p + 1):
                modes.append((p, q, deg - p - q))
    return modes


def tri_mode_indices(order: int) -> list[tuple[int, int]]:
    return [(p, deg - p) for deg in range(order) for p in range(deg + 1)]


def _jacobi_deriv(n: int, alpha: float, beta: float, x: np.ndarray) -> np.ndarray:
    # d/dx P_n^(a,b) = (n+a+b+1)/2 * P_{n-1}^(a+1,b+1)
    if n == 0:
        return np.zeros_like(x)
    return 0.5 * (n + alpha + beta + 1) * eval_jacobi(n - 1, alpha + 1, beta + 1, x)


def _guarded_collapse(num, den, eps=1e-14):
    ok = np.abs(den) > eps
    safe = np.where(ok, den, 1.0)
    return np.where(ok, 2.0 * num / safe - 1.0, -1.0)


def _collapsed_tet(r, s, t):
    a = _guarded_collapse(r, 1.0 - s - t)
    b = _guarded_collapse(s, 1.0 - t)
    c = 2.0 * t - 1.0
    return a, b, c


class TetBasis:
    """Orthonormal modal basis on the unit tetrahedron, evaluable with gradients."""

    def __init__(self, order: int):
        self.order = order
        self.modes = tet_mode_indices(order)
        self.nb = len(self.modes)
        # Normalization chosen so the mass matrix is the identity.
        self._norms = np.ones(self.nb)
        pts, wts = tet_quadrature(order + 1)
        vals = self._eval_raw(pts)
        self._norms = 1.0 / np.sqrt(np.einsum("qb,q,qb->b", vals, wts, vals))

    def _eval_raw(self, points: np.ndarray) -> np.ndarray:
        r, s, t = points[:, 0], points[:, 1], points[:, 2]
        a, b, c = _collapsed_tet(r, s, t)
        out = np.empty((len(r), self.nb))
        for n, (p, q, u) in enumerate(self.modes):
            fa = eval_jacobi(p, 0, 0, a)
            gb = ((1.0 - b) / 2.0) ** p * eval_jacobi(q, 2 * p + 1, 0, b)
            hc = ((1.0 - c) / 2.0) ** (p + q) * eval_jacobi(u, 2 * p + 2 * q + 2, 0, c)
            out[:, n] = fa * gb * hc
        return out

    def eval(self, points: np.ndarray) -> np.ndarray:
        """Basis values; shape (npoints, B)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self._eval_raw(points) * self._norms

    def eval_grad(self, points: np.ndarray) -> np.ndarray:
        """Gradients w.r.t. (xi1, xi2, xi3); shape (npoints, B, 3).

        Uses the collapsed-coordinate chain rule; points must be interior
        (quadrature nodes are), the collapse is singular on two faces.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        r, s, t = points[:, 0], points[:, 1], points[:, 2]
        a, b, c = _collapsed_tet(r, s, t)
        den_a = 1.0 - s - t
        den_b = 1.0 - t
        da_dr = 2.0 / den_a
        da_ds = (1.0 + a) / den_a
        db_ds = 2.0 / den_b
        db_dt = (1.0 + b) / den_b
        out = np.empty((len(r), self.nb, 3))
        for n, (p, q, u) in enumerate(self.modes):
            fa = eval_jacobi(p, 0, 0, a)
            dfa = _jacobi_deriv(p, 0, 0, a)
            jb = eval_jacobi(q, 2 * p + 1, 0, b)
            djb = _jacobi_deriv(q, 2 * p + 1, 0, b)
            fb_fac = ((1.0 - b) / 2.0) ** p
            gb = fb_fac * jb
            dgb = fb_fac * djb
            if p > 0:
                dgb = dgb - 0.5 * p * ((1.0 - b) / 2.0) ** (p - 1) * jb
            jc = eval_jacobi(u, 2 * p + 2 * q + 2, 0, c)
            djc = _jacobi_deriv(u, 2 * p + 2 * q + 2, 0, c)
            fc_fac = ((1.0 - c) / 2.0) ** (p + q)
            hc = fc_fac * jc
            dhc = fc_fac * djc
            if p + q > 0:
                dhc = dhc - 0.5 * (p + q) * ((1.0 - c) / 2.0) ** (p + q - 1) * jc
            d_dr = dfa * da_dr * gb * hc
            d_ds = dfa * da_ds * gb * hc + fa * dgb * db_ds * hc
            d_dt = dfa * da_ds * gb * hc + fa * dgb * db_dt * hc + fa * gb * dhc * 2.0
            out[:, n, 0] = d_dr
            out[:, n, 1] = d_ds
            out[:, n, 2] = d_dt
        return out * self._norms[None, :, None]


class TriBasis:
    """Orthonormal modal basis on the unit triangle."""

    def __init__(self, order: int):
        self.order = order
        self.modes = tri_mode_indices(order)
        self.nb = len(self.modes)
        self._norms = np.ones(self.nb)
        pts, wts = tri_quadrature(order + 1)
        vals = self._eval_raw(pts)
        self._norms = 1.0 / np.sqrt(np.einsum("qb,q,qb->b", vals, wts, vals))

    def _eval_raw(self, points: np.ndarray) -> np.ndarray:
        chi, tau = points[:, 0], points[:, 1]
        a = _guarded_collapse(chi, 1.0 - tau)
        b = 2.0 * tau - 1.0
        out = np.empty((len(chi), self.nb))
        for n, (p, q) in enumerate(self.modes):
            out[:, n] = (
                eval_jacobi(p, 0, 0, a)
                * ((1.0 - b) / 2.0) ** p
                * eval_jacobi(q, 2 * p + 1, 0, b)
            )
        return out

    def eval(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self._eval_raw(points) * self._norms


def tet_quadrature(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed-coordinate Gauss-Jacobi rule on the unit tet.

    n points per direction; exact for total degree <= 2n-1.
    """
    xa, wa = roots_jacobi(n, 0, 0)
    xb, wb = roots_jacobi(n, 1, 0)
    xc, wc = roots_jacobi(n, 2, 0)
    A, B, C = np.meshgrid(xa, xb, xc, indexing="ij")
    WA, WB, WC = np.meshgrid(wa, wb, wc, indexing="ij")
    t = (1.0 + C) / 2.0
    s = (1.0 + B) * (1.0 - C) / 4.0
    r = (1.0 + A) * (1.0 - B) * (1.0 - C) / 8.0
    pts = np.stack([r.ravel(), s.ravel(), t.ravel()], axis=1)
    wts = (WA * WB * WC).ravel() / 64.0
    return pts, wts


def tri_quadrature(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed-coordinate Gauss-Jacobi rule on the unit triangle."""
    xa, wa = roots_jacobi(n, 0, 0)
    xb, wb = roots_jacobi(n, 1, 0)
    A, B = np.meshgrid(xa, xb, indexing="ij")
    WA, WB = np.meshgrid(wa, wb, indexing="ij")
    tau = (1.0 + B) / 2.0
    chi = (1.0 + A) * (1.0 - B) / 4.0
    pts = np.stack([chi.ravel(), tau.ravel()], axis=1)
    wts = (WA * WB).ravel() / 8.0
    return pts, wts


def face_embedding(face: int, chi_tau: np.ndarray) -> np.ndarray:
    """Map unit-triangle parameters onto reference-tet face coordinates."""
    chi_tau = np.atleast_2d(np.asarray(chi_tau, dtype=float))
    va, vb, vc = (REF_VERTICES[v] for v in FACE_VERTICES[face])
    return va + np.outer(chi_tau[:, 0], vb - va) + np.outer(chi_tau[:, 1], vc - va)


def orientation_remap(h: int, chi_tau: np.ndarray) -> np.ndarray:
    """Neighbor-face parameters matching local-face parameters under orientation h.

    Local barycentric weights (1-chi-tau, chi, tau) land on neighbor tuple
    positions (h-1, h-2, h-3) mod 3 (reversed traversal).
    """
    chi_tau = np.atleast_2d(np.asarray(chi_tau, dtype=float))
    bary = np.stack(
        [1.0 - chi_tau[:, 0] - chi_tau[:, 1], chi_tau[:, 0], chi_tau[:, 1]], axis=1
    )
    gamma = np.empty_like(bary)
    for i in range(3):
        gamma[:, (h - 1 - i) % 3] = bary[:, i]
    return gamma[:, 1:]


@dataclass(frozen=True)
class ReferenceMatrices:
    """Premultiplied reference-element operator matrices for one order.

    Kc[c]      (B, B): mass-premultiplied stiffness, Kc[m, n] = inv(M) @ (phi_m, d phi_n / d xi_c).
    Ftilde[i]  (B, F): volume modes -> face-trace modes on local face i.
    Fhat[i]    (F, B): mass-premultiplied transposed flux-return matrices.
    Fbar[j][h-1] (B, F): neighbor volume modes (their face j) -> local face modes
                 under relative orientation h.
    """

    info: BasisInfo
    mass: np.ndarray
    Kc: tuple[np.ndarray, np.ndarray, np.ndarray]
    Ftilde: tuple[np.ndarray, ...]
    Fhat: tuple[np.ndarray, ...]
    Fbar: tuple[tuple[np.ndarray, ...], ...]
    tet_basis: TetBasis
    tri_basis: TriBasis

    def fbar(self, j: int, h: int) -> np.ndarray:
        return self.Fbar[j][h - 1]


def assemble_reference_matrices(order: int, quad_points: int | None = None) -> ReferenceMatrices:
    """Build all reference matrices for the given order.

    Quadrature guard: with the default point count the rules are exact to
    degree 2*order + 1; every assembled bilinear form has degree
    <= 2*order - 2.  A caller-supplied ``quad_points`` below the exactness
    requirement is rejected.
    """
    info = BasisInfo.for_order(order)
    nq = order + 1 if quad_points is None else quad_points
    if 2 * nq - 1 < 2 * order:
        raise AssemblyError(
            f"quadrature with {nq} points per direction is exact only to "
            f"degree {2 * nq - 1} < {2 * order}"
        )
    tet = TetBasis(order)
    tri = TriBasis(order)

    pts, wts = tet_quadrature(nq)
    vals = tet.eval(pts)
    grads = tet.eval_grad(pts)
    mass = vals.T @ (wts[:, None] * vals)
    inv_mass_diag = 1.0 / np.diag(mass)
    off = mass - np.diag(np.diag(mass))
    if np.max(np.abs(off)) > 1e-10 * np.max(np.diag(mass)):
        raise AssemblyError("mass matrix not diagonal; basis/quadrature inconsistent")

    Kc = tuple(
        inv_mass_diag[:, None] * (vals.T @ (wts[:, None] * grads[:, :, c]))
        for c in range(3)
    )

    tpts, twts = tri_quadrature(nq)
    psi = tri.eval(tpts)
    Ftilde = []
    Fhat = []
    for i in range(4):
        phi_on_face = tet.eval(face_embedding(i, tpts))
        ft = phi_on_face.T @ (twts[:, None] * psi)
        Ftilde.append(ft)
        Fhat.append(inv_mass_diag[:, None] * ft)
    Fhat = [f.T for f in Fhat]

    Fbar = []
    for j in range(4):
        per_h = []
        for h in (1, 2, 3):
            remapped = orientation_remap(h, tpts)
            phi_neigh = tet.eval(face_embedding(j, remapped))
            per_h.append(phi_neigh.T @ (twts[:, None] * psi))
        Fbar.append(tuple(per_h))

    return ReferenceMatrices(
        info=info,
        mass=mass,
        Kc=Kc,
        Ftilde=tuple(Ftilde),
        Fhat=tuple(Fhat),
        Fbar=tuple(Fbar),
        tet_basis=tet,
        tri_basis=tri,
    )


def dump_matrices(mats: ReferenceMatrices, path) -> None:
    """Write all reference matrices as a dense text artifact (debug/golden files)."""
    with open(path, "w") as fh:
        fh.write(f"# order {mats.info.order} B {mats.info.nb3d} F {mats.info.nb2d}\n")

        def block(name, arr):
            fh.write(f"## {name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(",".join(f"{v:.17e}" for v in row) + "\n")

        block("mass", mats.mass)
        for c in range(3):
            block(f"K{c + 1}", mats.Kc[c])
        for i in range(4):
            block(f"Ftilde{i + 1}", mats.Ftilde[i])
        for i in range(4):
            block(f"Fhat{i + 1}", mats.Fhat[i])
        for j in range(4):
            for h in (1, 2, 3):
                block(f"Fbar{j + 1}.{h}", mats.fbar(j, h))
