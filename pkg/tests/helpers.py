"""Shared builders and oracles for the test suite."""

import numpy as np

from tetradg import basis
from tetradg.equations import RelaxationSet, build_element_operators, elastic_jacobians
from tetradg.kernels import KernelContext
from tetradg.mesh import compute_geometry

from conftest import refmats


def build_context(mesh, order, relax=None, width=1, dtype=np.float64):
    relax = relax or RelaxationSet()
    mats = refmats(order)
    geom = compute_geometry(mesh)
    ops = build_element_operators(
        geom.elem_verts, mesh.materials, mesh.neighbor, mesh.boundary, relax
    )
    ctx = KernelContext.create(mats, ops, width=width, dtype=dtype)
    return mats, geom, ops, ctx


def project_field(geom, ctx, mats, func, rows=9):
    """L2-project func(points) -> (rows, npts) onto the modal basis."""
    pts, wts = basis.tet_quadrature(ctx.order + 2)
    vals = mats.tet_basis.eval(pts)
    dofs = ctx.zero_state(geom.elem_verts.shape[0])
    for k in range(geom.elem_verts.shape[0]):
        v = geom.elem_verts[k]
        phys = v[0] + pts @ (v[1:] - v[0])
        dofs[k, :rows, :, 0] = (func(phys) * wts) @ vals
    return dofs


def l2_error(geom, ctx, mats, dofs, func, rows=9, slot=0):
    pts, wts = basis.tet_quadrature(ctx.order + 2)
    vals = mats.tet_basis.eval(pts)
    err2 = 0.0
    for k in range(geom.elem_verts.shape[0]):
        v = geom.elem_verts[k]
        phys = v[0] + pts @ (v[1:] - v[0])
        approx = np.einsum("vb,pb->vp", dofs[k, :rows, :, slot], vals)
        diff = approx - func(phys)
        err2 += 6.0 * geom.volume[k] * np.sum(wts * diff**2)
    return float(np.sqrt(err2))


def plane_p_wave(material, direction=(1.0, 0.0, 0.0), wavelength=1.0):
    """Exact P plane wave: q(x, t) = r sin(2 pi (n.x - vp t) / L)."""
    n = np.asarray(direction, dtype=float)
    n /= np.linalg.norm(n)
    A, B, C = elastic_jacobians(material)
    An = n[0] * A + n[1] * B + n[2] * C
    w, V = np.linalg.eig(An)
    ip = int(np.argmin(np.abs(w.real - material.vp)))
    r = V[:, ip].real
    r = r / np.abs(r).max()
    k = 2.0 * np.pi / wavelength

    def exact(points, t):
        phase = np.sin(k * (points @ n - material.vp * t))
        return np.outer(r, phase)

    return exact


def dense_volume_reference(T, ops, Kc_list, omega, k):
    """Literal transcription of the volume formulas for one element (oracle)."""
    nq = 9 + 6 * omega.size
    out = np.zeros((nq, T.shape[1]))
    Te = T[:9]
    for c in range(3):
        out[:9] += ops.AbarE[k, c] @ (Te @ Kc_list[c])
    for l in range(omega.size):
        Ta = T[9 + 6 * l : 15 + 6 * l]
        out[:9] += ops.El[k, l] @ Ta
        acc = np.zeros((6, T.shape[1]))
        for c in range(3):
            acc += ops.AbarA[k, c] @ (Te @ Kc_list[c])
        out[9 + 6 * l : 15 + 6 * l] = omega[l] * (acc - Ta)
    return out


def dense_surface_local_reference(T, ops, Ftilde, Fhat, omega, k):
    nq = 9 + 6 * omega.size
    out = np.zeros((nq, T.shape[1]))
    Te = T[:9]
    for i in range(4):
        prod = Te @ Ftilde[i]
        out[:9] += (ops.fluxE_in[k, i] @ prod) @ Fhat[i]
        base = (ops.fluxA_in[k, i] @ prod) @ Fhat[i]
        for l in range(omega.size):
            out[9 + 6 * l : 15 + 6 * l] += omega[l] * base
    return out
