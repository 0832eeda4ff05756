"""The four ADER-DG compute kernels: time, volume, surface, update.

All kernels are pure functions over stacked element batches with layout
``(n_elem, rows, modes, width)`` -- mode-major with the fusion width
innermost.  The elastic rows (9) and the anelastic rows (6 per mechanism)
are kept split: the elastic stiffness and face products are computed once
and reused by the anelastic parts, and the mechanism sum is computed once
and scaled by each relaxation frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .basis import ReferenceMatrices
from .equations import N_ELASTIC, ElementOperators


@dataclass
class KernelContext:
    """Reference and per-element matrices cast to the working precision."""

    order: int
    nq: int
    nb: int
    nf: int
    width: int
    dtype: np.dtype
    Kc: np.ndarray  # (3, B, B)
    Ftilde: np.ndarray  # (4, B, F)
    Fhat: np.ndarray  # (4, F, B)
    ops: ElementOperators
    omega: np.ndarray  # (m,)

    @classmethod
    def create(
        cls,
        mats: ReferenceMatrices,
        ops: ElementOperators,
        width: int = 1,
        dtype=np.float64,
    ) -> "KernelContext":
        dtype = np.dtype(dtype)
        return cls(
            order=mats.info.order,
            nq=N_ELASTIC + 6 * ops.m,
            nb=mats.info.nb3d,
            nf=mats.info.nb2d,
            width=width,
            dtype=dtype,
            Kc=np.stack(mats.Kc).astype(dtype),
            Ftilde=np.stack(mats.Ftilde).astype(dtype),
            Fhat=np.stack(mats.Fhat).astype(dtype),
            ops=ops.astype(dtype),
            omega=ops.omega.astype(dtype),
        )

    @property
    def m(self) -> int:
        return int(self.omega.size)

    def zero_state(self, n_elem: int) -> np.ndarray:
        return np.zeros((n_elem, self.nq, self.nb, self.width), dtype=self.dtype)


def _mech(arr: np.ndarray, l: int) -> np.ndarray:
    return arr[:, N_ELASTIC + 6 * l : N_ELASTIC + 6 * (l + 1)]


def ck_derivatives(dofs: np.ndarray, ctx: KernelContext, idx=None) -> np.ndarray:
    """Time derivatives by the Cauchy-Kowalevski recursion.

    Returns d with shape (n, order, nq, B, W); d[:, 0] is the expansion state.
    Each elastic step computes tmp_c = (d^e) Kc^T once and reuses it for the
    anelastic rows, whose spatial sum is computed once and scaled by omega_l.
    """
    q = dofs if idx is None else dofs[idx]
    n = q.shape[0]
    out = np.zeros((n, ctx.order, ctx.nq, ctx.nb, ctx.width), dtype=ctx.dtype)
    out[:, 0] = q
    AbarE = ctx.ops.AbarE if idx is None else ctx.ops.AbarE[idx]
    AbarA = ctx.ops.AbarA if idx is None else ctx.ops.AbarA[idx]
    El = ctx.ops.El if idx is None else ctx.ops.El[idx]
    for j in range(ctx.order - 1):
        de = out[:, j, :N_ELASTIC]
        # modal spatial derivatives, one per reference direction
        tmp = np.einsum("nvbw,cmb->ncvmw", de, ctx.Kc)
        elastic = -np.einsum("ncuv,ncvmw->numw", AbarE, tmp)
        if ctx.m:
            spatial_a = -np.einsum("ncuv,ncvmw->numw", AbarA, tmp)
            for l in range(ctx.m):
                da = _mech(out[:, j], l)
                elastic += np.einsum("nuv,nvbw->nubw", El[:, l], da)
                _mech(out[:, j + 1], l)[:] = ctx.omega[l] * (spatial_a - da)
        out[:, j + 1, :N_ELASTIC] = elastic
    return out


def taylor_window(derivs: np.ndarray, a: float, b: float, order: int) -> np.ndarray:
    """Integral of the Taylor expansion over [t0+a, t0+b] (t0 = expansion point)."""
    out = np.zeros_like(derivs[:, 0])
    for d in range(order):
        coeff = (b ** (d + 1) - a ** (d + 1)) / factorial(d + 1)
        out += coeff * derivs[:, d]
    return out


def taylor_integrate(derivs: np.ndarray, dt: float, order: int | None = None) -> np.ndarray:
    """Time-integrated state over [t0, t0+dt]: sum_d dt^(d+1)/(d+1)! * d_d."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    order = derivs.shape[1] if order is None else order
    return taylor_window(derivs, 0.0, dt, order)


def taylor_evaluate(derivs: np.ndarray, tau: float) -> np.ndarray:
    """Pointwise Taylor state at expansion offset tau (dense output)."""
    out = np.zeros_like(derivs[:, 0])
    for d in range(derivs.shape[1]):
        out += tau**d / factorial(d) * derivs[:, d]
    return out


def volume_kernel(T: np.ndarray, ctx: KernelContext, idx=None) -> np.ndarray:
    """Volume contribution from the time-integrated state."""
    AbarE = ctx.ops.AbarE if idx is None else ctx.ops.AbarE[idx]
    AbarA = ctx.ops.AbarA if idx is None else ctx.ops.AbarA[idx]
    El = ctx.ops.El if idx is None else ctx.ops.El[idx]
    Te = T[:, :N_ELASTIC]
    out = np.zeros((T.shape[0], ctx.nq, ctx.nb, ctx.width), dtype=ctx.dtype)
    tv = np.einsum("nvbw,cbm->ncvmw", Te, ctx.Kc)
    out[:, :N_ELASTIC] = np.einsum("ncuv,ncvmw->numw", AbarE, tv)
    if ctx.m:
        spatial_a = np.einsum("ncuv,ncvmw->numw", AbarA, tv)
        for l in range(ctx.m):
            Ta = _mech(T, l)
            out[:, :N_ELASTIC] += np.einsum("nuv,nvbw->nubw", El[:, l], Ta)
            _mech(out, l)[:] = ctx.omega[l] * (spatial_a - Ta)
    return out


def surface_local(T: np.ndarray, ctx: KernelContext, idx=None):
    """Element-local surface contribution plus the raw face products.

    Returns (S_local (n, nq, B, W), products (n, 4, 9, F, W)).  The products
    (T^e F~_i) are computed once, feed both the elastic and the
    omega-scaled anelastic accumulation, and are returned for reuse.
    """
    fE = ctx.ops.fluxE_in if idx is None else ctx.ops.fluxE_in[idx]
    fA = ctx.ops.fluxA_in if idx is None else ctx.ops.fluxA_in[idx]
    Te = T[:, :N_ELASTIC]
    products = np.einsum("nvbw,ibf->nivfw", Te, ctx.Ftilde)
    out = np.zeros((T.shape[0], ctx.nq, ctx.nb, ctx.width), dtype=ctx.dtype)
    se = np.einsum("niuv,nivfw->niufw", fE, products)
    out[:, :N_ELASTIC] = np.einsum("niufw,ifb->nubw", se, ctx.Fhat)
    if ctx.m:
        sa = np.einsum("niuv,nivfw->niufw", fA, products)
        base = np.einsum("niufw,ifb->nubw", sa, ctx.Fhat)
        for l in range(ctx.m):
            _mech(out, l)[:] = ctx.omega[l] * base
    return out, products


def surface_neighbor(payloads: np.ndarray, ctx: KernelContext, idx=None) -> np.ndarray:
    """Neighbor surface contribution from the four face payloads.

    payloads (n, 4, 9, F, W) are the products (T^e_neighbor Fbar_{j,h}),
    computed locally or received over the transport; boundary faces carry
    zeros (their outgoing flux solvers are zero anyway).
    """
    fE = ctx.ops.fluxE_out if idx is None else ctx.ops.fluxE_out[idx]
    fA = ctx.ops.fluxA_out if idx is None else ctx.ops.fluxA_out[idx]
    out = np.zeros((payloads.shape[0], ctx.nq, ctx.nb, ctx.width), dtype=ctx.dtype)
    se = np.einsum("niuv,nivfw->niufw", fE, payloads)
    out[:, :N_ELASTIC] = np.einsum("niufw,ifb->nubw", se, ctx.Fhat)
    if ctx.m:
        sa = np.einsum("niuv,nivfw->niufw", fA, payloads)
        base = np.einsum("niufw,ifb->nubw", sa, ctx.Fhat)
        for l in range(ctx.m):
            _mech(out, l)[:] = ctx.omega[l] * base
    return out


def update(dofs: np.ndarray, *contributions: np.ndarray) -> np.ndarray:
    """Element-local timestep: state plus all kernel contributions, in place."""
    for c in contributions:
        dofs += c
    return dofs
