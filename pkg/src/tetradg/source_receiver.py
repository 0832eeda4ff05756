"""Kinematic point sources, receivers, seismograms, and the misfit metric.

Sources are moment-tensor point sources with a uniformly sampled moment-rate
series (linear interpolation between samples, zero outside the support);
each element integrates the rate over its own local step, which keeps the
injection exact under local time stepping.  The stress rows receive the
negative moment rate.  Receivers sample particle velocities at a fixed
cadence decoupled from element steps, evaluating the Taylor dense output of
the owning element's predictor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import factorial

import numpy as np

from .equations import N_ELASTIC


class SourceLocationError(ValueError):
    pass


class ReceiverLocationError(ValueError):
    pass


class MisfitError(ValueError):
    pass


def locate_point(geom, x: np.ndarray, tol: float = 1e-9) -> tuple[int, np.ndarray]:
    """Containing element and reference coordinates of a physical point."""
    x = np.asarray(x, dtype=float)
    for k in range(geom.elem_verts.shape[0]):
        v = geom.elem_verts[k]
        J = (v[1:] - v[0]).T
        xi = np.linalg.solve(J, x - v[0])
        if np.all(xi >= -tol) and xi.sum() <= 1.0 + tol:
            return k, xi
    raise SourceLocationError(f"point {x.tolist()} lies outside the mesh")


@dataclass
class SampledSeries:
    """Uniformly sampled time series, linearly interpolated, zero outside."""

    t0: float
    dt: float
    values: np.ndarray  # (nt,) or (nt, W)

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("source time series must be finite")

    @property
    def t_last(self) -> float:
        return self.t0 + (self.values.shape[0] - 1) * self.dt

    def _value(self, t: float) -> np.ndarray:
        if t < self.t0 or t > self.t_last:
            return np.zeros_like(self.values[0]) if self.values.ndim > 1 else 0.0
        u = (t - self.t0) / self.dt
        j = min(int(np.floor(u)), self.values.shape[0] - 2)
        w = u - j
        return (1 - w) * self.values[j] + w * self.values[j + 1]

    def integrate(self, a: float, b: float):
        """Exact integral of the piecewise-linear interpolant over [a, b]."""
        a = max(a, self.t0)
        b = min(b, self.t_last)
        if b <= a:
            return np.zeros_like(self.values[0]) if self.values.ndim > 1 else 0.0
        # break at every sample point inside (a, b)
        j0 = int(np.ceil((a - self.t0) / self.dt - 1e-12))
        j1 = int(np.floor((b - self.t0) / self.dt + 1e-12))
        knots = [a] + [self.t0 + j * self.dt for j in range(j0, j1 + 1)] + [b]
        knots = [t for i, t in enumerate(knots) if i == 0 or t > knots[i - 1] + 0.0]
        total = 0.0 * self._value(a)
        for lo, hi in zip(knots[:-1], knots[1:]):
            total = total + 0.5 * (hi - lo) * (self._value(lo) + self._value(hi))
        return total


@dataclass
class PointSource:
    """Moment-tensor point source at a fixed location."""

    location: np.ndarray  # (3,)
    moment: np.ndarray  # (6,) Voigt components, N*m
    rate: SampledSeries  # moment rate, scales `moment`

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=float)
        self.moment = np.asarray(self.moment, dtype=float)


@dataclass
class SourceTerm:
    """Element-resolved source ready for injection: state rows x modes x slots."""

    elem: int
    coeffs: np.ndarray  # (nq, B)
    rate: SampledSeries

    def integral(self, t0: float, t1: float) -> np.ndarray:
        """State increment over [t0, t1]: coeffs scaled by the rate integral."""
        s = self.rate.integrate(t0, t1)
        s = np.atleast_1d(s)
        return self.coeffs[:, :, None] * s[None, None, :]


def project_source(
    src: PointSource, geom, tet_basis, nq: int, elem: int | None = None
) -> SourceTerm:
    """Modal point-source coefficients: basis at the source point over |J|.

    The (diagonal, orthonormal) mass inverse is the identity; the moment
    tensor enters the six stress rows with a negative sign.  ``elem`` pins
    the owning element when the caller already resolved a boundary tie.
    """
    if elem is None:
        elem, xi = locate_point(geom, src.location)
    else:
        v = geom.elem_verts[elem]
        xi = np.linalg.solve((v[1:] - v[0]).T, src.location - v[0])
    phi = tet_basis.eval(xi[None, :])[0]
    detj = 6.0 * geom.volume[elem]
    coeffs = np.zeros((nq, phi.size))
    coeffs[:6] = np.outer(-src.moment, phi / detj)
    return SourceTerm(elem=elem, coeffs=coeffs, rate=src.rate)


class Receiver:
    """Velocity-channel recorder with Taylor dense output at fixed cadence."""

    def __init__(self, location, elem: int, phi: np.ndarray, sample_dt: float,
                 n_samples: int, width: int = 1):
        self.location = np.asarray(location, dtype=float)
        self.elem = elem
        self.phi = phi
        self.sample_dt = sample_dt
        self.n_samples = n_samples
        self.samples = np.zeros((n_samples, 3, width))
        self.filled = np.zeros(n_samples, bool)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.sample_dt

    def record_state(self, dofs_elem: np.ndarray, t: float) -> None:
        """Direct sample from a state (used for the t = 0 sample)."""
        j = int(round(t / self.sample_dt))
        if 0 <= j < self.n_samples and abs(j * self.sample_dt - t) < 1e-9 * max(t, 1.0):
            self.samples[j] = np.einsum(
                "vbw,b->vw", dofs_elem[N_ELASTIC - 3 : N_ELASTIC], self.phi
            )
            self.filled[j] = True

    def record(self, derivs_elem: np.ndarray, t0: float, t1: float) -> None:
        """Samples in (t0, t1] from the Taylor expansion about t0."""
        j_lo = int(np.floor(t0 / self.sample_dt + 1e-12)) + 1
        j_hi = int(np.floor(t1 / self.sample_dt + 1e-12))
        order = derivs_elem.shape[0]
        for j in range(max(j_lo, 0), min(j_hi, self.n_samples - 1) + 1):
            tau = j * self.sample_dt - t0
            state = np.zeros_like(derivs_elem[0, N_ELASTIC - 3 : N_ELASTIC])
            for d in range(order):
                state += tau**d / factorial(d) * derivs_elem[d, N_ELASTIC - 3 : N_ELASTIC]
            self.samples[j] = np.einsum("vbw,b->vw", state, self.phi)
            self.filled[j] = True


def make_receiver(location, geom, tet_basis, sample_dt: float, n_samples: int,
                  width: int = 1) -> Receiver:
    try:
        elem, xi = locate_point(geom, location)
    except SourceLocationError as exc:
        raise ReceiverLocationError(str(exc)) from None
    phi = tet_basis.eval(xi[None, :])[0]
    return Receiver(location, elem, phi, sample_dt, n_samples, width)


@dataclass
class Seismogram:
    """Uniformly sampled velocity channels at one receiver."""

    times: np.ndarray  # (nt,)
    data: np.ndarray  # (nt, 3)
    location: np.ndarray | None = None

    @property
    def sample_dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0


def misfit(s: Seismogram | np.ndarray, ref: Seismogram | np.ndarray) -> np.ndarray:
    """Per-channel normalized squared difference: sum (s - r)^2 / sum r^2."""
    a = s.data if isinstance(s, Seismogram) else np.asarray(s)
    b = ref.data if isinstance(ref, Seismogram) else np.asarray(ref)
    a = np.atleast_2d(a.T).T
    b = np.atleast_2d(b.T).T
    if a.shape != b.shape:
        raise MisfitError(f"sampling mismatch: {a.shape} vs {b.shape}")
    denom = np.sum(b * b, axis=0)
    if np.any(denom == 0):
        raise MisfitError("reference seismogram is identically zero")
    return np.sum((a - b) ** 2, axis=0) / denom


def write_seismogram_csv(path, rec: Receiver, slot: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "u", "v", "w"])
        for j in range(rec.n_samples):
            u, v, wv = rec.samples[j, :, slot]
            w.writerow([f"{rec.times[j]:.12g}", f"{u:.17e}", f"{v:.17e}", f"{wv:.17e}"])


def read_seismogram_csv(path) -> Seismogram:
    times, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["time", "u", "v", "w"]:
            raise MisfitError(f"{path}: unexpected header {header}")
        for rec in reader:
            times.append(float(rec[0]))
            rows.append([float(x) for x in rec[1:4]])
    return Seismogram(times=np.array(times), data=np.array(rows))


def write_misfit_csv(path, entries) -> None:
    """entries: iterable of (receiver_name, channel, E)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["receiver", "channel", "misfit"])
        for name, channel, value in entries:
            w.writerow([name, channel, f"{value:.17e}"])
