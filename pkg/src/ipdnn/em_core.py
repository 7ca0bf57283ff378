"""2-D TM forward scattering with a Richmond pulse-basis method of moments.

Conventions
-----------
* time dependence ``exp(+j*omega*t)``; lossy media have ``Im(eps) <= 0``
* Green's function ``g(r, r') = H0^(2)(k0 |r - r'|) / (4j)``
* the DOI is the square ``[-L/2, L/2]^2`` centred on the origin; cell ``(i, j)``
  sits at ``x = -L/2 + (j + 1/2) h``, ``y = -L/2 + (i + 1/2) h`` and is flattened
  row-major (``n = i * n_side + j``)
* measurement matrices are ``receivers x transmitters``
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy import special
from scipy.constants import c as C0

log = logging.getLogger(__name__)


class ForwardModelError(Exception):
    """Base class for forward-model failures."""


class GeometryError(ForwardModelError, ValueError):
    pass


class DegenerateContrastError(ForwardModelError, ArithmeticError):
    """The restricted state system ``I - G_D diag(chi)`` is singular."""


class SeriesConvergenceError(ForwardModelError, ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class Setup:
    """Measurement configuration: frequency, DOI square, antenna positions.

    ``source_amplitude`` multiplies the line-source field; the default makes the
    incident field unit-magnitude at the DOI centre (see ``normalized_amplitude``).
    """

    frequency: float
    doi_side: float
    n_side: int
    tx_positions: np.ndarray
    rx_positions: np.ndarray
    source_amplitude: complex | None = None

    def __post_init__(self):
        tx = np.atleast_2d(np.asarray(self.tx_positions, dtype=float))
        rx = np.atleast_2d(np.asarray(self.rx_positions, dtype=float))
        object.__setattr__(self, "tx_positions", tx)
        object.__setattr__(self, "rx_positions", rx)
        if self.n_side < 2:
            raise GeometryError(f"n_side must be >= 2, got {self.n_side}")
        if not (self.frequency > 0 and self.doi_side > 0):
            raise GeometryError("frequency and doi_side must be positive")
        for name, pts in (("transmitter", tx), ("receiver", rx)):
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
                raise GeometryError(f"{name} positions must be a non-empty (K, 2) array")
            inside = np.all(np.abs(pts) <= self.doi_side / 2, axis=1)
            if inside.any():
                k = int(np.flatnonzero(inside)[0])
                raise GeometryError(f"{name} {k} at {pts[k]} lies inside the DOI")
        tx.setflags(write=False)
        rx.setflags(write=False)

    @property
    def k0(self) -> float:
        return 2 * np.pi * self.frequency / C0

    @property
    def wavelength(self) -> float:
        return C0 / self.frequency

    @property
    def n_cells(self) -> int:
        return self.n_side**2

    @property
    def n_tx(self) -> int:
        return len(self.tx_positions)

    @property
    def n_rx(self) -> int:
        return len(self.rx_positions)

    @cached_property
    def amplitude(self) -> complex:
        if self.source_amplitude is not None:
            return complex(self.source_amplitude)
        return normalized_amplitude(self)

    def with_grid(self, n_side: int) -> Setup:
        return Setup(self.frequency, self.doi_side, n_side, self.tx_positions,
                     self.rx_positions, self.source_amplitude)

    def with_tx(self, indices) -> Setup:
        return Setup(self.frequency, self.doi_side, self.n_side,
                     self.tx_positions[np.asarray(indices)], self.rx_positions,
                     self.amplitude)

    def to_dict(self) -> dict:
        amp = self.source_amplitude
        return {
            "version": 1,
            "frequency_hz": float(self.frequency),
            "doi_side_m": float(self.doi_side),
            "n_side": int(self.n_side),
            "tx_positions_m": self.tx_positions.tolist(),
            "rx_positions_m": self.rx_positions.tolist(),
            "source_amplitude": None if amp is None else [complex(amp).real, complex(amp).imag],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Setup:
        amp = d.get("source_amplitude")
        return cls(
            frequency=float(d["frequency_hz"]),
            doi_side=float(d["doi_side_m"]),
            n_side=int(d["n_side"]),
            tx_positions=np.asarray(d["tx_positions_m"], dtype=float),
            rx_positions=np.asarray(d["rx_positions_m"], dtype=float),
            source_amplitude=None if amp is None else complex(amp[0], amp[1]),
        )

    def geometry_fingerprint(self) -> str:
        """Hash of everything the measurements depend on (not the grid)."""
        d = self.to_dict()
        d.pop("n_side")
        d["source_amplitude"] = [self.amplitude.real, self.amplitude.imag]
        return _digest(d)

    def grid_fingerprint(self) -> str:
        """Hash of the reconstruction grid; network weights depend only on this."""
        return _digest({"doi_side_m": float(self.doi_side), "n_side": int(self.n_side)})


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Grid:
    cell_centers: np.ndarray  # (N, 2)
    cell_size: float

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    @property
    def equivalent_radius(self) -> float:
        return np.sqrt(self.cell_area / np.pi)

    @property
    def n_side(self) -> int:
        return int(round(np.sqrt(len(self.cell_centers))))


def make_grid(setup: Setup) -> Grid:
    h = setup.doi_side / setup.n_side
    coords = -setup.doi_side / 2 + (np.arange(setup.n_side) + 0.5) * h
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    centers = np.column_stack([xx.ravel(), yy.ravel()])
    return Grid(centers, h)


@dataclass(frozen=True)
class GreensOperators:
    G_D: np.ndarray  # (N, N)
    G_S: np.ndarray  # (M, N)
    fingerprint: str


@dataclass
class FieldSet:
    """Fields for every transmitter, stored column-wise (N x T)."""

    E_inc: np.ndarray
    E_tot: np.ndarray
    J: np.ndarray
    mask: np.ndarray  # flat boolean (N,)


@dataclass
class MeasurementSet:
    samples: np.ndarray  # (M, T) complex
    fingerprint: str = ""
    provenance: str = "synthetic"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-D (receivers x transmitters) array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("measurement samples must be finite")

    @property
    def shape(self):
        return self.samples.shape

    def check_against(self, setup: Setup) -> None:
        if self.samples.shape != (setup.n_rx, setup.n_tx):
            raise GeometryError(
                f"measurements are {self.samples.shape}, setup expects "
                f"({setup.n_rx}, {setup.n_tx})")
        if self.fingerprint and self.fingerprint != setup.geometry_fingerprint():
            raise GeometryError("measurement fingerprint does not match the setup")

    def select_tx(self, indices) -> MeasurementSet:
        return MeasurementSet(self.samples[:, np.asarray(indices)], "", self.provenance)


def _raw_line_source(setup: Setup, points: np.ndarray, tx_index: int) -> np.ndarray:
    d = np.linalg.norm(points - setup.tx_positions[tx_index], axis=1)
    return special.hankel2(0, setup.k0 * d) / 4j


def normalized_amplitude(setup: Setup) -> complex:
    """Amplitude making the first transmitter's field equal to 1 at the DOI centre."""
    return complex(1.0 / _raw_line_source(setup, np.zeros((1, 2)), 0)[0])


def _disk_factor(k0: float, a: float) -> complex:
    # k0^2 * integral of g over an equal-area disk, for an observation point outside it
    return -0.5j * np.pi * k0 * a * special.j1(k0 * a)


def self_term(k0: float, a: float) -> complex:
    """k0^2 times the integral of g over a disk of radius a, observed at its centre."""
    x = k0 * a
    return -0.5j * np.pi * x * special.hankel2(1, x) - 1.0


def assemble_greens(setup: Setup, grid: Grid | None = None) -> GreensOperators:
    grid = grid or make_grid(setup)
    k0, a = setup.k0, grid.equivalent_radius
    pts = grid.cell_centers
    n = len(pts)

    diff = pts[:, None, :] - pts[None, :, :]
    rho = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(rho, 1.0)  # placeholder, overwritten below
    G_D = _disk_factor(k0, a) * special.hankel2(0, k0 * rho)
    G_D[np.diag_indices(n)] = self_term(k0, a)
    # exact symmetry: rho is symmetric, but enforce bitwise
    G_D = np.triu(G_D) + np.triu(G_D, 1).T

    rr = setup.rx_positions[:, None, :] - pts[None, :, :]
    G_S = _disk_factor(k0, a) * special.hankel2(0, k0 * np.hypot(rr[..., 0], rr[..., 1]))
    return GreensOperators(G_D, G_S, setup.geometry_fingerprint())


def incident_field(setup: Setup, grid: Grid, tx_index: int) -> np.ndarray:
    """Line-source field ``A * H0^(2)(k0 |r - r_tx|) / (4j)`` at the cell centres."""
    if not 0 <= tx_index < setup.n_tx:
        raise IndexError(f"transmitter {tx_index} out of range")
    return setup.amplitude * _raw_line_source(setup, grid.cell_centers, tx_index)


def incident_fields(setup: Setup, grid: Grid) -> np.ndarray:
    return np.column_stack([incident_field(setup, grid, t) for t in range(setup.n_tx)])


def _flat_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(mask, dtype=bool).ravel()
    if m.size != n:
        raise ValueError(f"mask has {m.size} cells, expected {n}")
    if not m.any():
        raise ValueError("mask is empty")
    return m


class StateSolver:
    """LU factorization of the masked state system, shared by forward and adjoint solves.

    With ``A = I - G_D[a, a] diag(chi_a)`` restricted to the active cells ``a``,
    the forward solve is ``A e = e_inc`` and the adjoint of the data map
    reduces to a solve with the same matrix because ``G_D`` is symmetric.
    """

    def __init__(self, eps: np.ndarray, greens: GreensOperators, mask=None):
        n = greens.G_D.shape[0]
        self.mask = _flat_mask(mask, n)
        self.idx = np.flatnonzero(self.mask)
        self.chi = (np.asarray(eps, dtype=complex).ravel() - 1.0)[self.idx]
        self.greens = greens
        G_aa = greens.G_D[np.ix_(self.idx, self.idx)]
        A = np.eye(len(self.idx), dtype=complex) - G_aa * self.chi[None, :]
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            try:
                self.lu = sla.lu_factor(A, check_finite=True)
            except (sla.LinAlgError, sla.LinAlgWarning, ValueError) as exc:
                raise DegenerateContrastError(str(exc)) from exc
        if np.any(np.abs(np.diag(self.lu[0])) < 1e-14):
            raise DegenerateContrastError("restricted state system is singular")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self.lu, rhs, check_finite=False)


def solve_state(eps, greens: GreensOperators, E_inc: np.ndarray, mask=None,
                solver: StateSolver | None = None) -> FieldSet:
    """Total field and induced current for each incident column of ``E_inc``."""
    solver = solver or StateSolver(eps, greens, mask)
    E_inc = np.asarray(E_inc, dtype=complex)
    vec = E_inc.ndim == 1
    E_inc2 = E_inc[:, None] if vec else E_inc
    idx = solver.idx
    J = np.zeros_like(E_inc2)
    E_a = solver.solve(E_inc2[idx])
    J[idx] = solver.chi[:, None] * E_a
    E_tot = E_inc2 + greens.G_D[:, idx] @ J[idx]
    E_tot[idx] = E_a
    if vec:
        return FieldSet(E_inc, E_tot[:, 0], J[:, 0], solver.mask)
    return FieldSet(E_inc2, E_tot, J, solver.mask)


def state_residual(fields: FieldSet, greens: GreensOperators) -> float:
    r = fields.E_tot - fields.E_inc - greens.G_D @ fields.J
    return float(np.linalg.norm(r) / np.linalg.norm(fields.E_inc))


def scattered_field(fields: FieldSet, greens: GreensOperators) -> MeasurementSet:
    J = fields.J if fields.J.ndim == 2 else fields.J[:, None]
    return MeasurementSet(greens.G_S @ J, greens.fingerprint)


def forward(eps, setup: Setup, grid: Grid | None = None, mask=None,
            greens: GreensOperators | None = None) -> MeasurementSet:
    """Scattered field at every receiver for every transmitter."""
    grid = grid or make_grid(setup)
    greens = greens or assemble_greens(setup, grid)
    eps = np.asarray(eps, dtype=complex)
    if eps.shape != (setup.n_side, setup.n_side):
        raise ValueError(f"eps has shape {eps.shape}, expected {(setup.n_side,) * 2}")
    fields = solve_state(eps, greens, incident_fields(setup, grid), mask)
    return scattered_field(fields, greens)


def mie_cylinder_scattered(radius: float, eps: complex, setup: Setup,
                           max_terms: int = 200, rtol: float = 1e-12) -> MeasurementSet:
    """Exact scattered field of a centred homogeneous cylinder under line-source incidence.

    Expands the source with Graf's addition theorem and matches the tangential
    fields at ``rho = radius``; terms ``n`` and ``-n`` are equal and summed once.
    """
    if not 0 < radius <= setup.doi_side / 2:
        raise GeometryError("cylinder must lie inside the DOI")
    k0 = setup.k0
    k1 = k0 * np.sqrt(complex(eps))
    x0, x1 = k0 * radius, k1 * radius
    rho_t = np.hypot(*setup.tx_positions.T)
    phi_t = np.arctan2(setup.tx_positions[:, 1], setup.tx_positions[:, 0])
    rho_r = np.hypot(*setup.rx_positions.T)
    phi_r = np.arctan2(setup.rx_positions[:, 1], setup.rx_positions[:, 0])
    dphi = phi_r[:, None] - phi_t[None, :]

    total = np.zeros(dphi.shape, dtype=complex)
    if complex(eps) == 1:
        return MeasurementSet(total, setup.geometry_fingerprint())
    for n in range(max_terms + 1):
        jn0, jn1 = special.jv(n, x0), special.jv(n, x1)
        djn0, djn1 = special.jvp(n, x0), special.jvp(n, x1)
        hn0, dhn0 = special.hankel2(n, x0), special.h2vp(n, x0)
        a_n = (k0 * djn0 * jn1 - k1 * jn0 * djn1) / (k1 * hn0 * djn1 - k0 * dhn0 * jn1)
        radial = special.hankel2(n, k0 * rho_r)[:, None] * special.hankel2(n, k0 * rho_t)[None, :]
        term = a_n * radial * (np.cos(n * dphi) * (2.0 if n else 1.0))
        total += term
        if n > 0 and np.max(np.abs(term)) < rtol * max(np.max(np.abs(total)), 1e-300):
            break
    else:
        raise SeriesConvergenceError(f"cylinder series did not converge in {max_terms} terms")
    return MeasurementSet(setup.amplitude * total / 4j, setup.geometry_fingerprint())


def bp_initializer(meas: MeasurementSet, setup: Setup,
                   greens: GreensOperators | None = None,
                   grid: Grid | None = None) -> np.ndarray:
    """Backpropagation estimate of the permittivity map.

    Each transmitter's current is ``gamma * G_S^H e_sca`` with the scalar
    ``gamma`` fitted in least squares; the per-cell contrast then solves
    ``J = chi * E_tot`` in least squares over transmitters.
    """
    meas.check_against(setup)
    grid = grid or make_grid(setup)
    greens = greens or assemble_greens(setup, grid)
    E_s = meas.samples
    if not np.any(E_s):
        warnings.warn("zero-energy measurements; returning background map", RuntimeWarning)
        return np.ones((setup.n_side, setup.n_side), dtype=complex)
    G_S = greens.G_S
    back = G_S.conj().T @ E_s                      # (N, T)
    proj = G_S @ back                              # (M, T)
    num = np.sum(E_s * proj.conj(), axis=0)
    den = np.sum(np.abs(proj) ** 2, axis=0)
    gamma = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    J = back * gamma[None, :]
    E_tot = incident_fields(setup, grid) + greens.G_D @ J
    num = np.sum(J * E_tot.conj(), axis=1)
    den = np.sum(np.abs(E_tot) ** 2, axis=1)
    chi = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    eps = 1.0 + chi
    eps = np.maximum(eps.real, 1.0) + 1j * np.minimum(eps.imag, 0.0)
    return eps.reshape(setup.n_side, setup.n_side)
