"""Two-qubit states with maximally mixed marginals.

States are handled as plain complex ``numpy`` arrays of shape ``(4, 4)``
(or stacks ``(..., 4, 4)``).  Features are the nine correlation
coefficients ``t_ij = Tr(rho sigma_i (x) sigma_j)``, labelled ``XX`` ...
``ZZ``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

PSD_TOL = 1e-10
HERMITIAN_TOL = 1e-10

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}

GENERAL9 = ("XX", "XY", "XZ", "YX", "YY", "YZ", "ZX", "ZY", "ZZ")
SYMMETRIC5 = ("XX", "XY", "YX", "YY", "ZZ")


class Family(str, enum.Enum):
    GENERAL9 = "general9"
    SYMMETRIC5 = "symmetric5"

    @property
    def observables(self) -> tuple[str, ...]:
        return GENERAL9 if self is Family.GENERAL9 else SYMMETRIC5


class StateError(ValueError):
    """Raised for matrices that are not valid two-qubit density matrices."""


class SymmetryError(ValueError):
    """Raised when a state lacks the z-rotation symmetry of the symmetric family."""


@dataclass(frozen=True)
class FeatureVector:
    """Ordered Pauli correlation coefficients keyed by observable label."""

    observables: tuple[str, ...]
    values: np.ndarray
    noisy: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape[0] != len(self.observables):
            raise ValueError(
                f"{len(self.observables)} observables but {values.shape[0]} values"
            )
        object.__setattr__(self, "observables", tuple(self.observables))
        object.__setattr__(self, "values", values)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float], family: Family | None = None) -> "FeatureVector":
        labels = family.observables if family is not None else tuple(mapping)
        return cls(labels, np.array([float(mapping.get(k, 0.0)) for k in labels]))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.observables, self.values.tolist()))

    def __getitem__(self, label: str) -> float:
        return float(self.values[self.observables.index(label)])


@dataclass(frozen=True)
class XStateCoeffs:
    t1: float
    t2: float
    t3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2, self.t3])


def pauli_matrix(index: str) -> np.ndarray:
    """Return the 2x2 Pauli matrix for ``"X"``, ``"Y"`` or ``"Z"``."""
    key = str(index).upper()
    if key not in ("X", "Y", "Z"):
        raise ValueError(f"unknown Pauli index {index!r}")
    return PAULI[key].copy()


def pauli_product(label: str) -> np.ndarray:
    """``sigma_i (x) sigma_j`` for a two-letter label such as ``"XY"``."""
    return np.kron(PAULI[label[0]], PAULI[label[1]])


def _product_stack(observables: Sequence[str]) -> np.ndarray:
    return np.stack([pauli_product(lab) for lab in observables])


def expand_symmetric(values: np.ndarray) -> np.ndarray:
    """Map ``(XX, XY, YX, YY, ZZ)`` rows onto the nine general coefficients."""
    values = np.asarray(values, dtype=float)
    out = np.zeros(values.shape[:-1] + (9,))
    for src, lab in enumerate(SYMMETRIC5):
        out[..., GENERAL9.index(lab)] = values[..., src]
    return out


def density_from_values(values: np.ndarray, observables: Sequence[str] = GENERAL9) -> np.ndarray:
    """Batched ``rho = (I + sum t_ij sigma_i (x) sigma_j) / 4``.

    ``values`` has shape ``(..., len(observables))``; missing observables
    are taken as zero.
    """
    values = np.asarray(values, dtype=float)
    ops = _product_stack(observables)
    rho = np.tensordot(values, ops, axes=([-1], [0]))
    rho = rho + np.eye(4)
    return rho / 4.0


def density_from_features(features: FeatureVector) -> np.ndarray:
    return density_from_values(features.values, features.observables)


def pauli_values(rho: np.ndarray, observables: Sequence[str] = GENERAL9) -> np.ndarray:
    """Batched ``Tr(rho sigma_i (x) sigma_j)``; imaginary residue dropped."""
    ops = _product_stack(observables)
    # Tr(rho P) = sum_ab rho_ab P_ba
    t = np.einsum("...ab,kba->...k", np.asarray(rho), ops)
    return t.real.copy()


def pauli_features(rho: np.ndarray, family: Family | str = Family.GENERAL9) -> FeatureVector:
    family = Family(family)
    full = pauli_values(rho, GENERAL9)
    if family is Family.SYMMETRIC5:
        xx, xy, yx, yy = (full[GENERAL9.index(k)] for k in ("XX", "XY", "YX", "YY"))
        if abs(xx - yy) > 1e-8 or abs(xy + yx) > 1e-8:
            raise SymmetryError(
                f"state is not z-rotation symmetric: XX-YY={xx - yy:.3g}, XY+YX={xy + yx:.3g}"
            )
    idx = [GENERAL9.index(k) for k in family.observables]
    return FeatureVector(family.observables, full[idx])


# -- eigenvalues -------------------------------------------------------------


def hermitian_eigh(h: np.ndarray, tol: float = 1e-15, max_sweeps: int = 50):
    """Eigen-decomposition of Hermitian matrices by cyclic complex Jacobi rotations.

    Accepts a single matrix or a stack ``(..., n, n)``.  Returns ascending
    eigenvalues and the matching unitary eigenvector matrices (columns).
    """
    a = np.array(h, dtype=complex)
    single = a.ndim == 2
    if single:
        return _jacobi_single(a, tol, max_sweeps)
    batch_shape = a.shape[:-2]
    n = a.shape[-1]
    a = a.reshape(-1, n, n)
    a = 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))
    v = np.broadcast_to(np.eye(n, dtype=complex), a.shape).copy()
    scale = np.maximum(np.sqrt(np.sum(np.abs(a) ** 2, axis=(1, 2))), 1e-300)

    offdiag = ~np.eye(n, dtype=bool)
    pairs = [(p, q) for p in range(n - 1) for q in range(p + 1, n)]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.abs(a * offdiag) ** 2, axis=(1, 2)))
        if np.all(off <= tol * scale):
            break
        for p, q in pairs:
            apq = a[:, p, q]
            r = np.abs(apq)
            active = r > 1e-300
            if not np.any(active):
                continue
            phase = np.where(active, apq / np.where(active, r, 1.0), 1.0)
            app = a[:, p, p].real
            aqq = a[:, q, q].real
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                tau = (aqq - app) / (2.0 * r)
                t = np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(tau == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cp = np.conj(phase)
            c_ = c[:, None]
            s_ = s[:, None]
            # columns: A <- A J
            col_p = a[:, :, p].copy()
            col_q = a[:, :, q]
            a[:, :, p] = c_ * col_p - s_ * cp[:, None] * col_q
            a[:, :, q] = s_ * col_p + c_ * cp[:, None] * col_q
            # rows: A <- J^H A
            row_p = a[:, p, :].copy()
            row_q = a[:, q, :]
            a[:, p, :] = c_ * row_p - s_ * phase[:, None] * row_q
            a[:, q, :] = s_ * row_p + c_ * phase[:, None] * row_q
            a[:, p, q] = 0.0
            a[:, q, p] = 0.0
            vp = v[:, :, p].copy()
            vq = v[:, :, q]
            v[:, :, p] = c_ * vp - s_ * cp[:, None] * vq
            v[:, :, q] = s_ * vp + c_ * cp[:, None] * vq

    w = np.einsum("bii->bi", a).real
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    w = w.reshape(batch_shape + (n,))
    v = v.reshape(batch_shape + (n, n))
    return w, v


def _jacobi_single(h: np.ndarray, tol: float, max_sweeps: int):
    """Same rotations as the batched solver, on Python scalars (numpy overhead dominates at 4x4)."""
    n = h.shape[0]
    a = [[complex(0.5 * (h[i, j] + h[j, i].conjugate())) for j in range(n)] for i in range(n)]
    v = [[1.0 + 0j if i == j else 0j for j in range(n)] for i in range(n)]
    scale = max(math.sqrt(sum(abs(x) ** 2 for row in a for x in row)), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(abs(a[i][j]) ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p][q]
                r = abs(apq)
                if r <= 1e-300:
                    continue
                phase = apq / r
                cp = phase.conjugate()
                tau = (a[q][q].real - a[p][p].real) / (2.0 * r)
                t = 1.0 if tau == 0 else math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s_ = t * c
                for k in range(n):
                    x, y = a[k][p], a[k][q]
                    a[k][p] = c * x - s_ * cp * y
                    a[k][q] = s_ * x + c * cp * y
                for k in range(n):
                    x, y = a[p][k], a[q][k]
                    a[p][k] = c * x - s_ * phase * y
                    a[q][k] = s_ * x + c * phase * y
                a[p][q] = a[q][p] = 0j
                for k in range(n):
                    x, y = v[k][p], v[k][q]
                    v[k][p] = c * x - s_ * cp * y
                    v[k][q] = s_ * x + c * cp * y
    w = np.array([a[i][i].real for i in range(n)])
    order = np.argsort(w, kind="stable")
    return w[order], np.array(v, dtype=complex)[:, order]


def hermitian_eigvalsh(h: np.ndarray) -> np.ndarray:
    return hermitian_eigh(h)[0]


def _check_hermitian(rho: np.ndarray) -> None:
    rho = np.asarray(rho)
    if rho.shape[-2:] != (4, 4):
        raise StateError(f"expected 4x4 matrices, got shape {rho.shape}")
    dev = np.max(np.abs(rho - np.conj(np.swapaxes(rho, -1, -2))))
    if dev > HERMITIAN_TOL:
        raise StateError(f"matrix is not Hermitian (max deviation {dev:.3g})")


def min_eigenvalues(rho: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each matrix in a stack."""
    return hermitian_eigvalsh(rho)[..., 0]


def validate_state(rho: np.ndarray) -> tuple[bool, float]:
    """Return ``(is_psd, min_eigenvalue)`` for a Hermitian 4x4 matrix."""
    _check_hermitian(rho)
    lam = float(min_eigenvalues(np.asarray(rho, dtype=complex)))
    return lam >= -PSD_TOL, lam


def partial_transpose(rho: np.ndarray) -> np.ndarray:
    """Transpose the second qubit: each 2x2 block of ``rho`` is transposed."""
    r = np.asarray(rho).reshape(np.shape(rho)[:-2] + (2, 2, 2, 2))
    return np.swapaxes(r, -3, -1).reshape(np.shape(rho))


def ppt_min_eigenvalues(rho: np.ndarray) -> np.ndarray:
    return min_eigenvalues(partial_transpose(rho))


def is_entangled_ppt(rho: np.ndarray) -> bool:
    """Peres-Horodecki verdict for one two-qubit state (exact for 2x2)."""
    ok, lam = validate_state(rho)
    if not ok:
        raise StateError(f"not a density matrix (min eigenvalue {lam:.3g})")
    return bool(ppt_min_eigenvalues(rho) < -PSD_TOL)


def entangled_mask(rho: np.ndarray) -> np.ndarray:
    """Vectorised PPT verdict on a stack of (already valid) states."""
    return ppt_min_eigenvalues(rho) < -PSD_TOL


# -- random sampling ---------------------------------------------------------


def haar_unitaries(rng: np.random.Generator, n: int, dim: int = 2) -> np.ndarray:
    """``n`` Haar-random unitaries from QR of complex Ginibre matrices."""
    z = (rng.standard_normal((n, dim, dim)) + 1j * rng.standard_normal((n, dim, dim))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.einsum("bii->bi", r)
    phase = d / np.abs(d)
    return q * phase[:, None, :]


def haar_unitary(rng: np.random.Generator) -> np.ndarray:
    return haar_unitaries(rng, 1)[0]


def tetrahedron_slack(t: np.ndarray) -> np.ndarray:
    """The four positivity inequalities of a Bell-diagonal state, as slacks."""
    t = np.asarray(t, dtype=float)
    t1, t2, t3 = t[..., 0], t[..., 1], t[..., 2]
    return np.stack(
        [1 - t1 - t2 - t3, 1 - t1 + t2 + t3, 1 + t1 - t2 + t3, 1 + t1 + t2 - t3], axis=-1
    )


def in_tetrahedron(t: np.ndarray) -> np.ndarray:
    return np.all(tetrahedron_slack(t) >= 0.0, axis=-1)


def sample_x_states(rng: np.random.Generator, n: int, chunk: int = 4096) -> tuple[np.ndarray, int]:
    """Draw ``n`` points uniformly from the tetrahedron by cube rejection.

    Returns the ``(n, 3)`` coefficients and the number of cube candidates
    consumed.
    """
    out = []
    have = 0
    drawn = 0
    while have < n:
        cand = rng.uniform(-1.0, 1.0, size=(chunk, 3))
        keep = in_tetrahedron(cand)
        acc = cand[keep]
        need = n - have
        if acc.shape[0] > need:
            # count candidates up to and including the last one used
            last = np.flatnonzero(keep)[need - 1]
            drawn += last + 1
            acc = acc[:need]
        else:
            drawn += chunk
        out.append(acc)
        have += acc.shape[0]
    return np.concatenate(out, axis=0), drawn


def sample_x_state(rng: np.random.Generator) -> XStateCoeffs:
    while True:
        cand = rng.uniform(-1.0, 1.0, size=3)
        if in_tetrahedron(cand):
            return XStateCoeffs(*cand.tolist())


def x_state_density(t) -> np.ndarray:
    """Bell-diagonal (X-)state with correlations ``t_k`` on ``sigma_k (x) sigma_k``."""
    if isinstance(t, XStateCoeffs):
        t = t.as_array()
    t = np.asarray(t, dtype=float)
    return density_from_values(t, ("XX", "YY", "ZZ"))


def rotate_locally(x, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """``(U1 (x) U2) rho_x (U1 (x) U2)^dagger``; accepts stacks of inputs."""
    rho = x_state_density(x) if isinstance(x, XStateCoeffs) or np.shape(x)[-1] == 3 else np.asarray(x)
    u1 = np.asarray(u1)
    u2 = np.asarray(u2)
    u = np.einsum("...ac,...bd->...abcd", u1, u2).reshape(u1.shape[:-2] + (4, 4))
    return u @ rho @ np.conj(np.swapaxes(u, -1, -2))


def symmetric_density(a, b, c) -> np.ndarray:
    """State with ``t_XX = t_YY = a``, ``t_XY = -t_YX = b``, ``t_ZZ = c``."""
    vals = np.stack(np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), -np.asarray(b, float),
                                        np.asarray(a, float), np.asarray(c, float)), axis=-1)
    return density_from_values(vals, SYMMETRIC5)


def sample_symmetric_params(rng: np.random.Generator, n: int, chunk: int = 4096) -> np.ndarray:
    """``(a, b, c)`` rows drawn uniformly from the cube, kept when the state is PSD."""
    out = []
    have = 0
    while have < n:
        cand = rng.uniform(-1.0, 1.0, size=(chunk, 3))
        lam = min_eigenvalues(symmetric_density(cand[:, 0], cand[:, 1], cand[:, 2]))
        acc = cand[lam >= -PSD_TOL][: n - have]
        out.append(acc)
        have += acc.shape[0]
    return np.concatenate(out, axis=0)


def sample_symmetric_state(rng: np.random.Generator) -> np.ndarray:
    while True:
        a, b, c = rng.uniform(-1.0, 1.0, size=3)
        rho = symmetric_density(a, b, c)
        if validate_state(rho)[0]:
            return rho


def z_rotation(theta: float) -> np.ndarray:
    """``exp(i theta sigma_z)``."""
    return np.diag([np.exp(1j * theta), np.exp(-1j * theta)])
