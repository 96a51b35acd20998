"""Double-precision machinery for so(n), SO(n) and their action on the sphere.

Coordinates for so(n) follow a row-major upper-triangle convention: a vector
of length m = n(n-1)/2 fills the strict upper triangle row by row, and the
lower triangle is its negation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ORTHO_TOL = 1e-9


class DimensionError(ValueError):
    """Shapes or coordinate counts do not agree."""


class ConfigError(ValueError):
    """A configuration value is out of its valid range."""


def algebra_dim(n: int) -> int:
    """Dimension m of so(n)."""
    return n * (n - 1) // 2


def ambient_dim_from_algebra(m: int) -> int:
    """Recover n from m = n(n-1)/2."""
    n = int((1 + math.isqrt(1 + 8 * m)) // 2)
    if algebra_dim(n) != m:
        raise DimensionError(f"{m} is not n(n-1)/2 for any integer n")
    return n


@lru_cache(maxsize=64)
def _triu_indices(n: int):
    return np.triu_indices(n, k=1)


@dataclass(frozen=True)
class SkewCoords:
    """A point of so(n) in m = n(n-1)/2 upper-triangle coordinates."""

    coords: np.ndarray
    n: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).ravel()
        object.__setattr__(self, "coords", coords)
        if coords.size != algebra_dim(self.n):
            raise DimensionError(
                f"so({self.n}) needs {algebra_dim(self.n)} coordinates, got {coords.size}"
            )

    @property
    def m(self) -> int:
        return self.coords.size


@dataclass(frozen=True)
class Rotation:
    """An element of SO(n) as an n x n orthogonal matrix with det 1."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", mat)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DimensionError(f"rotation matrix must be square, got {mat.shape}")
        n = mat.shape[0]
        ortho_err = np.linalg.norm(mat.T @ mat - np.eye(n))
        if ortho_err > ORTHO_TOL:
            raise ValueError(f"matrix is not orthogonal: ||R^T R - I||_F = {ortho_err:.3e}")
        det = np.linalg.det(mat)
        if abs(det - 1.0) > ORTHO_TOL:
            raise ValueError(f"matrix has det {det:.12f}, expected 1")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)


@dataclass(frozen=True)
class LatentPoint:
    """A unit vector on S^{n-1}."""

    vec: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=np.float64).ravel()
        object.__setattr__(self, "vec", vec)
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > ORTHO_TOL:
            raise ValueError(f"latent point has norm {norm:.12f}, expected 1")

    @property
    def n(self) -> int:
        return self.vec.size


def skew_embed(a: SkewCoords) -> np.ndarray:
    """Embed m coordinates as an antisymmetric n x n matrix."""
    n = a.n
    rows, cols = _triu_indices(n)
    mat = np.zeros((n, n))
    mat[rows, cols] = a.coords
    mat[cols, rows] = -a.coords
    return mat


def skew_coords(mat: np.ndarray) -> SkewCoords:
    """Inverse of skew_embed; validates antisymmetry."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"expected square matrix, got {mat.shape}")
    if np.abs(mat + mat.T).max() > 1e-12:
        raise ValueError("matrix is not antisymmetric")
    n = mat.shape[0]
    rows, cols = _triu_indices(n)
    return SkewCoords(mat[rows, cols].copy(), n)


def _check_antisymmetric(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"expected square matrix, got {mat.shape}")
    if np.abs(mat + mat.T).max() > 1e-10:
        raise ValueError("matrix is not antisymmetric")
    return mat


def cayley(mat: np.ndarray) -> Rotation:
    """Cayley map A -> (I - A)(I + A)^{-1} from so(n) into SO(n).

    (I + A) is always invertible for real antisymmetric A, so no
    conditioning guard is needed.
    """
    mat = _check_antisymmetric(mat)
    n = mat.shape[0]
    eye = np.eye(n)
    return Rotation(np.linalg.solve((eye + mat).T, (eye - mat).T).T)


def expm_so(mat: np.ndarray) -> Rotation:
    """Matrix exponential of an antisymmetric matrix by scaling and squaring.

    The argument is scaled down until its Frobenius norm is at most 0.5,
    exponentiated with a truncated Taylor series, and squared back up.
    """
    mat = _check_antisymmetric(mat)
    n = mat.shape[0]
    norm = np.linalg.norm(mat)
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm / 0.5)))
        mat = mat / (2.0 ** squarings)
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, 24):
        term = term @ mat / k
        result = result + term
        if np.linalg.norm(term) < 1e-18:
            break
    for _ in range(squarings):
        result = result @ result
    # Re-orthogonalize the accumulated rounding error from the squarings.
    u, _, vt = np.linalg.svd(result)
    return Rotation(u @ vt)


@lru_cache(maxsize=8192)
def _group_elem_cached(delta: float, param: str, n: int) -> Rotation:
    coords = np.full(algebra_dim(n), delta)
    mat = skew_embed(SkewCoords(coords, n))
    return cayley(mat) if param == "cayley" else expm_so(mat)


def group_elem(c_i: float, c_j: float, kappa: float = 1.0, param: str = "expm",
               n: int = 8) -> Rotation:
    """Rotation assigned to a covariate change c_i -> c_j.

    Embeds kappa * (c_i - c_j) times the all-ones coordinate vector in so(n)
    and maps it through the chosen parameterization. Covariates are expected
    on the normalized [0, 1] scale. Results are memoized on the scaled
    covariate difference.
    """
    if kappa <= 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    if param not in ("expm", "cayley"):
        raise ConfigError(f"unknown parameterization {param!r}")
    delta = float(kappa) * (float(c_i) - float(c_j))
    # Canonicalize to a nonnegative difference so that the inverse relation
    # between opposite covariate changes holds bitwise, not just numerically.
    if delta < 0:
        return _group_elem_cached(-delta, param, n).inverse()
    return _group_elem_cached(delta, param, n)


def act(g: Rotation, point: LatentPoint) -> LatentPoint:
    """Apply a rotation to a sphere point; renormalizes defensively."""
    if g.n != point.n:
        raise DimensionError(f"rotation is {g.n}x{g.n} but point has length {point.n}")
    vec = g.matrix @ point.vec
    return LatentPoint(vec / np.linalg.norm(vec))


def orbit_tau(base: LatentPoint, t: float) -> tuple[LatentPoint, Rotation]:
    """Point and group element at parameter t on the one-parameter orbit.

    The generator is fixed to the embedding of the all-ones coordinate
    vector. The returned assignment point -> rotation is exactly equivariant
    along the orbit, which makes it a ground-truth oracle for the learned
    sphere-to-rotation map.
    """
    n = base.n
    gen = skew_embed(SkewCoords(np.ones(algebra_dim(n)), n))
    g = expm_so(t * gen)
    return act(g, base), g
