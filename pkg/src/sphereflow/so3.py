"""Rotations, real spherical harmonics, and their action on irrep features.

Conventions used everywhere in this package:

* Real spherical harmonics ``Y_{l,m}`` are orthonormal with respect to the
  unnormalized sphere measure ``dOmega``, so ``Y_{0,0} = 1/(2 sqrt(pi))``.
* Degree-1 components are ordered ``m = (-1, 0, +1)``, proportional to
  ``(y, z, x)`` with the common factor ``sqrt(3 / (4 pi))``.
* Wigner matrices act on the function argument side:
  ``Y_l(R u) = D_l(R) Y_l(u)``. With this choice each ``D_l`` is a group
  homomorphism (``D_l(R1 R2) = D_l(R1) D_l(R2)``) and
  ``D_1(R) = P R P^T`` where ``P`` permutes ``(x, y, z) -> (y, z, x)``.
  Because the matrices are orthogonal, the equivalent pullback identity
  ``Y_l(R^{-1} u) = D_l(R)^T Y_l(u)`` holds; tests exercise both forms.

Features are stored per degree as arrays of shape ``(..., C_l, 2l+1)``:
channel axis second to last, ``m`` axis last, arbitrary leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import autodiff as ad
from .errors import SignatureMismatchError, UnsupportedDegreeError

MAX_DEGREE = 2

# Y_{0,0}; also the constant relating a scalar to its degree-0 coefficient.
K0 = 0.5 / np.sqrt(np.pi)
# Common factor of the degree-1 harmonics (y, z, x).
K1 = np.sqrt(3.0 / (4.0 * np.pi))
# Y_2 = K2 * u^T Mhat_m u with the quadratic-form basis below.
K2 = 0.5 * np.sqrt(5.0 / np.pi)

# (x, y, z) -> (y, z, x); realizes the degree-1 Wigner matrix as P R P^T.
_P_YZX = np.array([[0.0, 1.0, 0.0],
                   [0.0, 0.0, 1.0],
                   [1.0, 0.0, 0.0]])

_S3 = np.sqrt(3.0)
# Traceless symmetric forms with tr(M_n M_m) = (3/2) delta_{nm}, ordered
# m = -2..2. u^T M u gives sqrt(3)xy, sqrt(3)yz, (3z^2-1)/2, sqrt(3)xz,
# sqrt(3)(x^2-y^2)/2 on unit vectors.
_M_BASIS = np.array([
    [[0.0, _S3 / 2, 0.0], [_S3 / 2, 0.0, 0.0], [0.0, 0.0, 0.0]],
    [[0.0, 0.0, 0.0], [0.0, 0.0, _S3 / 2], [0.0, _S3 / 2, 0.0]],
    [[-0.5, 0.0, 0.0], [0.0, -0.5, 0.0], [0.0, 0.0, 1.0]],
    [[0.0, 0.0, _S3 / 2], [0.0, 0.0, 0.0], [_S3 / 2, 0.0, 0.0]],
    [[_S3 / 2, 0.0, 0.0], [0.0, -_S3 / 2, 0.0], [0.0, 0.0, 0.0]],
])


def _check_degree(max_degree: int) -> None:
    if not isinstance(max_degree, (int, np.integer)) or not \
            0 <= max_degree <= MAX_DEGREE:
        raise UnsupportedDegreeError(
            f"max_degree must be an integer in [0, {MAX_DEGREE}], "
            f"got {max_degree!r}")


@dataclass(frozen=True)
class Rotation:
    """A proper rotation of R^3, stored as an orthogonal 3x3 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.allclose(m @ m.T, np.eye(3), atol=1e-6):
            raise ValueError("matrix is not orthogonal")
        if np.linalg.det(m) < 0:
            raise ValueError("matrix is a reflection, not a rotation")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    def compose(self, other: "Rotation") -> "Rotation":
        """The rotation 'self after other' (matrix product)."""
        return Rotation(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate points of shape (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        if points.shape[-1] != 3:
            raise ValueError(f"points must have trailing axis 3, "
                             f"got {points.shape}")
        return np.einsum("ij,...j->...i", self.matrix, points)

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        c = (np.trace(self.matrix) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> Rotation:
    """Rodrigues formula; `axis` need not be normalized but not zero."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    k = axis / n
    kx = np.array([[0.0, -k[2], k[1]],
                   [k[2], 0.0, -k[0]],
                   [-k[1], k[0], 0.0]])
    m = np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)
    return Rotation(m)


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Haar-uniform rotation via a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    m = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return Rotation(m)


# -- irrep features ----------------------------------------------------------

Signature = tuple[tuple[int, int], ...]


@dataclass
class IrrepFeature:
    """Per-degree feature blocks, each of shape (..., C_l, 2l+1).

    Blocks may hold numpy arrays or autodiff Tensors; both expose `.shape`.
    All blocks must agree on the leading (batch) axes.
    """

    blocks: dict[int, Any]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("IrrepFeature needs at least one degree block")
        clean: dict[int, Any] = {}
        lead: tuple[int, ...] | None = None
        for ell in sorted(self.blocks):
            _check_degree(ell)
            blk = self.blocks[ell]
            if not isinstance(blk, ad.Tensor):
                blk = np.asarray(blk, dtype=np.float64)
            if blk.ndim < 2:
                raise ValueError(
                    f"degree-{ell} block must have shape (..., C, {2*ell+1}),"
                    f" got {blk.shape}")
            if blk.shape[-1] != 2 * ell + 1:
                raise ValueError(
                    f"degree-{ell} block must have trailing axis "
                    f"{2*ell+1}, got {blk.shape}")
            if lead is None:
                lead = blk.shape[:-2]
            elif blk.shape[:-2] != lead:
                raise ValueError(
                    f"blocks disagree on leading axes: {lead} vs "
                    f"{blk.shape[:-2]} at degree {ell}")
            clean[ell] = blk
        self.blocks = clean

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(self.blocks)

    @property
    def signature(self) -> Signature:
        return tuple((ell, blk.shape[-2]) for ell, blk in self.blocks.items())

    @property
    def leading_shape(self) -> tuple[int, ...]:
        first = next(iter(self.blocks.values()))
        return first.shape[:-2]

    def block(self, ell: int):
        return self.blocks[ell]

    def map(self, fn: Callable[[int, Any], Any]) -> "IrrepFeature":
        return IrrepFeature({ell: fn(ell, blk)
                             for ell, blk in self.blocks.items()})

    def numpy(self) -> "IrrepFeature":
        """Detach to plain numpy blocks."""
        return self.map(lambda _, b: b.data if isinstance(b, ad.Tensor) else b)

    def astensor(self, requires_grad: bool = False) -> "IrrepFeature":
        return self.map(lambda _, b: b if isinstance(b, ad.Tensor)
                        else ad.Tensor(b, requires_grad=requires_grad))


def check_same_signature(a: IrrepFeature | Signature,
                         b: IrrepFeature | Signature,
                         what: str = "features") -> None:
    sig_a = a.signature if isinstance(a, IrrepFeature) else tuple(a)
    sig_b = b.signature if isinstance(b, IrrepFeature) else tuple(b)
    if sig_a != sig_b:
        raise SignatureMismatchError(
            f"{what} disagree on (degree, channels): {sig_a} vs {sig_b}")


# -- spherical harmonics ------------------------------------------------------

def eval_real_sh(points: np.ndarray, max_degree: int = MAX_DEGREE,
                 ) -> dict[int, np.ndarray]:
    """Evaluate real spherical harmonics on unit vectors.

    Returns ``{l: array of shape points.shape[:-1] + (2l+1,)}`` for all
    ``l <= max_degree``. Inputs must be unit length within 1e-6.
    """
    _check_degree(max_degree)
    u = np.asarray(points, dtype=np.float64)
    if u.shape[-1] != 3:
        raise ValueError(f"points must have trailing axis 3, got {u.shape}")
    norms = np.linalg.norm(u, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"points must be unit vectors (max |r-1| = {worst:g})")
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    out: dict[int, np.ndarray] = {
        0: np.full(u.shape[:-1] + (1,), K0)}
    if max_degree >= 1:
        out[1] = K1 * np.stack([y, z, x], axis=-1)
    if max_degree >= 2:
        out[2] = K2 * np.stack([
            _S3 * x * y,
            _S3 * y * z,
            0.5 * (3.0 * z * z - 1.0),
            _S3 * x * z,
            0.5 * _S3 * (x * x - y * y),
        ], axis=-1)
    return out


# -- Wigner matrices ----------------------------------------------------------

@dataclass(frozen=True)
class WignerBlocks:
    """Per-degree rotation matrices D_l, each of shape (2l+1, 2l+1)."""

    blocks: Mapping[int, np.ndarray] = field()

    def __getitem__(self, ell: int) -> np.ndarray:
        return self.blocks[ell]

    def __contains__(self, ell: int) -> bool:
        return ell in self.blocks

    @property
    def max_degree(self) -> int:
        return max(self.blocks)


def wigner_blocks(rotation: Rotation, max_degree: int = MAX_DEGREE,
                  ) -> WignerBlocks:
    """Wigner matrices of `rotation` in the convention Y(Ru) = D(R) Y(u)."""
    _check_degree(max_degree)
    r = rotation.matrix
    blocks: dict[int, np.ndarray] = {0: np.ones((1, 1))}
    if max_degree >= 1:
        blocks[1] = _P_YZX @ r @ _P_YZX.T
    if max_degree >= 2:
        # R^T M_n R expanded in the M basis: D2[n, m] = (2/3) tr(R^T M_n R M_m)
        conj = np.einsum("ji,njk,kl->nil", r, _M_BASIS, r)
        blocks[2] = (2.0 / 3.0) * np.einsum("nil,mil->nm", conj, _M_BASIS)
    return WignerBlocks(blocks)


def _rotate_block(d: np.ndarray, blk):
    """Contract D over the trailing m axis, tracking gradients if needed."""
    lead = "abdefghijk"[: blk.ndim - 2]
    spec = f"nm,{lead}cm->{lead}cn"
    if isinstance(blk, ad.Tensor):
        return ad.einsum(spec, ad.Tensor(d), blk)
    return np.einsum(spec, d, blk)


def apply_rotation(feature: IrrepFeature, blocks: WignerBlocks,
                   ) -> IrrepFeature:
    """Rotate a feature: each degree block transforms by its Wigner matrix.

    A degree-1 block packed from a vector v as (v_y, v_z, v_x) maps to the
    packing of the rotated vector R v.
    """
    missing = [ell for ell in feature.degrees if ell not in blocks]
    if missing:
        raise SignatureMismatchError(
            f"Wigner blocks lack degrees {missing} present in the feature")
    return feature.map(lambda ell, blk: _rotate_block(blocks[ell], blk))
