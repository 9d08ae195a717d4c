"""Spherical-harmonic features and how rotations act on them.

Features live in irreducible blocks: a degree-l block is a stack of
(2l+1)-vectors that mixes under rotation by the Wigner matrix D_l(R) and
never leaks into other degrees. This script evaluates the harmonics on
points, rotates, and shows the commutation numerically.
"""

import numpy as np

from sphereflow.so3 import (IrrepFeature, Rotation, apply_rotation,
                            eval_real_sh, random_rotation,
                            rotation_from_axis_angle, wigner_blocks)

rng = np.random.default_rng(0)

# A rotation is just an orthogonal matrix with determinant +1.
rot = rotation_from_axis_angle(axis=[0.0, 0.0, 1.0], angle=np.pi / 3)
print("60 degree yaw, angle recovered:", np.degrees(rot.angle()))

# Real spherical harmonics up to degree 2, evaluated on a unit vector.
u = rng.standard_normal(3)
u /= np.linalg.norm(u)
sh = eval_real_sh(u)
for ell, coeffs in sh.items():
    print(f"degree {ell}: {coeffs.round(3)}")

# The defining property: evaluating on a rotated point equals applying the
# Wigner matrix to the original evaluation, degree by degree.
d = wigner_blocks(rot)
sh_rot = eval_real_sh(rot.apply(u))
for ell in (0, 1, 2):
    err = np.abs(sh_rot[ell] - d[ell] @ sh[ell]).max()
    print(f"Y(Ru) vs D(R) Y(u), degree {ell}: max error {err:.2e}")

# Wigner matrices are orthogonal and compose like the rotations they mirror.
other = random_rotation(rng)
d_other = wigner_blocks(other)
d_both = wigner_blocks(rot.compose(other))
for ell in (1, 2):
    ortho = np.abs(d[ell] @ d[ell].T - np.eye(2 * ell + 1)).max()
    comp = np.abs(d_both[ell] - d[ell] @ d_other[ell]).max()
    print(f"degree {ell}: orthogonality {ortho:.2e}, composition {comp:.2e}")

# An IrrepFeature bundles per-degree channel stacks; rotation acts blockwise.
feature = IrrepFeature({
    0: rng.standard_normal((4, 1)),      # invariant scalars
    1: rng.standard_normal((3, 3)),      # three vector channels
    2: rng.standard_normal((2, 5)),      # two degree-2 channels
})
rotated = apply_rotation(feature, d)
print("signature:", feature.signature)
print("degree-0 block is untouched:",
      np.array_equal(rotated.block(0), feature.block(0)))

# Degree-1 blocks are packed as (y, z, x); their Wigner matrix is the
# rotation matrix conjugated into that ordering, so block rotation and
# vector rotation agree.
v = feature.block(1)[0]
v_xyz = np.array([v[2], v[0], v[1]])
rotated_xyz = rot.apply(v_xyz)
got = rotated.block(1)[0]
print("degree-1 rotation matches rotating the vector:",
      np.abs(got - rotated_xyz[[1, 2, 0]]).max() < 1e-12)
print("norm preserved per channel:",
      np.allclose(np.linalg.norm(rotated.block(1), axis=-1),
                  np.linalg.norm(feature.block(1), axis=-1)))
