"""The equivariant layer zoo: every block commutes with rotation.

Each layer maps irrep features to irrep features so that rotating the
input rotates the output, f(D x) = D f(x). Weights mix channels within a
degree (Schur's lemma forbids anything else); nonlinearity, normalization
and conditioning all route through invariant quantities.
"""

import numpy as np

from sphereflow import autodiff as ad
from sphereflow import flow
from sphereflow import layers as ly
from sphereflow.so3 import IrrepFeature, apply_rotation, random_rotation, \
    wigner_blocks

rng = np.random.default_rng(1)
sig = ((0, 4), (1, 3), (2, 2))


def feature(lead=()):
    return IrrepFeature({ell: rng.standard_normal(lead + (c, 2 * ell + 1))
                         for ell, c in sig})


def violation(a, b):
    a, b = a.numpy(), b.numpy()
    worst = 0.0
    for ell in b.degrees:
        num = np.abs(a.block(ell) - b.block(ell)).max()
        den = max(np.abs(b.block(ell)).max(), 1e-12)
        worst = max(worst, num / den)
    return worst


rot = wigner_blocks(random_rotation(rng))

# Linear maps: one weight matrix per degree, acting on channels only.
lin = ly.init_equi_linear(rng, sig, ((0, 5), (1, 4), (2, 2)))
f = feature()
err = violation(ly.equi_linear(apply_rotation(f, rot), lin),
                apply_rotation(ly.equi_linear(f, lin).numpy(), rot))
print(f"equi_linear      f(Dx) vs D f(x): {err:.2e}")

# Gated nonlinearity: degree-0 channels pass through SiLU; higher degrees
# are scaled by a sigmoid of dedicated invariant gate channels.
gated_in = feature()
wide = IrrepFeature({0: np.concatenate([gated_in.block(0),
                                        rng.standard_normal((5, 1))]),
                     1: gated_in.block(1), 2: gated_in.block(2)})
err = violation(ly.gated_nonlinearity(apply_rotation(wide, rot)),
                apply_rotation(ly.gated_nonlinearity(wide).numpy(), rot))
print(f"gated nonlin     f(Dx) vs D f(x): {err:.2e}")

# Temporal convolution: mixes time lags and channels, never the m axis.
conv = ly.init_temporal_conv(rng, sig, sig, lags=2)
seq = feature(lead=(1, 8))
err = violation(ly.spherical_temporal_conv(apply_rotation(seq, rot), conv),
                apply_rotation(
                    ly.spherical_temporal_conv(seq, conv).numpy(), rot))
print(f"temporal conv    f(Dx) vs D f(x): {err:.2e}")

# EFiLM: modulation scales each degree along its own direction, so gamma
# and beta must rotate together with the features.
h, gamma, beta = feature(), feature(), feature()
err = violation(
    ly.efilm(apply_rotation(h, rot), apply_rotation(gamma, rot),
             apply_rotation(beta, rot)),
    apply_rotation(ly.efilm(h, gamma, beta).numpy(), rot))
print(f"efilm            f(Dx) vs D f(x): {err:.2e}")

# The full velocity U-Net inherits the property from its parts. Output
# heads are zero at init, so we give one of them weights to make the
# check informative.
cfg = ly.UNetConfig(signature=((0, 1), (1, 3)),
                    cond_signature=sig,
                    hidden=(((0, 8), (1, 4)), ((0, 12), (1, 6))),
                    time_dim=4)
params = ly.init_unet(rng, cfg)
params.out_proj = ly.init_equi_linear(rng, ly.unet_head_signature(cfg),
                                      cfg.signature, bias=True)
x = IrrepFeature({0: rng.standard_normal((2, 4, 1, 1)),
                  1: rng.standard_normal((2, 4, 3, 3))})
cond = feature(lead=(2,))
err = violation(
    ly.equi_unet_forward(apply_rotation(x, rot), 0.3,
                         apply_rotation(cond, rot), cfg, params),
    apply_rotation(
        ly.equi_unet_forward(x, 0.3, cond, cfg, params).numpy(), rot))
print(f"velocity U-Net   f(Dx) vs D f(x): {err:.2e}")

# Every op also carries exact reverse-mode gradients; the checker compares
# them against central finite differences coefficient by coefficient.
for op in ("equi_linear", "gated", "efilm"):
    err = flow.grad_check(op, np.random.default_rng(2))
    print(f"grad_check {op:12s} max relative error {err:.1e}")
