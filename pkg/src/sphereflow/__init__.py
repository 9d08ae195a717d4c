"""SO(3)-equivariant rectified-flow policy learning on spherical-harmonic
features, with a synthetic SE(3) manipulation benchmark."""

__version__ = "0.1.0"
