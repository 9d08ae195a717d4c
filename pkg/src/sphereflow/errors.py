"""Exception types shared across the package."""

from __future__ import annotations


class SphereflowError(Exception):
    """Base class for all package-specific failures."""


class UnsupportedDegreeError(SphereflowError):
    """A spherical-harmonic degree outside the supported range was requested."""


class SignatureMismatchError(SphereflowError):
    """Two irrep features (or a feature and a parameter set) disagree on
    which degrees are present or how many channels each degree carries."""


class ConfigError(SphereflowError):
    """A configuration value is missing, has the wrong type, or is out of
    its documented range."""


class TrainingDivergedError(SphereflowError):
    """The training loss became non-finite."""


class DataFormatError(SphereflowError):
    """A serialized artifact (dataset, checkpoint, manifest) failed
    validation: bad magic, version, digest, or structural invariant."""


class SceneRejectedError(SphereflowError):
    """A sampled benchmark scene could not be realized: constraint sampling
    exhausted its retry budget, or the scripted expert failed to complete."""
