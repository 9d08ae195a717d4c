"""Observation encoders and geometric state embeddings.

The toy perception stack mirrors the interface contracts of a full system:
an equivariant point-cloud encoder (radial-shell moments of spherical
harmonics followed by a trainable equivariant head), an invariant image
tokenizer (patch means through a small dense map), and exact irrep
embeddings for proprioceptive states and action chunks. Positions are
always expressed relative to the point-cloud centroid, which is what makes
the whole observation pathway translation invariant.

This module also owns the demo record stream: a little-endian binary format
holding, per step, the point cloud, the toy image, the proprioceptive
state, and the target action chunk.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import DataFormatError, SignatureMismatchError
from .fusion import FemParams, ImageTokens, fem_fuse, init_fem
from .layers import (EquiLinearParams, _with_gates, equi_linear,
                     gated_nonlinearity, init_equi_linear)
from .so3 import IrrepFeature, Rotation, Signature, eval_real_sh

IMAGE_SHAPE = (32, 32, 3)
PATCH_GRID = 2            # 2x2 patches of 16x16 pixels
TOKEN_DIM = 16
ORIGIN_EPS = 1e-9

# m-ordering packs a Cartesian vector as (y, z, x) into a degree-1 row.
_PACK = (1, 2, 0)
_UNPACK = (2, 0, 1)

PROPRIO_SIGNATURE: Signature = ((0, 1), (1, 3))


def pack_vector(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)[..., _PACK]


def unpack_vector(w: np.ndarray) -> np.ndarray:
    return np.asarray(w, dtype=np.float64)[..., _UNPACK]


# -- geometric state types -----------------------------------------------------

@dataclass
class PointCloud:
    points: np.ndarray        # (n, 3) meters
    colors: np.ndarray        # (n, 3) in [0, 1]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        col = np.asarray(self.colors, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (n >= 1, 3), got {pts.shape}")
        if col.shape != pts.shape:
            raise ValueError(f"colors must match points: {col.shape} vs "
                             f"{pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if col.min() < -1e-9 or col.max() > 1 + 1e-9:
            raise ValueError("colors must lie in [0, 1]")
        self.points, self.colors = pts, col

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def gram_schmidt_pair(c1: np.ndarray, c2: np.ndarray,
                      strict: bool = True) -> np.ndarray:
    """Orthonormalize two 3-vectors; rows of the (2, 3) result.

    With ``strict`` a degenerate pair (zero or parallel) raises; otherwise a
    deterministic completion is used so decoding arbitrary flow states never
    fails.
    """
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    n1 = np.linalg.norm(c1)
    if n1 < 1e-8:
        if strict:
            raise ValueError("first 6D column is numerically zero")
        c1, n1 = np.array([1.0, 0.0, 0.0]), 1.0
    b1 = c1 / n1
    res = c2 - (b1 @ c2) * b1
    n2 = np.linalg.norm(res)
    if n2 < 1e-8:
        if strict:
            raise ValueError("6D columns are numerically parallel")
        alt = np.zeros(3)
        alt[np.argmin(np.abs(b1))] = 1.0
        res = alt - (b1 @ alt) * b1
        n2 = np.linalg.norm(res)
    return np.stack([b1, res / n2])


def rotation_from_6d(cols: np.ndarray, strict: bool = True) -> Rotation:
    basis = gram_schmidt_pair(cols[0], cols[1], strict=strict)
    b3 = np.cross(basis[0], basis[1])
    return Rotation(np.stack([basis[0], basis[1], b3], axis=1))


def rotation_to_6d(rot: Rotation) -> np.ndarray:
    """First two columns of the matrix, as rows of a (2, 3) array."""
    return rot.matrix[:, :2].T.copy()


@dataclass
class ProprioState:
    """End-effector position, 6D orientation (first two rotation-matrix
    columns), and gripper opening in [0, 1].

    Construction checks finiteness and the gripper range only; the 6D
    columns are validated lazily by `rotation()`, so algebraically useful
    degenerate states (e.g. all-zero embeddings) remain constructible.
    """

    position: np.ndarray      # (3,)
    rotation6d: np.ndarray    # (2, 3)
    gripper: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        r6 = np.asarray(self.rotation6d, dtype=np.float64).reshape(2, 3)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(r6))):
            raise ValueError("proprio fields must be finite")
        g = float(self.gripper)
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"gripper must lie in [0, 1], got {g}")
        self.position, self.rotation6d, self.gripper = pos, r6, g

    def rotation(self) -> Rotation:
        """The orientation as a Rotation; raises on degenerate columns."""
        return rotation_from_6d(self.rotation6d, strict=True)

    @classmethod
    def from_rotation(cls, position, rot: Rotation, gripper: float,
                      ) -> "ProprioState":
        return cls(position=np.asarray(position, dtype=np.float64),
                   rotation6d=rotation_to_6d(rot), gripper=gripper)


@dataclass
class ActionChunk:
    """A horizon of future end-effector targets in proprio layout."""

    positions: np.ndarray     # (H, 3)
    rotation6d: np.ndarray    # (H, 2, 3)
    gripper: np.ndarray       # (H,)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        r6 = np.asarray(self.rotation6d, dtype=np.float64)
        g = np.asarray(self.gripper, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be (H >= 1, 3), got {pos.shape}")
        h = pos.shape[0]
        if r6.shape != (h, 2, 3) or g.shape != (h,):
            raise ValueError("rotation6d/gripper lengths must match horizon")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(r6))
                and np.all(np.isfinite(g))):
            raise ValueError("action chunk must be finite")
        self.positions, self.rotation6d, self.gripper = pos, r6, g

    @property
    def horizon(self) -> int:
        return self.positions.shape[0]

    def target(self, i: int) -> ProprioState:
        return ProprioState(self.positions[i], self.rotation6d[i],
                            float(np.clip(self.gripper[i], 0.0, 1.0)))


@dataclass
class Observation:
    cloud: PointCloud
    image: np.ndarray         # IMAGE_SHAPE, values in [0, 1]
    proprio: ProprioState

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.shape != IMAGE_SHAPE:
            raise ValueError(f"image must have shape {IMAGE_SHAPE}, "
                             f"got {img.shape}")
        self.image = img


# -- normalization and embeddings ------------------------------------------------

def normalize_cloud(pc: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Center the cloud on its mean; the centroid is returned so positional
    outputs can be mapped back to the world frame."""
    centroid = pc.points.mean(axis=0)
    return PointCloud(pc.points - centroid, pc.colors), centroid


def embed_proprio(s: ProprioState, centroid: np.ndarray) -> IrrepFeature:
    """Gripper as the invariant channel; centroid-relative position and the
    two 6D columns as three degree-1 channels."""
    centroid = np.asarray(centroid, dtype=np.float64).reshape(3)
    vecs = np.stack([s.position - centroid, s.rotation6d[0],
                     s.rotation6d[1]])
    return IrrepFeature({0: np.array([[s.gripper]]),
                         1: pack_vector(vecs)})


def embed_action_chunk(a: ActionChunk, centroid: np.ndarray) -> IrrepFeature:
    """Per-timestep proprio layout: blocks (H, 1, 1) and (H, 3, 3)."""
    centroid = np.asarray(centroid, dtype=np.float64).reshape(3)
    vecs = np.stack([a.positions - centroid, a.rotation6d[:, 0],
                     a.rotation6d[:, 1]], axis=1)        # (H, 3, 3)
    return IrrepFeature({0: a.gripper[:, None, None],
                         1: pack_vector(vecs)})


def decode_action_chunk(f: IrrepFeature, centroid: np.ndarray) -> ActionChunk:
    """Exact left inverse of `embed_action_chunk` on its image; arbitrary
    features decode with clipped gripper and Gram-Schmidt-projected
    orientation columns (deterministic fallback for degenerate pairs)."""
    f = f.numpy()
    if f.signature != PROPRIO_SIGNATURE:
        raise SignatureMismatchError(
            f"action decoding expects signature {PROPRIO_SIGNATURE}, "
            f"got {f.signature}")
    if len(f.leading_shape) != 1:
        raise ValueError(f"expected a (horizon,) sequence, got leading "
                         f"shape {f.leading_shape}")
    centroid = np.asarray(centroid, dtype=np.float64).reshape(3)
    vecs = unpack_vector(f.block(1))                     # (H, 3, 3)
    positions = vecs[:, 0] + centroid
    cols = np.stack([gram_schmidt_pair(v[1], v[2], strict=False)
                     for v in vecs])
    gripper = np.clip(f.block(0)[:, 0, 0], 0.0, 1.0)
    return ActionChunk(positions=positions, rotation6d=cols, gripper=gripper)


# -- point-cloud encoder -----------------------------------------------------------

@dataclass
class PointEncoderParams:
    """Radial-shell configuration plus the trainable equivariant head."""

    head: EquiLinearParams
    workspace_radius: float
    n_shells: int = 8

    @property
    def moment_signature(self) -> Signature:
        c = 4 * self.n_shells   # value channels: constant, r, g, b
        return ((0, c), (1, c), (2, c))


def init_point_encoder(rng: np.random.Generator, out_signature: Signature,
                       workspace_radius: float, n_shells: int = 8,
                       ) -> PointEncoderParams:
    c = 4 * n_shells
    moments_sig = ((0, c), (1, c), (2, c))
    head = init_equi_linear(rng, moments_sig, _with_gates(out_signature))
    return PointEncoderParams(head=head, workspace_radius=workspace_radius,
                              n_shells=n_shells)


def cloud_moments(pc: PointCloud, p: PointEncoderParams) -> IrrepFeature:
    """Parameter-free pooled geometry: per degree, the mean over points of
    (radial shell weight x value channel x spherical harmonic).

    Points at the origin have no direction; their degree>0 terms are masked
    to zero. Value channels are a constant and the three colors.
    """
    r = np.linalg.norm(pc.points, axis=-1)                       # (n,)
    safe = r > ORIGIN_EPS
    dirs = np.where(safe[:, None], pc.points / np.maximum(r, ORIGIN_EPS)[:, None],
                    [0.0, 0.0, 1.0])
    sh = eval_real_sh(dirs)
    centers = np.linspace(0.0, p.workspace_radius, p.n_shells)
    width = p.workspace_radius / max(p.n_shells - 1, 1)
    shells = np.exp(-0.5 * ((r[:, None] - centers) / width) ** 2)  # (n, K)
    values = np.concatenate([np.ones((pc.n_points, 1)), pc.colors], axis=1)
    chan = (shells[:, :, None] * values[:, None, :]).reshape(pc.n_points, -1)
    blocks = {}
    for ell, basis in sh.items():
        if ell > 0:
            basis = basis * safe[:, None]
        blocks[ell] = np.einsum("nc,nm->cm", chan, basis) / pc.n_points
    return IrrepFeature(blocks)


def encode_point_cloud(pc: PointCloud, p: PointEncoderParams) -> IrrepFeature:
    """Equivariant cloud feature: pooled moments through the trainable head.
    The cloud must already be centered (see `normalize_cloud`)."""
    return encode_moments(cloud_moments(pc, p), p)


def encode_moments(moments: IrrepFeature, p: PointEncoderParams,
                   ) -> IrrepFeature:
    return gated_nonlinearity(equi_linear(moments, p.head))


# -- image encoder -------------------------------------------------------------------

@dataclass
class ImageEncoderParams:
    dense_w: ad.Tensor        # (TOKEN_DIM, 3)
    dense_b: ad.Tensor        # (TOKEN_DIM,)


def init_image_encoder(rng: np.random.Generator) -> ImageEncoderParams:
    return ImageEncoderParams(
        dense_w=ad.Tensor(rng.standard_normal((TOKEN_DIM, 3)) / np.sqrt(3),
                          requires_grad=True),
        dense_b=ad.Tensor(np.zeros(TOKEN_DIM), requires_grad=True))


def image_patch_means(img: np.ndarray) -> np.ndarray:
    """Mean color of each 16x16 patch: (..., 32, 32, 3) -> (..., 4, 3)."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-3:] != IMAGE_SHAPE:
        raise ValueError(f"expected image shape {IMAGE_SHAPE}, "
                         f"got {img.shape[-3:]}")
    h = IMAGE_SHAPE[0] // PATCH_GRID
    lead = img.shape[:-3]
    folded = img.reshape(lead + (PATCH_GRID, h, PATCH_GRID, h, 3))
    means = folded.mean(axis=(-4, -2))                  # (..., 2, 2, 3)
    return means.reshape(lead + (PATCH_GRID * PATCH_GRID, 3))


def tokens_from_patches(means, p: ImageEncoderParams) -> ImageTokens:
    means = means if isinstance(means, ad.Tensor) else ad.Tensor(means)
    lead = "beghijkl"[: means.ndim - 2]
    tok = ad.einsum(f"od,{lead}nd->{lead}no", p.dense_w, means) + p.dense_b
    return ImageTokens(tok)


def encode_image(img: np.ndarray, p: ImageEncoderParams) -> ImageTokens:
    """Deterministic invariant tokens: patch means through a dense map."""
    return tokens_from_patches(image_patch_means(img), p)


# -- full observation encoder -----------------------------------------------------------

@dataclass
class ObservationEncoderParams:
    point: PointEncoderParams
    image: ImageEncoderParams
    fem: FemParams
    use_fusion: bool = True


def merge_features(a: IrrepFeature, b: IrrepFeature) -> IrrepFeature:
    """Concatenate channels degree by degree; degrees present in only one
    input pass through unchanged."""
    a, b = a.astensor(), b.astensor()
    blocks: dict[int, Any] = {}
    for ell in sorted(set(a.degrees) | set(b.degrees)):
        if ell in a.blocks and ell in b.blocks:
            blocks[ell] = ad.concat([a.block(ell), b.block(ell)], axis=-2)
        else:
            blocks[ell] = a.blocks.get(ell, b.blocks.get(ell))
    return IrrepFeature(blocks)


def observation_signature(enc: ObservationEncoderParams) -> Signature:
    """Signature of the conditioning feature produced by the encoder."""
    return enc.fem.proj.out_signature


def default_observation_encoder(rng: np.random.Generator,
                                workspace_radius: float,
                                out_signature: Signature = (
                                    (0, 12), (1, 6), (2, 4)),
                                use_fusion: bool = True,
                                ) -> ObservationEncoderParams:
    cloud_sig = ((0, 8), (1, 3), (2, 4))
    merged = tuple(sorted(
        {0: cloud_sig[0][1] + 1, 1: cloud_sig[1][1] + 3,
         2: cloud_sig[2][1]}.items()))
    return ObservationEncoderParams(
        point=init_point_encoder(rng, cloud_sig, workspace_radius),
        image=init_image_encoder(rng),
        fem=init_fem(rng, merged, d_img=TOKEN_DIM, d_att=TOKEN_DIM,
                     out_signature=out_signature),
        use_fusion=use_fusion)


@dataclass
class RawObsFeatures:
    """Parameter-free per-observation quantities, cached at dataset load so
    training touches only the trainable path."""

    moments: IrrepFeature      # cloud moments, blocks (..., 32, 2l+1)
    patch_means: np.ndarray    # (..., 4, 3)
    proprio_emb: IrrepFeature  # blocks (..., 1, 1) and (..., 3, 3)
    centroid: np.ndarray       # (..., 3)


def precompute_obs(obs: Observation, enc: ObservationEncoderParams,
                   ) -> RawObsFeatures:
    centered, centroid = normalize_cloud(obs.cloud)
    return RawObsFeatures(
        moments=cloud_moments(centered, enc.point),
        patch_means=image_patch_means(obs.image),
        proprio_emb=embed_proprio(obs.proprio, centroid),
        centroid=centroid)


def stack_raw(raws: list[RawObsFeatures]) -> RawObsFeatures:
    def stack_feats(feats):
        degrees = feats[0].degrees
        return IrrepFeature({ell: np.stack([f.block(ell) for f in feats])
                             for ell in degrees})

    return RawObsFeatures(
        moments=stack_feats([r.moments for r in raws]),
        patch_means=np.stack([r.patch_means for r in raws]),
        proprio_emb=stack_feats([r.proprio_emb for r in raws]),
        centroid=np.stack([r.centroid for r in raws]))


def cond_from_raw(raw: RawObsFeatures, enc: ObservationEncoderParams,
                  ) -> IrrepFeature:
    """Trainable conditioning path: cloud head, proprio merge, image fusion."""
    cloud_feat = encode_moments(raw.moments, enc.point)
    merged = merge_features(cloud_feat, raw.proprio_emb)
    if not enc.use_fusion:
        return equi_linear(merged, enc.fem.proj)
    tokens = tokens_from_patches(raw.patch_means, enc.image)
    return fem_fuse(merged, tokens, enc.fem)


def encode_observation(obs: Observation, enc: ObservationEncoderParams,
                       ) -> tuple[IrrepFeature, np.ndarray]:
    """Full pathway for a single observation: conditioning feature plus the
    centroid needed to decode positional outputs."""
    raw = precompute_obs(obs, enc)
    return cond_from_raw(raw, enc), raw.centroid


# -- demo record stream ------------------------------------------------------------------

@dataclass
class DemoStep:
    obs: Observation
    action: ActionChunk


@dataclass
class Demo:
    steps: list[DemoStep]
    success: bool


_MAGIC = b"SFDS"
STREAM_VERSION = 1


def _demo_dims(demos: list[Demo]) -> tuple[int, int]:
    first = demos[0].steps[0]
    n_points = first.obs.cloud.n_points
    horizon = first.action.horizon
    for demo in demos:
        if not demo.steps:
            raise ValueError("demos must contain at least one step")
        for step in demo.steps:
            if step.obs.cloud.n_points != n_points:
                raise ValueError("all clouds in a dataset must share a size")
            if step.action.horizon != horizon:
                raise ValueError("all chunks in a dataset must share a horizon")
    return n_points, horizon


def write_demos(path, demos: list[Demo]) -> None:
    """Persist demos in the record-stream format (see module docstring).

    Layout, all little-endian: magic 'SFDS', u32 version, u32 n_demos,
    u32 horizon, u32 n_points, u32 image h/w/c; per demo a u32 step count
    and u8 success flag; per step float64 points (n,3), colors (n,3),
    float32 image, float64 proprio (3 + 6 + 1) and chunk (H*3 + H*6 + H).
    """
    if not demos:
        raise ValueError("refusing to write an empty dataset")
    n_points, horizon = _demo_dims(demos)
    h, w, c = IMAGE_SHAPE
    with open(f"{path}.tmp", "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<6I", STREAM_VERSION, len(demos), horizon,
                             n_points, h, w))
        fh.write(struct.pack("<I", c))
        for demo in demos:
            fh.write(struct.pack("<IB", len(demo.steps), int(demo.success)))
            for step in demo.steps:
                o, a = step.obs, step.action
                fh.write(o.cloud.points.astype("<f8").tobytes())
                fh.write(o.cloud.colors.astype("<f8").tobytes())
                fh.write(o.image.astype("<f4").tobytes())
                fh.write(o.proprio.position.astype("<f8").tobytes())
                fh.write(o.proprio.rotation6d.astype("<f8").tobytes())
                fh.write(struct.pack("<d", o.proprio.gripper))
                fh.write(a.positions.astype("<f8").tobytes())
                fh.write(a.rotation6d.astype("<f8").tobytes())
                fh.write(a.gripper.astype("<f8").tobytes())
    os.replace(f"{path}.tmp", path)


def read_demos(path) -> list[Demo]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a demo stream")
    off = 4
    version, n_demos, horizon, n_points, h, w, c = struct.unpack_from(
        "<7I", buf, off)
    off += 28
    if version != STREAM_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if (h, w, c) != IMAGE_SHAPE:
        raise DataFormatError(f"{path}: image shape {(h, w, c)} unsupported")

    def take(dtype, shape):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype,
                            count=int(np.prod(shape)), offset=off)
        off += arr.nbytes
        return arr.reshape(shape).astype(np.float64)

    demos = []
    for _ in range(n_demos):
        n_steps, success = struct.unpack_from("<IB", buf, off)
        off += 5
        steps = []
        for _ in range(n_steps):
            points = take("<f8", (n_points, 3))
            colors = take("<f8", (n_points, 3))
            image = take("<f4", IMAGE_SHAPE)
            pos = take("<f8", (3,))
            r6 = take("<f8", (2, 3))
            (grip,) = struct.unpack_from("<d", buf, off)
            off += 8
            a_pos = take("<f8", (horizon, 3))
            a_r6 = take("<f8", (horizon, 2, 3))
            a_grip = take("<f8", (horizon,))
            steps.append(DemoStep(
                obs=Observation(cloud=PointCloud(points, colors), image=image,
                                proprio=ProprioState(pos, r6, grip)),
                action=ActionChunk(a_pos, a_r6, a_grip)))
        demos.append(Demo(steps=steps, success=bool(success)))
    if off != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return demos
