"""Image-to-spherical feature fusion.

Invariant image tokens are injected into the degree-0 block of a spherical
feature through single-head cross attention and a learned convex gate, and
the result is projected by a per-degree linear map. Degrees above zero never
see image content, which is exactly why the fusion commutes with rotations
when the tokens are held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, SignatureMismatchError
from .layers import EquiLinearParams, equi_linear, init_equi_linear
from .so3 import IrrepFeature, Signature

_LEAD = "beghijkl"  # disjoint from the op letters o, d, n, t, a


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


@dataclass
class ImageTokens:
    """A matrix of rotation-invariant image features, (..., n_tokens, d)."""

    tokens: Any

    def __post_init__(self):
        t = self.tokens
        if not isinstance(t, ad.Tensor):
            t = np.asarray(t, dtype=np.float64)
            if not np.all(np.isfinite(t)):
                raise ValueError("image tokens must be finite")
        if t.ndim < 2 or t.shape[-2] < 1:
            raise ValueError(f"tokens must be (..., n_tokens >= 1, d), "
                             f"got {t.shape}")
        self.tokens = t

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class FemParams:
    """Projections for cross attention, the gate head, and the output map."""

    wq: ad.Tensor        # (d_att, d_q)
    wk: ad.Tensor        # (d_att, d_img)
    wv: ad.Tensor        # (d_q, d_img)
    gate_w: ad.Tensor    # (d_q, 2 d_q)
    gate_b: ad.Tensor    # (d_q,)
    proj: EquiLinearParams

    def __post_init__(self):
        if self.wq.shape[0] != self.wk.shape[0]:
            raise ConfigError(
                f"query dim {self.wq.shape[0]} != key dim {self.wk.shape[0]}")
        d_q = self.wq.shape[1]
        if self.wv.shape[0] != d_q or self.gate_w.shape != (d_q, 2 * d_q) \
                or self.gate_b.shape != (d_q,):
            raise ConfigError("value/gate heads inconsistent with query dim")

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.wq.shape[0])


def init_fem(rng: np.random.Generator, signature: Signature, d_img: int,
             d_att: int = 16, out_signature: Signature | None = None,
             ) -> FemParams:
    d_q = dict(signature)[0]

    def w(*shape):
        return ad.Tensor(rng.standard_normal(shape) / np.sqrt(shape[-1]),
                         requires_grad=True)

    return FemParams(
        wq=w(d_att, d_q), wk=w(d_att, d_img), wv=w(d_q, d_img),
        gate_w=w(d_q, 2 * d_q),
        gate_b=ad.Tensor(np.zeros(d_q), requires_grad=True),
        proj=init_equi_linear(rng, signature, out_signature or signature))


def _proj_rows(x: ad.Tensor, w: ad.Tensor) -> ad.Tensor:
    lead = _LEAD[: x.ndim - 2]
    return ad.einsum(f"od,{lead}nd->{lead}no", w, x)


def cross_attention(f0, img: ImageTokens, p: FemParams) -> ad.Tensor:
    """Single-head scaled dot-product attention.

    `f0` rows are queries, shape (..., n_q, d_q); keys and values come from
    the image tokens. The output matches the query shape.
    """
    f0 = _as_tensor(f0)
    tokens = _as_tensor(img.tokens)
    if f0.shape[-1] != p.wq.shape[1]:
        raise SignatureMismatchError(
            f"queries have dim {f0.shape[-1]}, wq expects {p.wq.shape[1]}")
    if tokens.shape[-1] != p.wk.shape[1]:
        raise SignatureMismatchError(
            f"tokens have dim {tokens.shape[-1]}, wk expects {p.wk.shape[1]}")
    q = _proj_rows(f0, p.wq)            # (..., n_q, d_att)
    k = _proj_rows(tokens, p.wk)        # (..., n_t, d_att)
    v = _proj_rows(tokens, p.wv)        # (..., n_t, d_q)
    lead = _LEAD[: max(q.ndim, k.ndim) - 2]
    lq = lead if q.ndim > 2 else ""
    lk = lead if k.ndim > 2 else ""
    scores = ad.einsum(f"{lq}na,{lk}ta->{lead if (lq or lk) else ''}nt",
                       q, k) * p.scale
    att = ad.softmax(scores, axis=-1)
    la = lead if att.ndim > 2 else ""
    lv = lead if v.ndim > 2 else ""
    return ad.einsum(f"{la}nt,{lv}td->{lead if (la or lv) else ''}nd", att, v)


def gate(attended, original, p: FemParams) -> ad.Tensor:
    """Convex per-channel blend: sigmoid(W [att | orig] + b) picks how much
    attended content replaces the original."""
    attended = _as_tensor(attended)
    original = _as_tensor(original)
    if attended.shape != original.shape:
        raise SignatureMismatchError(
            f"gate inputs must match: {attended.shape} vs {original.shape}")
    both = ad.concat([attended, original], axis=-1)
    logits = _proj_rows(both, p.gate_w) + p.gate_b
    g = ad.sigmoid(logits)
    return g * attended + (1.0 - g) * original


def fem_fuse(f_pcd: IrrepFeature, img: ImageTokens, p: FemParams,
             ) -> IrrepFeature:
    """Replace the degree-0 block by gated cross attention against the image
    tokens, keep higher degrees as they are, then apply the projection."""
    if 0 not in f_pcd.blocks:
        raise SignatureMismatchError("fusion requires a degree-0 block")
    f_pcd = f_pcd.astensor()
    f0 = f_pcd.block(0)                         # (..., C0, 1)
    rows = ad.swapaxes(f0, -1, -2)              # (..., 1, C0): one query row
    attended = cross_attention(rows, img, p)
    gated = gate(attended, rows, p)
    blocks = dict(f_pcd.blocks)
    blocks[0] = ad.swapaxes(gated, -1, -2)
    return equi_linear(IrrepFeature(blocks), p.proj)
