"""Equivariant building blocks and the temporal U-Net velocity network.

Every layer here commutes with the per-degree Wigner action: weights mix
channels within a degree and never touch the m axis, gates and modulation
coefficients are built from invariants, and temporal convolutions share
their kernels across m. Features flow through as `IrrepFeature` objects
whose blocks are autodiff tensors of shape ``(..., C_l, 2l+1)``; sequence
inputs use leading axes ``(batch, time)``.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, SignatureMismatchError
from .so3 import IrrepFeature, Signature, check_same_signature

EPS_NORM = 1e-8

_LEAD = "abdefghijk"  # spare einsum letters for leading axes (skips c, m, o)


def _mix(blk, w):
    lead = _LEAD[: blk.ndim - 2]
    return ad.einsum(f"oc,{lead}cm->{lead}om", w, blk)


# -- parameter containers -----------------------------------------------------

@dataclass
class EquiLinearParams:
    """Per-degree channel-mixing weights; bias only on the invariant block."""

    weights: dict[int, ad.Tensor]          # l -> (C_out, C_in)
    bias: ad.Tensor | None = None          # (C0_out,), added to the l=0 block

    @property
    def in_signature(self) -> Signature:
        return tuple((ell, w.shape[1]) for ell, w in sorted(self.weights.items()))

    @property
    def out_signature(self) -> Signature:
        return tuple((ell, w.shape[0]) for ell, w in sorted(self.weights.items()))


@dataclass
class TemporalConvParams:
    """Causal temporal kernels, one (C_out, C_in) matrix per (degree, lag).

    The container is indexed by degree and lag only; there is no m axis
    anywhere in the parameters, which is what makes the convolution commute
    with rotations.
    """

    weights: dict[tuple[int, int], ad.Tensor]  # (l, lag) -> (C_out, C_in)
    padding: str = "edge"

    def __post_init__(self):
        if self.padding not in ("edge", "zero"):
            raise ConfigError(f"unknown padding mode {self.padding!r}")
        if not self.weights:
            raise ConfigError("temporal conv needs at least one kernel")
        lags = {j for _, j in self.weights}
        if lags != set(range(max(lags) + 1)):
            raise ConfigError(f"lags must form a dense range from 0, got {sorted(lags)}")

    @property
    def radius(self) -> int:
        return max(j for _, j in self.weights)

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(sorted({ell for ell, _ in self.weights}))


@dataclass
class EFiLMParams:
    """Heads producing the per-degree modulation features gamma and beta
    from an invariant-carrying conditioning feature."""

    gamma_head: EquiLinearParams
    beta_head: EquiLinearParams
    eps: float = EPS_NORM

    def modulations(self, cond: IrrepFeature) -> tuple[IrrepFeature, IrrepFeature]:
        return equi_linear(cond, self.gamma_head), equi_linear(cond, self.beta_head)


@dataclass
class ConvBlockParams:
    conv: TemporalConvParams
    film: EFiLMParams


@dataclass
class UNetParams:
    in_proj: EquiLinearParams
    down: list[ConvBlockParams]
    mid: ConvBlockParams
    up: list[ConvBlockParams]
    out_proj: EquiLinearParams
    out_tau: EquiLinearParams


@dataclass(frozen=True)
class UNetConfig:
    """Shape contract for the velocity network.

    `hidden` lists the working signature of each down level followed by the
    bottleneck, so `len(hidden) - 1` is the number of down/up sampling steps
    and the horizon must be divisible by `downsample ** (len(hidden) - 1)`.
    `gain_floor` clamps the rational time factor of the second output head
    (see equi_unet_forward); 1/gain_floor bounds the representable terminal
    amplification of the velocity field.
    """

    signature: Signature
    cond_signature: Signature
    hidden: tuple[Signature, ...] = (
        ((0, 16), (1, 6), (2, 4)),
        ((0, 24), (1, 8), (2, 6)),
        ((0, 32), (1, 12), (2, 8)),
    )
    time_dim: int = 8
    lags: int = 2
    downsample: int = 2
    padding: str = "edge"
    gain_floor: float = 1e-3

    def __post_init__(self):
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("time_dim must be an even integer >= 2")
        if self.lags < 0:
            raise ConfigError("lags must be >= 0")
        if self.downsample < 1:
            raise ConfigError("downsample factor must be >= 1")
        if not 0.0 < self.gain_floor <= 1.0:
            raise ConfigError("gain_floor must lie in (0, 1]")
        if len(self.hidden) < 2:
            raise ConfigError("need at least one down level plus a bottleneck")
        feat_degrees = {ell for ell, _ in self.signature}
        for sig in self.hidden:
            if {ell for ell, _ in sig} != feat_degrees:
                raise ConfigError("hidden signatures must cover the same "
                                  "degrees as the input signature")
        cond_degrees = {ell for ell, _ in self.cond_signature}
        if not feat_degrees <= cond_degrees:
            raise ConfigError(
                f"conditioning must carry every feature degree: "
                f"feature {sorted(feat_degrees)}, cond {sorted(cond_degrees)}")

    @property
    def levels(self) -> int:
        return len(self.hidden) - 1

    @property
    def horizon_multiple(self) -> int:
        return self.downsample ** self.levels


# -- core ops -----------------------------------------------------------------

def equi_linear(f: IrrepFeature, p: EquiLinearParams) -> IrrepFeature:
    """Mix channels within each degree; coefficient columns untouched.

    Input degrees the weights do not cover are projected away (dropping a
    whole degree is itself an equivariant map); degrees the weights require
    must be present with matching channel counts.
    """
    f = f.astensor()
    have = dict(f.signature)
    for ell, c_in in p.in_signature:
        if have.get(ell) != c_in:
            raise SignatureMismatchError(
                f"linear weights need degree {ell} with {c_in} channels, "
                f"input carries {f.signature}")
    out: dict[int, ad.Tensor] = {}
    for ell, w in p.weights.items():
        mixed = _mix(f.block(ell), w)
        if ell == 0 and p.bias is not None:
            mixed = mixed + ad.reshape(p.bias, (p.bias.shape[0], 1))
        out[ell] = mixed
    return IrrepFeature(out)


def gated_nonlinearity(f: IrrepFeature) -> IrrepFeature:
    """SiLU on invariant channels; each l>0 channel scaled by the sigmoid of
    a dedicated invariant gate channel taken from the tail of the l=0 block
    (first the l=1 gates, then l=2, and so on)."""
    f = f.astensor()
    if 0 not in f.blocks:
        raise ConfigError("gated nonlinearity needs an l=0 block for gates")
    higher = [(ell, blk) for ell, blk in f.blocks.items() if ell > 0]
    n_gates = sum(blk.shape[-2] for _, blk in higher)
    scalar = f.block(0)
    c0 = scalar.shape[-2]
    if c0 - n_gates < 1:
        raise ConfigError(
            f"l=0 block has {c0} channels but {n_gates} gates plus at least "
            f"one value channel are required")
    values = scalar[..., : c0 - n_gates, :]
    out: dict[int, ad.Tensor] = {0: ad.silu(values)}
    offset = c0 - n_gates
    for ell, blk in higher:
        c = blk.shape[-2]
        gates = ad.sigmoid(scalar[..., offset: offset + c, :])  # (..., C, 1)
        out[ell] = blk * gates
        offset += c
    return IrrepFeature(out)


def efilm(h: IrrepFeature, gamma: IrrepFeature, beta: IrrepFeature,
          eps: float = EPS_NORM) -> IrrepFeature:
    """Equivariant feature modulation.

    Per degree and channel: ``out = (gamma . h) h / max(||h||, eps) + beta``
    where the inner product and norm run over the m axis. Both scalars are
    rotation invariants, so the output transforms exactly like h. A zero
    block passes beta through; gamma = h/||h|| with beta = 0 is the identity.
    """
    h = h.astensor()
    gamma = gamma.astensor()
    beta = beta.astensor()
    check_same_signature(h, gamma, "feature and gamma")
    check_same_signature(h, beta, "feature and beta")
    out: dict[int, ad.Tensor] = {}
    for ell, blk in h.blocks.items():
        g, b = gamma.block(ell), beta.block(ell)
        if g.ndim < blk.ndim:  # modulation lacks the time axis: broadcast
            new = g.shape[:-2] + (1,) * (blk.ndim - g.ndim) + g.shape[-2:]
            g = ad.reshape(g, new)
            b = ad.reshape(b, b.shape[:-2] + (1,) * (blk.ndim - b.ndim)
                           + b.shape[-2:])
        inner = ad.tsum(g * blk, axis=-1, keepdims=True)
        norm = ad.sqrt(ad.maximum(ad.tsum(blk * blk, axis=-1, keepdims=True),
                                  eps * eps))
        out[ell] = inner / norm * blk + b
    return IrrepFeature(out)


def spherical_temporal_conv(seq: IrrepFeature, p: TemporalConvParams,
                            ) -> IrrepFeature:
    """Causal per-degree temporal convolution over axis 1.

    ``out[l][:, t, o] = sum_j sum_c seq[l][:, t-j, c] w[l,j][o, c]`` with
    out-of-range frames supplied by the padding mode. Kernels are shared
    across m, so the operation commutes with any fixed per-frame rotation.
    """
    seq = seq.astensor()
    if seq.degrees != p.degrees:
        raise SignatureMismatchError(
            f"conv weights cover degrees {p.degrees}, feature has "
            f"{seq.degrees}")
    lead = seq.leading_shape
    if len(lead) != 2 or lead[1] < 1:
        raise ValueError("sequence features need (batch, time) leading axes "
                         f"with time >= 1, got {lead}")
    r = p.radius
    t_len = lead[1]
    out: dict[int, ad.Tensor] = {}
    for ell in seq.degrees:
        blk = seq.block(ell)
        padded = ad.pad_axis(blk, 1, r, 0, p.padding) if r else blk
        acc = None
        for j in range(r + 1):
            w = p.weights[(ell, j)]
            if blk.shape[-2] != w.shape[1]:
                raise SignatureMismatchError(
                    f"degree-{ell} block has {blk.shape[-2]} channels, "
                    f"kernel expects {w.shape[1]}")
            shifted = padded[:, r - j: r - j + t_len]
            term = _mix(shifted, w)
            acc = term if acc is None else acc + term
        out[ell] = acc
    return IrrepFeature(out)


def time_embedding(t, dim: int) -> IrrepFeature:
    """Sinusoidal invariant embedding of flow time.

    Accepts a scalar or an array of times in [0, 1]; values outside are
    clamped with a warning. Frequencies are pi * 2^k, so the slowest pair
    (sin pi t, cos pi t) alone separates any two times in [0, 1]. Layout is
    all sines then all cosines; t = 0 gives zeros then ones.
    """
    if dim < 2 or dim % 2:
        raise ConfigError("time embedding dim must be an even integer >= 2")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        warnings.warn("flow time outside [0, 1]; clamping", stacklevel=2)
        t = np.clip(t, 0.0, 1.0)
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    phases = t[..., None] * freqs
    emb = np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)
    return IrrepFeature({0: ad.Tensor(emb[..., None])})


def concat_channels(a: IrrepFeature, b: IrrepFeature) -> IrrepFeature:
    """Stack two features along the channel axis, degree by degree."""
    a, b = a.astensor(), b.astensor()
    if a.degrees != b.degrees:
        raise SignatureMismatchError(
            f"cannot concat features with degrees {a.degrees} and {b.degrees}")
    return IrrepFeature({ell: ad.concat([a.block(ell), b.block(ell)], axis=-2)
                         for ell in a.degrees})


def downsample_time(f: IrrepFeature, factor: int) -> IrrepFeature:
    """Average non-overlapping windows along axis 1."""
    if factor == 1:
        return f
    f = f.astensor()

    def pool(ell, blk):
        b, t = blk.shape[0], blk.shape[1]
        if t % factor:
            raise ValueError(f"time length {t} not divisible by {factor}")
        folded = ad.reshape(blk, (b, t // factor, factor) + blk.shape[2:])
        return ad.tmean(folded, axis=2)

    return f.map(pool)


def upsample_time(f: IrrepFeature, factor: int) -> IrrepFeature:
    """Nearest-neighbor repeat along axis 1."""
    if factor == 1:
        return f
    f = f.astensor()
    return f.map(lambda ell, blk: ad.repeat(blk, factor, axis=1))


# -- initialization ------------------------------------------------------------

def _sig_dict(sig: Signature) -> dict[int, int]:
    return {ell: c for ell, c in sig}


def init_equi_linear(rng: np.random.Generator, sig_in: Signature,
                     sig_out: Signature, bias: bool = True,
                     zero: bool = False) -> EquiLinearParams:
    din, dout = _sig_dict(sig_in), _sig_dict(sig_out)
    if set(dout) - set(din):
        raise ConfigError(f"cannot produce degrees {sorted(set(dout) - set(din))} "
                          "absent from the input")
    weights = {}
    for ell, c_out in dout.items():
        c_in = din[ell]
        w = np.zeros((c_out, c_in)) if zero else \
            rng.standard_normal((c_out, c_in)) / np.sqrt(c_in)
        weights[ell] = ad.Tensor(w, requires_grad=True)
    b = None
    if bias and 0 in dout:
        b = ad.Tensor(np.zeros(dout[0]), requires_grad=True)
    return EquiLinearParams(weights=weights, bias=b)


def init_temporal_conv(rng: np.random.Generator, sig_in: Signature,
                       sig_out: Signature, lags: int,
                       padding: str = "edge") -> TemporalConvParams:
    din, dout = _sig_dict(sig_in), _sig_dict(sig_out)
    if set(din) != set(dout):
        raise ConfigError("temporal conv cannot add or drop degrees")
    weights = {}
    for ell, c_out in dout.items():
        c_in = din[ell]
        for j in range(lags + 1):
            w = rng.standard_normal((c_out, c_in)) / np.sqrt(c_in * (lags + 1))
            weights[(ell, j)] = ad.Tensor(w, requires_grad=True)
    return TemporalConvParams(weights=weights, padding=padding)


def init_efilm(rng: np.random.Generator, cond_sig: Signature,
               target_sig: Signature, eps: float = EPS_NORM) -> EFiLMParams:
    return EFiLMParams(
        gamma_head=init_equi_linear(rng, cond_sig, target_sig, bias=True),
        beta_head=init_equi_linear(rng, cond_sig, target_sig, bias=True),
        eps=eps)


def _with_gates(sig: Signature) -> Signature:
    """Widen the l=0 block so the gated nonlinearity can consume one gate
    channel per l>0 channel and still emit the target signature."""
    d = _sig_dict(sig)
    gates = sum(c for ell, c in d.items() if ell > 0)
    return tuple((ell, c + gates if ell == 0 else c) for ell, c in sorted(d.items()))


def _film_cond_signature(cfg: UNetConfig) -> Signature:
    d = _sig_dict(cfg.cond_signature)
    d[0] = d.get(0, 0) + cfg.time_dim
    return tuple(sorted(d.items()))


def unet_head_signature(cfg: UNetConfig) -> Signature:
    """Input signature of the output heads: trunk features concatenated with
    the raw input, so maps linear in x_t need no trunk capacity at all."""
    dsig = _sig_dict(cfg.signature)
    return tuple((ell, c + dsig.get(ell, 0))
                 for ell, c in sorted(_sig_dict(cfg.hidden[0]).items()))


def init_unet(rng: np.random.Generator, cfg: UNetConfig) -> UNetParams:
    cond_sig = _film_cond_signature(cfg)

    def block(sig_in: Signature, sig_out: Signature) -> ConvBlockParams:
        return ConvBlockParams(
            conv=init_temporal_conv(rng, sig_in, _with_gates(sig_out),
                                    cfg.lags, cfg.padding),
            film=init_efilm(rng, cond_sig, sig_out))

    def cat(a: Signature, b: Signature) -> Signature:
        da, db = _sig_dict(a), _sig_dict(b)
        return tuple(sorted((ell, da[ell] + db[ell]) for ell in da))

    down = []
    prev = cfg.hidden[0]
    for sig in cfg.hidden[: cfg.levels]:
        down.append(block(prev, sig))
        prev = sig
    mid = block(prev, cfg.hidden[-1])
    up = []
    prev = cfg.hidden[-1]
    for sig in reversed(cfg.hidden[: cfg.levels]):
        up.append(block(cat(prev, sig), sig))
        prev = sig
    head_sig = unet_head_signature(cfg)
    return UNetParams(
        in_proj=init_equi_linear(rng, cfg.signature, cfg.hidden[0]),
        down=down, mid=mid, up=up,
        out_proj=init_equi_linear(rng, head_sig, cfg.signature,
                                  bias=True, zero=True),
        out_tau=init_equi_linear(rng, head_sig, cfg.signature,
                                 bias=True, zero=True))


# -- the velocity network ------------------------------------------------------

def _run_block(h: IrrepFeature, blk: ConvBlockParams, cond: IrrepFeature,
               ) -> IrrepFeature:
    h = spherical_temporal_conv(h, blk.conv)
    h = gated_nonlinearity(h)
    gamma, beta = blk.film.modulations(cond)
    return efilm(h, gamma, beta, eps=blk.film.eps)


def equi_unet_forward(x: IrrepFeature, t, cond: IrrepFeature,
                      cfg: UNetConfig, params: UNetParams) -> IrrepFeature:
    """Predict a velocity sequence with the same signature as `x`.

    `x` blocks are (batch, horizon, C_l, 2l+1); `cond` blocks are
    (batch, C_l, 2l+1); `t` is a scalar or per-sample array of flow times.

    Two output heads share the trunk: velocity = out(h, x) + tau * out_tau(h, x)
    with tau = 1/max(1-t, gain_floor) - 1. Along the straight interpolation
    path the regression target factors as (target - x_t) * (1 + t/(1-t)),
    so with the rational factor supplied analytically both heads learn
    bounded displacement-type maps instead of an unbounded terminal gain.
    The heads read x_t directly alongside the trunk features, so the
    dominant linear-in-x_t part of the target costs no trunk capacity.
    Zero-initialized heads still yield an identically zero field, and
    scalar time factors preserve equivariance.
    """
    x = x.astensor()
    check_same_signature(x, cfg.signature, "input and config signature")
    check_same_signature(cond, cfg.cond_signature, "conditioning and config")
    lead = x.leading_shape
    if len(lead) != 2:
        raise ValueError(f"expected (batch, horizon) leading axes, got {lead}")
    batch, horizon = lead
    if horizon % cfg.horizon_multiple:
        raise ConfigError(f"horizon {horizon} not divisible by "
                          f"{cfg.horizon_multiple}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    temb = time_embedding(t_arr, cfg.time_dim)
    cond = cond.astensor()
    film_cond_blocks = dict(cond.blocks)
    film_cond_blocks[0] = ad.concat([cond.block(0), temb.block(0)], axis=-2) \
        if 0 in cond.blocks else temb.block(0)
    film_cond = IrrepFeature(film_cond_blocks)

    h = equi_linear(x, params.in_proj)
    skips = []
    for blk in params.down:
        h = _run_block(h, blk, film_cond)
        skips.append(h)
        h = downsample_time(h, cfg.downsample)
    h = _run_block(h, params.mid, film_cond)
    for blk in params.up:
        h = upsample_time(h, cfg.downsample)
        h = concat_channels(h, skips.pop())
        h = _run_block(h, blk, film_cond)
    head_in = IrrepFeature({
        ell: ad.concat([h.block(ell), x.block(ell)], axis=-2)
        if ell in x.blocks else h.block(ell)
        for ell in h.degrees})
    out = equi_linear(head_in, params.out_proj)
    out_tau = equi_linear(head_in, params.out_tau)
    tau = 1.0 / np.maximum(1.0 - t_arr, cfg.gain_floor) - 1.0
    tau = tau.reshape(batch, 1, 1, 1)
    return IrrepFeature({ell: out.block(ell) + out_tau.block(ell) * tau
                         for ell in out.degrees})


# -- parameter traversal ---------------------------------------------------------

def _key_str(k) -> str:
    if isinstance(k, tuple):
        ell, lag = k
        return f"deg{ell}.lag{lag}"
    if isinstance(k, (int, np.integer)):
        return f"deg{k}"
    return str(k)


def named_parameters(obj, prefix: str = "") -> dict[str, ad.Tensor]:
    """Flatten any nest of dataclasses, dicts, and lists into name -> Tensor.

    Dict keys encode degree (and lag for conv kernels) in the name; list
    entries append their index to the enclosing field name.
    """
    out: dict[str, ad.Tensor] = {}
    if isinstance(obj, ad.Tensor):
        out[prefix or "param"] = obj
    elif isinstance(obj, Mapping):
        for k in sorted(obj):
            sub = _key_str(k)
            out.update(named_parameters(obj[k], f"{prefix}.{sub}" if prefix else sub))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.update(named_parameters(v, f"{prefix}{i}"))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (float, int, str, bool)) or v is None:
                continue
            out.update(named_parameters(v, f"{prefix}.{f.name}" if prefix else f.name))
    return out
