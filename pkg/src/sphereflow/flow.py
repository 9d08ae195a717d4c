"""Rectified-flow engine and the two velocity-model heads.

Training regresses a velocity network onto straight-line path targets:
x_t = (1-t) x0 + t a with target velocity a - x0, where x0 is standard
Gaussian per irrep coefficient and a is an embedded expert action chunk.
Sampling integrates dx/dt = v(x, t, cond) with plain Euler steps from a
fresh source draw. The module also carries the optimizer (adaptive moments
with decoupled weight decay), cosine schedule, EMA shadow, the generic
training loop with line-delimited metrics, and a finite-difference gradient
checker for every differentiable operation in the stack.

Two interchangeable policies close the loop: an equivariant temporal U-Net
over irrep features, and a deliberately unconstrained dense baseline over
flattened coefficients (the negative control for every symmetry claim).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingDivergedError
from .fusion import ImageTokens, cross_attention, fem_fuse, init_fem
from .layers import (UNetConfig, UNetParams, efilm, equi_linear,
                     equi_unet_forward, gated_nonlinearity, init_equi_linear,
                     init_temporal_conv, init_unet, named_parameters,
                     spherical_temporal_conv, time_embedding)
from .perception import (PROPRIO_SIGNATURE, ActionChunk, Observation,
                         ObservationEncoderParams, RawObsFeatures,
                         cond_from_raw, decode_action_chunk,
                         default_observation_encoder, precompute_obs,
                         stack_raw)
from .so3 import IrrepFeature, Signature, check_same_signature

DEFAULT_HORIZON = 16
DEFAULT_SAMPLER_STEPS = 10
# Flow times very close to 1 produce few but steep loss terms (the analytic
# 1/(1-t) output gain amplifies their gradients); a generous norm clip keeps
# those rare minibatches from distorting the optimizer's moment estimates.
GRAD_CLIP_NORM = 10.0


# -- path construction ---------------------------------------------------------

@dataclass
class FlowPathSample:
    """One (batch of) straight-path training points.

    Features are numpy-blocked with leading axes (batch, horizon); `t` is a
    scalar or a (batch,) array of flow times.
    """

    x0: IrrepFeature
    a: IrrepFeature
    t: np.ndarray
    x_t: IrrepFeature
    v_star: IrrepFeature


def sample_source(signature: Signature, rng: np.random.Generator,
                  leading: tuple[int, ...] = ()) -> IrrepFeature:
    """Independent standard-normal coefficients for every degree, channel,
    and leading index; isotropic within each (2l+1) block by construction."""
    return IrrepFeature({
        ell: rng.standard_normal(leading + (c, 2 * ell + 1))
        for ell, c in signature})


def _t_factor(t: np.ndarray, block: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (block.ndim - t.ndim))


def make_path_sample(x0: IrrepFeature, a: IrrepFeature, t) -> FlowPathSample:
    x0, a = x0.numpy(), a.numpy()
    check_same_signature(x0, a, "source and target")
    if x0.leading_shape != a.leading_shape:
        raise ValueError(f"leading shapes differ: {x0.leading_shape} vs "
                         f"{a.leading_shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    x_t = IrrepFeature({
        ell: (1.0 - _t_factor(t_arr, blk)) * blk
        + _t_factor(t_arr, blk) * a.block(ell)
        for ell, blk in x0.blocks.items()})
    v_star = IrrepFeature({ell: a.block(ell) - blk
                           for ell, blk in x0.blocks.items()})
    return FlowPathSample(x0=x0, a=a, t=t_arr, x_t=x_t, v_star=v_star)


# -- loss and sampler ---------------------------------------------------------------

def rf_loss(paths: FlowPathSample, cond, velocity_fn,
            params: dict[str, ad.Tensor],
            grad_weights: np.ndarray | None = None,
            ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared velocity error over all coefficients, plus reverse-mode
    gradients for every parameter.

    `grad_weights` (per-sample, nonnegative, unit population mean) reweights
    the gradient only; the returned loss is always the plain mean, and the
    weighted objective is returned as a third element. The true velocity
    grows like 1/(1-t) near the target end of the path, so uniform weighting
    lets rare late-t samples dominate the gradient noise; weighting by
    (1-t)^2 regresses the implied endpoint instead, which has the same
    minimizer but bounded per-sample gradients. The plain mean is then a
    late-crossing diagnostic: it stays near the 1/(1-t)-amplified head error
    until that head is nearly exact, while the objective tracks descent.
    """
    pred = velocity_fn(paths.x_t.astensor(), paths.t, cond)
    total = None
    wtotal = None
    count = 0
    for ell, blk in pred.blocks.items():
        if not np.all(np.isfinite(blk.data)):
            raise TrainingDivergedError(
                f"non-finite velocity prediction in degree-{ell} block "
                f"(shape {blk.shape})")
        diff = blk - ad.Tensor(paths.v_star.block(ell))
        sq = diff * diff
        total = ad.tsum(sq) if total is None else total + ad.tsum(sq)
        if grad_weights is not None:
            w = np.asarray(grad_weights, dtype=np.float64).reshape(
                (-1,) + (1,) * (len(blk.shape) - 1))
            wsq = ad.tsum(sq * w)
            wtotal = wsq if wtotal is None else wtotal + wsq
        count += int(np.prod(diff.shape))
    loss = total * (1.0 / count)
    objective = loss if grad_weights is None else wtotal * (1.0 / count)
    for p in params.values():
        p.grad = None
    objective.backward()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}
    if grad_weights is None:
        return float(loss.data), grads
    return float(loss.data), grads, float(objective.data)


def euler_integrate(x0: IrrepFeature, velocity_fn, steps: int) -> IrrepFeature:
    """x <- x + (1/N) v(x, k/N) for k = 0..N-1; exact for constant fields."""
    if steps < 1:
        raise ConfigError(f"need at least one Euler step, got {steps}")
    with ad.no_grad():
        x = {ell: ad.Tensor(blk) for ell, blk in x0.numpy().blocks.items()}
        for k in range(steps):
            v = velocity_fn(IrrepFeature(dict(x)), k / steps)
            x = {ell: blk + v.block(ell) * (1.0 / steps)
                 for ell, blk in x.items()}
    return IrrepFeature(x).numpy()


def euler_sample(model, cond, centroid, steps: int,
                 rng: np.random.Generator | None = None,
                 x0: IrrepFeature | None = None) -> ActionChunk:
    """Integrate the model's velocity field from a source draw and decode.

    `cond` must be batched with a single entry (as produced by
    `model.condition` on a one-element batch). Passing `x0` (leading shape
    (horizon,)) overrides the source draw, which is how paired-noise
    evaluation couples runs across perturbations.
    """
    if x0 is None:
        if rng is None:
            raise ConfigError("euler_sample needs an rng or an explicit x0")
        x0 = sample_source(PROPRIO_SIGNATURE, rng, leading=(model.horizon,))
    x0 = x0.numpy()
    batched = IrrepFeature({ell: blk[None] for ell, blk in x0.blocks.items()})
    final = euler_integrate(
        batched, lambda x, t: model.velocity(x, t, cond), steps)
    squeezed = IrrepFeature({ell: blk[0] for ell, blk in final.blocks.items()})
    return decode_action_chunk(squeezed, centroid)


# -- optimizer, schedule, EMA ----------------------------------------------------------

class AdamW:
    """Adaptive-moment descent with decoupled weight decay (bias-corrected
    first/second moments; decay applied as p -= lr * wd * p)."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: dict[str, ad.Tensor],
             grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr * lr_scale
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                            + self.weight_decay * p.data)


def cosine_lr(step: int, total_steps: int) -> float:
    """Cosine decay from 1 to 0 over the run."""
    if total_steps <= 0:
        return 1.0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * frac))


class Ema:
    """Exponential moving average of parameters; evaluation uses the shadow."""

    def __init__(self, params: dict[str, ad.Tensor], decay: float):
        if not 0.0 < decay < 1.0:
            raise ConfigError(f"EMA decay must lie in (0, 1), got {decay}")
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, ad.Tensor]) -> None:
        d = self.decay
        for k, p in params.items():
            self.shadow[k] = d * self.shadow[k] + (1 - d) * p.data

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.shadow.items()}


# -- training loop -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; the seed fixes every stochastic choice.

    Defaults keep the reference regime of batch 64, EMA decay 0.95,
    horizon 16 and 10 sampler steps. The desk-scale network is orders of
    magnitude smaller than a production policy, so the default learning
    rate sits above the 1e-4 used at full scale.
    """

    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    ema_decay: float = 0.95
    horizon: int = DEFAULT_HORIZON
    sampler_steps: int = DEFAULT_SAMPLER_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        for name in ("batch_size", "epochs", "horizon", "sampler_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")


@dataclass
class TrainExample:
    """One supervised pair: cached observation features and the embedded
    (centroid-relative) expert chunk, blocks (horizon, C, 2l+1)."""

    raw: RawObsFeatures
    target: IrrepFeature


@dataclass
class TrainResult:
    metrics: list[dict]
    ema: dict[str, np.ndarray]
    final_loss: float


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(examples: list[TrainExample], model, cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Minibatch rectified-flow descent with EMA shadow and step metrics.

    Each step descends the endpoint-weighted objective (see rf_loss); the
    record carries both that objective and the plain unweighted loss. The
    plain loss is the headline number but lags the objective: it contains
    the 1/(1-t)-amplified error of the late-time head, so it plateaus or
    climbs until that head is nearly exact, then drops sharply.

    Metrics records carry only seed-determined fields (step, epoch, loss,
    objective, grad norm) so identical configs produce bit-identical logs;
    wall-clock timings go to a separate sidecar file. Gradients above
    GRAD_CLIP_NORM in global norm are rescaled onto that sphere before the
    update; the logged grad_norm is the unclipped value.
    """
    if not examples:
        raise ConfigError("cannot train on an empty example list")
    for ex in examples:
        if ex.target.leading_shape != (cfg.horizon,):
            raise ConfigError(
                f"target horizon {ex.target.leading_shape} does not match "
                f"config horizon {cfg.horizon}")
    signature = examples[0].target.signature
    params = model.named_parameters()
    opt = AdamW(params, cfg.learning_rate)
    ema = Ema(params, cfg.ema_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(examples)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    metrics: list[dict] = []
    timings: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for b in range(batches_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            started = time.perf_counter()
            raws = stack_raw([examples[i].raw for i in idx])
            a = IrrepFeature({
                ell: np.stack([examples[i].target.block(ell) for i in idx])
                for ell, _ in signature})
            x0 = sample_source(signature, rng,
                               leading=(len(idx), cfg.horizon))
            t = rng.uniform(size=len(idx))
            paths = make_path_sample(x0, a, t)
            cond = model.condition(raws)
            # 3 (1-t)^2 has unit mean over t ~ U[0, 1].
            loss, grads, objective = rf_loss(
                paths, cond, model.velocity, params,
                grad_weights=3.0 * (1.0 - t) ** 2)
            if not np.isfinite(loss) or loss > 1e6:
                raise TrainingDivergedError(
                    f"loss diverged at step {step}: {loss}; last records: "
                    f"{metrics[-3:]}")
            grad_norm = math.sqrt(sum(float(np.sum(g * g))
                                      for g in grads.values()))
            if grad_norm > GRAD_CLIP_NORM:
                scale = GRAD_CLIP_NORM / grad_norm
                grads = {k: g * scale for k, g in grads.items()}
            opt.step(params, grads, cosine_lr(step, total_steps))
            ema.update(params)
            metrics.append({"step": step, "epoch": epoch, "loss": loss,
                            "objective": objective, "grad_norm": grad_norm})
            timings.append({"step": step,
                            "seconds": time.perf_counter() - started})
            step += 1
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out_dir / "metrics.jsonl", metrics)
        _write_jsonl(out_dir / "timings.jsonl", timings)
    return TrainResult(metrics=metrics, ema=ema.state(),
                       final_loss=metrics[-1]["loss"])


# -- equivariant policy ----------------------------------------------------------------------

@dataclass
class RectifiedFlowPolicy:
    """Observation encoder plus equivariant temporal U-Net velocity field."""

    enc: ObservationEncoderParams
    unet: UNetParams
    unet_cfg: UNetConfig
    horizon: int

    def named_parameters(self) -> dict[str, ad.Tensor]:
        named = {f"enc.{k}": v for k, v in named_parameters(self.enc).items()}
        named.update({f"unet.{k}": v
                      for k, v in named_parameters(self.unet).items()})
        return named

    def condition(self, raw: RawObsFeatures) -> IrrepFeature:
        return cond_from_raw(raw, self.enc)

    def velocity(self, x: IrrepFeature, t, cond: IrrepFeature) -> IrrepFeature:
        return equi_unet_forward(x, t, cond, self.unet_cfg, self.unet)

    def predict(self, obs: Observation, steps: int = DEFAULT_SAMPLER_STEPS,
                rng: np.random.Generator | None = None,
                x0: IrrepFeature | None = None) -> ActionChunk:
        raw = stack_raw([precompute_obs(obs, self.enc)])
        with ad.no_grad():
            cond = self.condition(raw)
            return euler_sample(self, cond, raw.centroid[0], steps, rng, x0)


def make_policy(rng: np.random.Generator, horizon: int = DEFAULT_HORIZON,
                workspace_radius: float = 0.3, use_fusion: bool = True,
                cond_signature: Signature = ((0, 12), (1, 6), (2, 4)),
                hidden: tuple[Signature, ...] = (
                    ((0, 16), (1, 8)),
                    ((0, 24), (1, 12)),
                    ((0, 32), (1, 16)),
                ),
                time_dim: int = 8) -> RectifiedFlowPolicy:
    enc = default_observation_encoder(rng, workspace_radius,
                                      out_signature=cond_signature,
                                      use_fusion=use_fusion)
    cfg = UNetConfig(signature=PROPRIO_SIGNATURE,
                     cond_signature=cond_signature, hidden=hidden,
                     time_dim=time_dim)
    if horizon % cfg.horizon_multiple:
        raise ConfigError(f"horizon {horizon} must be divisible by "
                          f"{cfg.horizon_multiple}")
    return RectifiedFlowPolicy(enc=enc, unet=init_unet(rng, cfg),
                               unet_cfg=cfg, horizon=horizon)


# -- dense baseline policy ----------------------------------------------------------------------

@dataclass
class MlpPolicy:
    """Unconstrained dense velocity over flattened coefficients.

    Same observation inputs, loss, sampler and training loop as the
    equivariant policy, but every irrep coefficient is treated as a plain
    number, so nothing ties the network to the Wigner action. Serves as the
    non-equivariant control.
    """

    weights: list[ad.Tensor]
    biases: list[ad.Tensor]
    tau_w: ad.Tensor                 # second output head, see equi_unet_forward
    tau_b: ad.Tensor
    enc: ObservationEncoderParams    # featurization only; never trained here
    horizon: int
    time_dim: int = 8
    gain_floor: float = 1e-3

    def named_parameters(self) -> dict[str, ad.Tensor]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"dense{i}.w"] = w
            named[f"dense{i}.b"] = b
        named["tau.w"] = self.tau_w
        named["tau.b"] = self.tau_b
        return named

    def condition(self, raw: RawObsFeatures) -> ad.Tensor:
        parts = [_flatten_feature(raw.moments),
                 ad.Tensor(raw.patch_means.reshape(
                     raw.patch_means.shape[:-2] + (-1,))),
                 _flatten_feature(raw.proprio_emb)]
        return ad.concat(parts, axis=-1)

    def velocity(self, x: IrrepFeature, t, cond: ad.Tensor) -> IrrepFeature:
        x = x.astensor()
        batch = x.block(0).shape[0]
        flat = _flatten_chunk(x)
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        temb = time_embedding(t_arr, self.time_dim).block(0)
        temb = ad.reshape(temb, (batch, self.time_dim))
        h = ad.concat([flat, temb, cond], axis=-1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i == last:
                tau = 1.0 / np.maximum(1.0 - t_arr, self.gain_floor) - 1.0
                h = ad.concat([h, flat], axis=-1)
                out = ad.einsum("od,bd->bo", w, h) + b
                out_tau = ad.einsum("od,bd->bo", self.tau_w, h) + self.tau_b
                h = out + out_tau * tau.reshape(batch, 1)
            else:
                h = ad.einsum("od,bd->bo", w, h) + b
                h = ad.silu(h)
        return _unflatten_chunk(h, self.horizon)

    def predict(self, obs: Observation, steps: int = DEFAULT_SAMPLER_STEPS,
                rng: np.random.Generator | None = None,
                x0: IrrepFeature | None = None) -> ActionChunk:
        raw = stack_raw([precompute_obs(obs, self.enc)])
        with ad.no_grad():
            cond = self.condition(raw)
            return euler_sample(self, cond, raw.centroid[0], steps, rng, x0)


def _flatten_feature(f: IrrepFeature) -> ad.Tensor:
    f = f.astensor()
    parts = []
    for ell in f.degrees:
        blk = f.block(ell)
        parts.append(ad.reshape(blk, blk.shape[:-2] + (-1,)))
    return ad.concat(parts, axis=-1)


def _flatten_chunk(x: IrrepFeature) -> ad.Tensor:
    """(batch, H, C, 2l+1) blocks -> (batch, H * sum(C (2l+1)))."""
    parts = []
    batch = x.block(x.degrees[0]).shape[0]
    for ell in x.degrees:
        blk = x.block(ell)
        parts.append(ad.reshape(blk, (batch, blk.shape[1], -1)))
    stacked = ad.concat(parts, axis=-1)
    return ad.reshape(stacked, (batch, -1))


def _unflatten_chunk(h: ad.Tensor, horizon: int) -> IrrepFeature:
    batch = h.shape[0]
    per_step = h.shape[-1] // horizon
    if per_step != 10 or h.shape[-1] % horizon:
        raise ConfigError(f"flat chunk width {h.shape[-1]} does not match "
                          f"horizon {horizon} with signature "
                          f"{PROPRIO_SIGNATURE}")
    grid = ad.reshape(h, (batch, horizon, per_step))
    g0 = ad.reshape(grid[:, :, :1], (batch, horizon, 1, 1))
    g1 = ad.reshape(grid[:, :, 1:], (batch, horizon, 3, 3))
    return IrrepFeature({0: g0, 1: g1})


def obs_flat_dim(enc: ObservationEncoderParams) -> int:
    moments = sum(c * (2 * ell + 1)
                  for ell, c in enc.point.moment_signature)
    proprio = sum(c * (2 * ell + 1) for ell, c in PROPRIO_SIGNATURE)
    return moments + 12 + proprio      # + flattened 4x3 patch means


def make_mlp_policy(rng: np.random.Generator,
                    horizon: int = DEFAULT_HORIZON,
                    workspace_radius: float = 0.3, width: int = 256,
                    depth: int = 3, time_dim: int = 8,
                    enc: ObservationEncoderParams | None = None) -> MlpPolicy:
    if enc is None:
        enc = default_observation_encoder(rng, workspace_radius)
    chunk_dim = horizon * 10
    dims = [chunk_dim + time_dim + obs_flat_dim(enc)] + [width] * depth \
        + [chunk_dim]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        # The output heads also see the raw flattened x_t (linear bypass).
        fan_in = dims[i] if i < len(dims) - 2 else dims[i] + chunk_dim
        fan_out = dims[i + 1]
        scale = 0.0 if i == len(dims) - 2 else 1.0 / np.sqrt(fan_in)
        weights.append(ad.Tensor(rng.standard_normal((fan_out, fan_in)) * scale,
                                 requires_grad=True))
        biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))
    tau_w = ad.Tensor(np.zeros((chunk_dim, dims[-2] + chunk_dim)),
                      requires_grad=True)
    tau_b = ad.Tensor(np.zeros(chunk_dim), requires_grad=True)
    return MlpPolicy(weights=weights, biases=biases, tau_w=tau_w, tau_b=tau_b,
                     enc=enc, horizon=horizon, time_dim=time_dim)


# -- gradient checker -------------------------------------------------------------------------------

GRAD_CHECK_OPS = ("equi_linear", "gated", "efilm", "conv", "attention",
                  "fem", "unet", "mlp")

_LINEAR_OPS = ("equi_linear", "conv")


def _rand_feature(rng, sig, lead=()):
    return IrrepFeature({
        ell: ad.Tensor(rng.standard_normal(lead + (c, 2 * ell + 1)),
                       requires_grad=True)
        for ell, c in sig})


def _leaves(feature_or_params) -> dict[str, ad.Tensor]:
    if isinstance(feature_or_params, IrrepFeature):
        return {f"input.deg{ell}": feature_or_params.block(ell)
                for ell in feature_or_params.degrees}
    return named_parameters(feature_or_params)


def _grad_check_case(name: str, rng):
    """Build (leaf tensors, forward closure) for one named operation."""
    sig = ((0, 3), (1, 2), (2, 1))
    if name == "equi_linear":
        f = _rand_feature(rng, sig, (2,))
        p = init_equi_linear(rng, sig, ((0, 2), (1, 2), (2, 1)))
        leaves = {**_leaves(f), **{f"p.{k}": v
                                   for k, v in named_parameters(p).items()}}
        return leaves, lambda: equi_linear(f, p)
    if name == "gated":
        f = _rand_feature(rng, ((0, 5), (1, 2), (2, 1)), (2,))
        return _leaves(f), lambda: gated_nonlinearity(f)
    if name == "efilm":
        h = _rand_feature(rng, sig, (2,))
        gamma = _rand_feature(rng, sig, (2,))
        beta = _rand_feature(rng, sig, (2,))
        leaves = {f"h.deg{l}": h.block(l) for l in h.degrees}
        leaves.update({f"gamma.deg{l}": gamma.block(l) for l in gamma.degrees})
        leaves.update({f"beta.deg{l}": beta.block(l) for l in beta.degrees})
        return leaves, lambda: efilm(h, gamma, beta)
    if name == "conv":
        f = _rand_feature(rng, sig, (2, 4))
        p = init_temporal_conv(rng, sig, ((0, 2), (1, 1), (2, 1)), lags=2)
        leaves = {**_leaves(f), **{f"p.{k}": v
                                   for k, v in named_parameters(p).items()}}
        return leaves, lambda: spherical_temporal_conv(f, p)
    if name == "attention":
        p = init_fem(rng, sig, d_img=5, d_att=4)
        q = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        toks = ad.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        leaves = {"queries": q, "tokens": toks,
                  **{f"p.{k}": v for k, v in named_parameters(p).items()
                     if k.split(".")[0] in ("wq", "wk", "wv")}}

        def fwd():
            att = cross_attention(q, ImageTokens(toks), p)
            return IrrepFeature({0: ad.reshape(att, att.shape + (1,))})
        return leaves, fwd
    if name == "fem":
        f = _rand_feature(rng, sig, ())
        p = init_fem(rng, sig, d_img=5, d_att=4)
        toks = ad.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        leaves = {**_leaves(f), "tokens": toks,
                  **{f"p.{k}": v for k, v in named_parameters(p).items()}}
        return leaves, lambda: fem_fuse(f, ImageTokens(toks), p)
    if name == "unet":
        cfg = UNetConfig(signature=((0, 2), (1, 1)),
                         cond_signature=((0, 3), (1, 2), (2, 1)),
                         hidden=(((0, 5), (1, 2)), ((0, 6), (1, 2))),
                         time_dim=4, lags=1)
        p = init_unet(rng, cfg)
        # re-randomize the zero-initialized output heads so their gradients
        # and curvature are exercised
        for head in (p.out_proj, p.out_tau):
            for ell, w in head.weights.items():
                w.data[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
        x = _rand_feature(rng, cfg.signature, (2, 4))
        cond = _rand_feature(rng, cfg.cond_signature, (2,))
        t = rng.uniform(size=2)
        leaves = {**{f"x.{k}": v for k, v in _leaves(x).items()},
                  **{f"cond.deg{l}": cond.block(l) for l in cond.degrees},
                  **{f"p.{k}": v for k, v in named_parameters(p).items()}}
        return leaves, lambda: equi_unet_forward(x, t, cond, cfg, p)
    if name == "mlp":
        model = make_mlp_policy(rng, horizon=4, width=6, depth=2)
        for w in [*model.weights, model.tau_w]:
            w.data[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
        x = _rand_feature(rng, PROPRIO_SIGNATURE, (2, 4))
        cond = ad.Tensor(rng.standard_normal((2, obs_flat_dim(model.enc))),
                         requires_grad=True)
        t = rng.uniform(size=2)
        leaves = {**{f"x.{k}": v for k, v in _leaves(x).items()},
                  "cond": cond, **model.named_parameters()}
        return leaves, lambda: model.velocity(x, t, cond)
    raise ConfigError(f"unknown grad-check op {name!r}; known: "
                      f"{GRAD_CHECK_OPS}")


def grad_check(op_name: str, rng: np.random.Generator | None = None,
               step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite-difference
    gradients over every parameter and input coefficient of the named op."""
    rng = np.random.default_rng(0) if rng is None else rng
    leaves, forward = _grad_check_case(op_name, rng)
    probe_rng = np.random.default_rng(12345)
    probe_cache = {}

    def loss_value() -> ad.Tensor:
        out = forward()
        total = None
        for ell in out.degrees:
            blk = out.block(ell)
            if ell not in probe_cache:
                probe_cache[ell] = probe_rng.standard_normal(blk.shape)
            term = ad.tsum(blk * ad.Tensor(probe_cache[ell]))
            total = term if total is None else total + term
        return total

    for t in leaves.values():
        t.grad = None
    loss_value().backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in leaves.items()}
    worst = 0.0
    with ad.no_grad():
        for key, tensor in leaves.items():
            flat = tensor.data.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                up = float(loss_value().data)
                flat[i] = keep - step
                down = float(loss_value().data)
                flat[i] = keep
                fd = (up - down) / (2 * step)
                a = analytic[key].reshape(-1)[i]
                denom = max(abs(a), abs(fd), 1e-2)
                worst = max(worst, abs(a - fd) / denom)
    return worst
