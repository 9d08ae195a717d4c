"""Command-line front end: datasets, training, evaluation, sweeps, checks.

Every verb resolves its settings from three layers, later winning: built-in
defaults, a ``--config`` JSON file, explicit flags. Environment variables are
never consulted. The resolved flat-key mapping is written to
``<out>/config.json``, and rerunning a verb with only ``--config`` pointed at
that file reproduces the run.

Config schema (flat keys; each verb reads its subset):
    verb, out, seed                        every run
    task, n_demos, horizon                 gen-data, eval, sweep-steps
    data, model, fusion, learning_rate,
    batch_size, epochs, ema_decay,
    sampler_steps, model_seed              train
    checkpoint, perturbation, episodes,
    params, action_horizon                 eval, sweep-steps
    steps                                  sweep-steps (comma list)
    layers, trials, tolerance              equiv-check
    ops                                    grad-check

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 conformance
failure. Tables print human-readable and land next to the run as JSONL.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench, flow
from . import layers as ly
from . import perception as pc
from .checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .errors import SphereflowError
from .fusion import ImageTokens, fem_fuse, init_fem
from .so3 import IrrepFeature, apply_rotation, random_rotation, wigner_blocks

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CONFORMANCE = 3

MODEL_VARIANTS = ("equivariant", "mlp-baseline")
CHECKPOINT_SENTINELS = ("oracle", "random")
EQUIV_LAYERS = ("equi_linear", "gated", "conv", "efilm", "fem", "unet")
EQUIV_TOLERANCE = 1e-6
MLP_VIOLATION_FLOOR = 0.1    # below this the negative control is suspect


class UsageError(Exception):
    """Bad invocation: unknown flag, missing value, out-of-range setting."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; route through our codes.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config plumbing ---------------------------------------------------------------

def _resolve(defaults: dict, args: argparse.Namespace, verb: str) -> dict:
    cfg = dict(defaults)
    path = getattr(args, "config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise SphereflowError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(defaults) - {"verb"}
        if unknown:
            raise UsageError(f"config {path} has keys {sorted(unknown)} "
                             f"unknown to {verb}")
        cfg.update({k: v for k, v in loaded.items() if k != "verb"})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["verb"] = verb
    return cfg


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    return out


def _emit_table(rows: list[dict], columns: list[str], out: Path,
                name: str) -> None:
    """Aligned text to stdout and <name>.txt; one JSON object per row to
    <name>.jsonl."""
    widths = {c: max(len(c), *(len(_cell(r.get(c))) for r in rows))
              for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines += ["  ".join(_cell(r.get(c)).ljust(widths[c]) for c in columns)
              for r in rows]
    text = "\n".join(lines)
    print(text)
    (out / f"{name}.txt").write_text(text + "\n")
    with open(out / f"{name}.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


# -- model construction ------------------------------------------------------------

def _build_model(cfg: dict):
    rng = np.random.default_rng(cfg["model_seed"])
    if cfg["model"] == "equivariant":
        return flow.make_policy(rng, horizon=cfg["horizon"],
                                use_fusion=bool(cfg["fusion"]))
    if cfg["model"] == "mlp-baseline":
        return flow.make_mlp_policy(rng, horizon=cfg["horizon"])
    raise UsageError(f"unknown model {cfg['model']!r}; expected one of "
                     f"{MODEL_VARIANTS}")


def _load_policy(cfg: dict, task: str):
    """A checkpoint directory (written by train), or a reference sentinel."""
    spec = str(cfg["checkpoint"])
    if spec == "oracle":
        return bench.OraclePolicy(task)
    if spec == "random":
        return bench.RandomPolicy()
    run = Path(spec)
    fname = "ema.npz" if cfg.get("params", "ema") == "ema" else "params.npz"
    path = run / fname if run.is_dir() else run
    if not path.exists():
        raise SphereflowError(
            f"checkpoint {path} does not exist; pass a train output "
            f"directory or one of {CHECKPOINT_SENTINELS}")
    state, meta = load_checkpoint(path)
    model_cfg = {k: meta[k] for k in ("model", "model_seed", "horizon",
                                      "fusion")}
    policy = _build_model(model_cfg)
    assign_parameters(policy.named_parameters(), state)
    return policy


# -- verbs -------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    if cfg["n_demos"] < 1:
        raise UsageError("--n must be at least 1")
    if cfg["task"] not in bench.TASKS:
        raise UsageError(f"--task must be one of {bench.TASKS}")
    out = _out_dir(cfg)
    stem = cfg["task"].replace("-", "_")
    path = out / f"{stem}_{cfg['n_demos']}.sfds"
    demos, manifest = bench.generate_dataset(path, cfg["task"],
                                             cfg["n_demos"], cfg["seed"],
                                             cfg["horizon"])
    print(f"wrote {manifest['n_demos']} demos "
          f"({sum(len(d.steps) for d in demos)} steps) to {path}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    if not cfg.get("data"):
        raise UsageError("--data is required")
    out = _out_dir(cfg)
    demos = pc.read_demos(cfg["data"])
    policy = _build_model(cfg)
    examples = bench.demos_to_examples(demos, policy.enc)
    tcfg = flow.TrainConfig(learning_rate=cfg["learning_rate"],
                            batch_size=cfg["batch_size"],
                            epochs=cfg["epochs"],
                            ema_decay=cfg["ema_decay"],
                            horizon=cfg["horizon"],
                            sampler_steps=cfg["sampler_steps"],
                            seed=cfg["seed"])
    result = flow.train(examples, policy, tcfg, out)
    meta = {k: cfg[k] for k in ("model", "model_seed", "horizon", "fusion")}
    save_checkpoint(out / "params.npz", policy.named_parameters(), meta)
    save_checkpoint(out / "ema.npz", result.ema, meta)
    losses = [m["loss"] for m in result.metrics]
    print(f"{len(losses)} steps on {len(examples)} examples; "
          f"final loss {result.final_loss:.3e}, min loss {min(losses):.3e}, "
          f"checkpoints in {out}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    policy = _load_policy(cfg, cfg["task"])
    report = bench.evaluate(policy, cfg["task"],
                            n_episodes=cfg["episodes"],
                            perturbation=cfg["perturbation"],
                            seed=cfg["seed"],
                            sampler_steps=cfg["sampler_steps"],
                            action_horizon=cfg["action_horizon"])
    record = report.as_record()
    record["checkpoint"] = str(cfg["checkpoint"])
    _emit_table([record], ["task", "perturbation", "episodes", "successes",
                           "success_rate", "mean_episode_length"],
                out, "eval")
    (out / "report.json").write_text(json.dumps(record, sort_keys=True,
                                                indent=2) + "\n")
    return EXIT_OK


def _mean_predict_seconds(policy, task: str, steps: int, seed: int,
                          n_scenes: int = 4, repeats: int = 3) -> float:
    obs = [bench.ToySim(bench.sample_scene(task, np.random.default_rng(
        [seed, i]))).observe() for i in range(n_scenes)]
    rng = np.random.default_rng(seed)
    for o in obs:
        policy.predict(o, steps=steps, rng=rng)     # warm caches
    t0 = time.perf_counter()
    for _ in range(repeats):
        for o in obs:
            policy.predict(o, steps=steps, rng=rng)
    return (time.perf_counter() - t0) / (repeats * len(obs))


def cmd_sweep_steps(cfg: dict) -> int:
    steps_list = _parse_int_list(cfg["steps"], "--steps")
    out = _out_dir(cfg)
    policy = _load_policy(cfg, cfg["task"])
    rows = []
    for k in steps_list:
        report = bench.evaluate(policy, cfg["task"],
                                n_episodes=cfg["episodes"],
                                perturbation=cfg["perturbation"],
                                seed=cfg["seed"], sampler_steps=k,
                                action_horizon=cfg["action_horizon"])
        rows.append({"sampler_steps": k,
                     "successes": report.successes,
                     "episodes": report.episodes,
                     "success_rate": report.success_rate,
                     "mean_predict_seconds": _mean_predict_seconds(
                         policy, cfg["task"], k, cfg["seed"])})
    _emit_table(rows, ["sampler_steps", "successes", "episodes",
                       "success_rate", "mean_predict_seconds"],
                out, "sweep")
    return EXIT_OK


def _parse_int_list(value, flag: str) -> list[int]:
    if isinstance(value, list):
        items = value
    else:
        items = [s for s in str(value).split(",") if s.strip()]
    if not items:
        raise UsageError(f"{flag} needs at least one entry")
    try:
        return [int(s) for s in items]
    except ValueError as exc:
        raise UsageError(f"{flag} entries must be integers: {exc}") from exc


# -- conformance checks --------------------------------------------------------------

def _relative_violation(lhs: IrrepFeature, rhs: IrrepFeature) -> float:
    worst = 0.0
    for ell in rhs.degrees:
        a, b = np.asarray(lhs.block(ell)), np.asarray(rhs.block(ell))
        scale = max(float(np.abs(b).max()), 1e-12)
        worst = max(worst, float(np.abs(a - b).max()) / scale)
    return worst


def _equiv_suite(layers: list[str], trials: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    sig = ((0, 4), (1, 3), (2, 2))
    rows = []
    for layer in layers:
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, _equiv_trial(layer, rng, sig))
        rows.append({"layer": layer, "max_violation": worst,
                     "tolerance": EQUIV_TOLERANCE,
                     "status": "PASS" if worst <= EQUIV_TOLERANCE
                     else "FAIL"})
    return rows


def _equiv_trial(layer: str, rng: np.random.Generator, sig) -> float:
    def feat(s=sig, lead=()):
        return IrrepFeature({ell: rng.standard_normal(lead + (c, 2 * ell + 1))
                             for ell, c in s})

    rot = random_rotation(rng)
    blocks = wigner_blocks(rot)

    if layer == "equi_linear":
        p = ly.init_equi_linear(rng, sig, ((0, 3), (1, 2), (2, 1)))
        f = feat()
        lhs = ly.equi_linear(apply_rotation(f, blocks), p).numpy()
        rhs = apply_rotation(ly.equi_linear(f, p).numpy(), blocks)
    elif layer == "gated":
        f = feat(ly._with_gates(sig))
        lhs = ly.gated_nonlinearity(apply_rotation(f, blocks)).numpy()
        rhs = apply_rotation(ly.gated_nonlinearity(f).numpy(), blocks)
    elif layer == "conv":
        p = ly.init_temporal_conv(rng, sig, sig, lags=2)
        f = feat(lead=(2, 8))
        lhs = ly.spherical_temporal_conv(apply_rotation(f, blocks), p).numpy()
        rhs = apply_rotation(ly.spherical_temporal_conv(f, p).numpy(), blocks)
    elif layer == "efilm":
        f, gamma, beta = feat(), feat(), feat()
        lhs = ly.efilm(apply_rotation(f, blocks), apply_rotation(gamma, blocks),
                       apply_rotation(beta, blocks)).numpy()
        rhs = apply_rotation(ly.efilm(f, gamma, beta).numpy(), blocks)
    elif layer == "fem":
        p = init_fem(rng, sig, d_img=6, d_att=5)
        tokens = ImageTokens(rng.standard_normal((4, 6)))
        f = feat()
        lhs = fem_fuse(apply_rotation(f, blocks), tokens, p).numpy()
        rhs = apply_rotation(fem_fuse(f, tokens, p).numpy(), blocks)
    elif layer == "unet":
        cfg = ly.UNetConfig(signature=((0, 2), (1, 1), (2, 1)),
                            cond_signature=sig,
                            hidden=(((0, 6), (1, 3), (2, 2)),
                                    ((0, 8), (1, 4), (2, 2))),
                            time_dim=4, lags=2, downsample=2)
        params = ly.init_unet(rng, cfg)
        params.out_proj = ly.init_equi_linear(
            rng, ly.unet_head_signature(cfg), cfg.signature, bias=True)
        x = feat(cfg.signature, lead=(2, 4))
        cond = feat(cfg.cond_signature, lead=(2,))
        lhs = ly.equi_unet_forward(apply_rotation(x, blocks), 0.6,
                                   apply_rotation(cond, blocks),
                                   cfg, params).numpy()
        rhs = apply_rotation(
            ly.equi_unet_forward(x, 0.6, cond, cfg, params).numpy(), blocks)
    else:
        raise UsageError(f"unknown layer {layer!r}; expected subset of "
                         f"{EQUIV_LAYERS}")
    return _relative_violation(lhs, rhs)


def _mlp_violation(trials: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    policy = flow.make_mlp_policy(rng)
    # give the zero-initialized heads signal so the check is not vacuous
    for w in (policy.weights[-1], policy.tau_w):
        w.data[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
    scene = bench.sample_scene("reach", rng)
    raw = pc.stack_raw([pc.precompute_obs(bench.ToySim(scene).observe(),
                                          policy.enc)])
    worst = 0.0
    for _ in range(trials):
        rot = random_rotation(rng)
        blocks = wigner_blocks(rot)
        rot_scene = bench.perturb_scene(scene, rot)
        raw_rot = pc.stack_raw([pc.precompute_obs(
            bench.ToySim(rot_scene).observe(), policy.enc)])
        x = flow.sample_source(pc.PROPRIO_SIGNATURE, rng,
                               leading=(1, policy.horizon))
        with ad.no_grad():
            lhs = policy.velocity(apply_rotation(x, blocks), 0.4,
                                  policy.condition(raw_rot)).numpy()
            rhs = apply_rotation(
                policy.velocity(x, 0.4, policy.condition(raw)).numpy(),
                blocks)
        worst = max(worst, _relative_violation(lhs, rhs))
    return worst


def cmd_equiv_check(cfg: dict) -> int:
    out = _out_dir(cfg)
    layers = (list(EQUIV_LAYERS) if cfg["layers"] in (None, "", "all")
              else [s.strip() for s in str(cfg["layers"]).split(",")
                    if s.strip()])
    if cfg["model"] == "mlp-baseline":
        violation = _mlp_violation(cfg["trials"], cfg["seed"])
        expected = violation >= MLP_VIOLATION_FLOOR
        rows = [{"layer": "mlp-velocity", "max_violation": violation,
                 "tolerance": MLP_VIOLATION_FLOOR,
                 "status": "EXPECTED-FAIL" if expected else "SUSPECT"}]
        _emit_table(rows, ["layer", "max_violation", "tolerance", "status"],
                    out, "equiv")
        return EXIT_OK if expected else EXIT_CONFORMANCE
    rows = _equiv_suite(layers, cfg["trials"], cfg["seed"])
    _emit_table(rows, ["layer", "max_violation", "tolerance", "status"],
                out, "equiv")
    bad = [r for r in rows if r["status"] != "PASS"]
    return EXIT_CONFORMANCE if bad else EXIT_OK


def cmd_grad_check(cfg: dict) -> int:
    out = _out_dir(cfg)
    ops = (list(flow.GRAD_CHECK_OPS) if cfg["ops"] in (None, "", "all")
           else [s.strip() for s in str(cfg["ops"]).split(",") if s.strip()])
    unknown = set(ops) - set(flow.GRAD_CHECK_OPS)
    if unknown:
        raise UsageError(f"unknown ops {sorted(unknown)}; expected subset "
                         f"of {flow.GRAD_CHECK_OPS}")
    rows = []
    for op in ops:
        err = flow.grad_check(op, np.random.default_rng(cfg["seed"]))
        tol = 1e-7 if op in flow._LINEAR_OPS else 1e-4
        rows.append({"op": op, "max_rel_error": err, "tolerance": tol,
                     "status": "PASS" if err <= tol else "FAIL"})
    _emit_table(rows, ["op", "max_rel_error", "tolerance", "status"],
                out, "grad")
    bad = [r for r in rows if r["status"] != "PASS"]
    return EXIT_CONFORMANCE if bad else EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--config", type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sphereflow",
                     description="equivariant rectified-flow policies on a "
                                 "synthetic manipulation benchmark")
    sub = parser.add_subparsers(dest="verb", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a scripted-expert dataset")
    p.add_argument("--task", type=str)
    p.add_argument("--n", dest="n_demos", type=int)
    p.add_argument("--horizon", type=int)
    _add_common(p)

    p = sub.add_parser("train", help="train a policy on a dataset")
    p.add_argument("--data", type=str)
    p.add_argument("--model", type=str, choices=MODEL_VARIANTS)
    p.add_argument("--fusion", type=int, choices=(0, 1))
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ema", dest="ema_decay", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--sampler-steps", dest="sampler_steps", type=int)
    p.add_argument("--model-seed", dest="model_seed", type=int)
    _add_common(p)

    for verb in ("eval", "sweep-steps"):
        p = sub.add_parser(verb, help=f"{verb} a trained policy")
        p.add_argument("--checkpoint", type=str)
        p.add_argument("--task", type=str)
        p.add_argument("--perturb", dest="perturbation", type=str)
        p.add_argument("--episodes", type=int)
        p.add_argument("--params", type=str, choices=("ema", "raw"))
        p.add_argument("--action-horizon", dest="action_horizon", type=int)
        if verb == "eval":
            p.add_argument("--sampler-steps", dest="sampler_steps", type=int)
        else:
            p.add_argument("--steps", type=str)
        _add_common(p)

    p = sub.add_parser("equiv-check", help="measure layer equivariance")
    p.add_argument("--layers", type=str)
    p.add_argument("--model", type=str, choices=MODEL_VARIANTS)
    p.add_argument("--trials", type=int)
    _add_common(p)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--ops", type=str)
    _add_common(p)

    return parser


_DEFAULTS = {
    "gen-data": {"task": "reach", "n_demos": 10, "horizon": 16, "seed": 0,
                 "out": None},
    "train": {"data": None, "model": "equivariant", "fusion": 1,
              "learning_rate": 2e-3, "batch_size": 64, "epochs": 100,
              "ema_decay": 0.95, "horizon": 16, "sampler_steps": 10,
              "model_seed": 7, "seed": 0, "out": None},
    "eval": {"checkpoint": None, "task": "reach", "perturbation": "none",
             "episodes": 50, "params": "ema", "sampler_steps": 10,
             "action_horizon": 8, "seed": 0, "out": None},
    "sweep-steps": {"checkpoint": None, "task": "pick-place",
                    "perturbation": "none", "episodes": 100, "params": "ema",
                    "steps": "1,2,3,4,5,6,7,8,9,10", "action_horizon": 8,
                    "seed": 0, "out": None},
    "equiv-check": {"layers": "all", "model": "equivariant", "trials": 20,
                    "seed": 0, "out": None},
    "grad-check": {"ops": "all", "seed": 0, "out": None},
}

_VERBS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-steps": cmd_sweep_steps,
    "equiv-check": cmd_equiv_check,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(_DEFAULTS[args.verb], args, args.verb)
        if cfg.get("checkpoint", "x") is None:
            raise UsageError("--checkpoint is required")
        return _VERBS[args.verb](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SphereflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
