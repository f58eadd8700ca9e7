"""Command-line entry point.

Structured options live in a JSON config (--config); flags cover only
seed, paths and verbosity.  Every subcommand is deterministic given
(config, seed) — outputs are byte-identical apart from the `meta`
block of checkpoints.

Exit codes: 0 success, 1 validation / usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ag
from . import body, checkpoint, metrics, selftest as selftest_mod, synth, training
from .flow import FlowConfig, NonConvergenceError
from .rotation import Rotation
from .solver import (DivergenceError, Observation, SolveConfig, SolverFailure,
                     solve_multi_view, solve_single_view)

FORMAT_VERSIONS = {"model": 1, "checkpoint": checkpoint.FORMAT_VERSION}


class ValidationError(ValueError):
    pass


def _config_keys(cls):
    return [f.name for f in dataclasses.fields(cls)]


def _schema_epilog():
    parts = [
        "config keys by subcommand (JSON file passed with --config):",
        "  gen-model: n_per_joint, n_shape, seed",
        "  gen-data : model, n_scenes, rig (standard|depth_ambiguous|{...}), "
        "views, noise {" + ", ".join(_config_keys(synth.NoiseSpec)) + "}",
        "  train    : model, dataset, train {" + ", ".join(_config_keys(training.TrainConfig)) + "}",
        "  sample   : checkpoint, n, context | (dataset, scene)",
        "  solve    : model, pose_init, observations, solve {"
        + ", ".join(_config_keys(SolveConfig)) + "}",
        "  eval     : model, dataset, checkpoint, n_samples, views, "
        "use_solver, experiment",
        "  toy-fit  : n_modes | targets, steps, batch, lr, noise_kappa, "
        "flow {" + ", ".join(_config_keys(FlowConfig)) + "}",
        "  selftest : (none)",
    ]
    return "\n".join(parts)


def _load_config(path, allowed):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"config is not valid JSON: {e}")
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _outdir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    return path


def _rig_from_config(cfg, views):
    rig = cfg.get("rig", "standard")
    if rig == "standard":
        return synth.standard_rig(views)
    if rig == "depth_ambiguous":
        return synth.depth_ambiguous_rig(views)
    if isinstance(rig, dict):
        return synth.RigSpec.from_json(rig)
    raise ValidationError(f"unknown rig {rig!r}")


def cmd_gen_model(args):
    cfg = _load_config(args.config, ["n_per_joint", "n_shape", "seed"])
    seed = args.seed if args.seed is not None else cfg.get("seed", 20240214)
    m = body.make_toy_model(cfg.get("n_per_joint", 12), cfg.get("n_shape", 4), seed)
    path = os.path.join(_outdir(args), "model.json")
    body.save_model(m, path)
    print(f"wrote {path} (K={m.n_joints}, N={m.n_vertices}, S={m.n_shape})")
    return 0


def cmd_gen_data(args):
    cfg = _load_config(args.config, ["model", "n_scenes", "rig", "views", "noise"])
    m = body.load_model(cfg.get("model") or _default_model(args))
    views = int(cfg.get("views", 1))
    rig = _rig_from_config(cfg, views)
    noise = synth.NoiseSpec.from_json(cfg.get("noise", {}))
    seed = args.seed if args.seed is not None else 0
    path = os.path.join(_outdir(args), "dataset.jsonl")
    recs = synth.gen_dataset(m, int(cfg.get("n_scenes", 100)), rig, noise,
                             seed, path)
    print(f"wrote {path} ({len(recs)} scenes, {views} view(s))")
    return 0


def _default_model(args):
    p = os.path.join(_outdir(args), "model.json")
    if not os.path.exists(p):
        raise ValidationError("no model path in config and no model.json in --out")
    return p


def cmd_train(args):
    cfg = _load_config(args.config, ["model", "dataset", "train"])
    m = body.load_model(cfg.get("model") or _default_model(args))
    if "dataset" not in cfg:
        raise ValidationError("train config needs a dataset path")
    dataset = synth.load_dataset(cfg["dataset"])
    tdict = dict(cfg.get("train", {}))
    if args.seed is not None:
        tdict["seed"] = args.seed
    try:
        tcfg = training.TrainConfig(**tdict)
    except TypeError as e:
        raise ValidationError(f"bad train config: {e}")
    flow, extra, log = training.train(m, dataset, tcfg)
    out = _outdir(args)
    ck = os.path.join(out, "checkpoint.json")
    checkpoint.save_checkpoint(ck, flow, extra, tcfg,
                               with_timestamp=not args.no_timestamp)
    logp = os.path.join(out, "train_log.csv")
    with open(logp, "w") as f:
        f.write(training.log_to_csv(log))
    print(f"wrote {ck} and {logp}; final losses: "
          + ", ".join(f"{k}={v:.4f}" for k, v in log[-1].items() if k not in ("epoch", "phase")))
    return 0


def cmd_sample(args):
    cfg = _load_config(args.config, ["checkpoint", "n", "context", "dataset", "scene"])
    if "checkpoint" not in cfg:
        raise ValidationError("sample config needs a checkpoint path")
    flow, extra, tcfg = checkpoint.load_checkpoint(cfg["checkpoint"])
    if "context" in cfg:
        ctx = np.asarray(cfg["context"], float)
    elif "dataset" in cfg:
        dataset = synth.load_dataset(cfg["dataset"])
        rec = dataset[int(cfg.get("scene", 0))]
        blocks = (tcfg or {}).get("blocks", 2)
        ctx = training.make_encoder(extra, blocks)(rec.context_features)
    else:
        raise ValidationError("sample config needs either context or dataset")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    samples = flow.flow_sample(ctx, int(cfg.get("n", 10)), rng, include_mode=True)
    doc = {"samples": [{"is_mode": i == 0,
                        "joint_rotations": [r.to_json() for r in s.joint_rotations],
                        "global_rotation": s.global_rotation.to_json(),
                        "shape": np.asarray(s.shape).tolist(),
                        "log_prob": s.log_prob} for i, s in enumerate(samples)]}
    path = _write_json(os.path.join(_outdir(args), "samples.json"), doc)
    print(f"wrote {path}")
    return 0


def cmd_solve(args):
    cfg = _load_config(args.config, ["model", "pose_init", "observations", "solve"])
    m = body.load_model(cfg.get("model") or _default_model(args))
    if "observations" not in cfg or "pose_init" not in cfg:
        raise ValidationError("solve config needs pose_init and observations")
    obs = [Observation(np.asarray(o["anchors"], float),
                       np.asarray(o["scale"], float),
                       np.asarray(o.get("aux", np.ones(len(o["anchors"])).tolist()), float),
                       np.asarray(o["intrinsics"], float),
                       np.asarray(o.get("extr_r", np.eye(3).tolist()), float),
                       np.asarray(o.get("extr_t", [0, 0, 0]), float))
           for o in cfg["observations"]]
    sdict = dict(cfg.get("solve", {}))
    try:
        scfg = SolveConfig(**sdict)
    except TypeError as e:
        raise ValidationError(f"bad solve config: {e}")
    pose_cfg = cfg["pose_init"]
    if isinstance(pose_cfg[0][0], list):
        poses = [[Rotation(np.asarray(q, float)) for q in view] for view in pose_cfg]
    else:
        poses = [[Rotation(np.asarray(q, float)) for q in pose_cfg]] * len(obs)
    if len(obs) == 1:
        res = solve_single_view(m, poses[0], obs[0], scfg)
    else:
        res = solve_multi_view(m, poses, obs, scfg)
    doc = {"pose": [r.to_json() for r in res.pose],
           "delta_vectors": res.delta_vectors.tolist(),
           "beta": res.beta.tolist(),
           "translation": res.translation.tolist(),
           "weighted_rms_residual": res.weighted_rms_residual,
           "per_anchor_residuals": res.per_anchor_residuals.tolist(),
           "n_relinearizations": res.n_relinearizations}
    path = _write_json(os.path.join(_outdir(args), "solve_result.json"), doc)
    print(f"wrote {path} (rms {res.weighted_rms_residual:.4f} px)")
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config, ["model", "dataset", "checkpoint",
                                     "n_samples", "views", "use_solver",
                                     "experiment", "init_sigma_deg"])
    m = body.load_model(cfg.get("model") or _default_model(args))
    if "dataset" not in cfg:
        raise ValidationError("eval config needs a dataset path")
    dataset = synth.load_dataset(cfg["dataset"])
    views = args.views if args.views is not None else int(cfg.get("views", 1))
    seed = args.seed if args.seed is not None else 0
    if cfg.get("experiment") == "multi_view":
        doc = metrics.multi_view_trend(m, dataset,
                                       cfg.get("init_sigma_deg", 8.0), seed)
    else:
        if "checkpoint" not in cfg:
            raise ValidationError("eval config needs a checkpoint path")
        flow, extra, tcfg = checkpoint.load_checkpoint(cfg["checkpoint"])
        blocks = (tcfg or {}).get("blocks", 2)
        encode = training.make_encoder(extra, blocks)
        doc = metrics.evaluate(flow, encode, m, dataset,
                               n_samples=int(cfg.get("n_samples", 100)),
                               use_solver=bool(cfg.get("use_solver", False)),
                               views=views, rng_seed=seed)
    path = _write_json(os.path.join(_outdir(args), "metrics.json"), doc)
    print(f"wrote {path}")
    if "summary" in doc:
        print(json.dumps(doc["summary"], indent=1))
    else:
        print(json.dumps(doc, indent=1))
    return 0


def cmd_toy_fit(args):
    cfg = _load_config(args.config, ["n_modes", "targets", "steps", "batch",
                                     "lr", "noise_kappa", "flow",
                                     "report_samples"])
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    if "targets" in cfg:
        targets = [Rotation(np.asarray(q, float)) for q in cfg["targets"]]
    else:
        from .distributions import uniform_sample
        targets = [uniform_sample(rng) for _ in range(int(cfg.get("n_modes", 4)))]
    fcfg = FlowConfig(**cfg["flow"]) if "flow" in cfg else None
    flow, report = training.fit_toy_distribution(
        targets, fcfg, steps=int(cfg.get("steps", 3000)),
        batch=int(cfg.get("batch", 128)), lr=float(cfg.get("lr", 1e-3)),
        noise_kappa=float(cfg.get("noise_kappa", 24.0)), seed=seed,
        report_samples=int(cfg.get("report_samples", 10000)))
    report["targets"] = [t.to_json() for t in targets]
    out = _outdir(args)
    checkpoint.save_checkpoint(os.path.join(out, "toy_checkpoint.json"), flow,
                               with_timestamp=not args.no_timestamp)
    path = _write_json(os.path.join(out, "toy_report.json"), report)
    print(f"wrote {path}")
    print(json.dumps({k: report[k] for k in
                      ("nll_before", "nll_after", "captured_fraction",
                       "per_mode_mass")}, indent=1))
    return 0


def cmd_selftest(args):
    report = selftest_mod.run_selftest(args.seed if args.seed is not None else 0)
    print(selftest_mod.format_report(report))
    if args.out:
        _write_json(os.path.join(_outdir(args), "selftest.json"), report)
    return 0 if report["ok"] else 2


COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "toy-fit": cmd_toy_fit,
    "selftest": cmd_selftest,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="flowpose",
        description=__doc__,
        epilog=_schema_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version",
                   version=f"flowpose {__version__} "
                           f"(formats: {json.dumps(FORMAT_VERSIONS)})")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--views", type=int, default=None,
                   help="view count override for eval")
    p.add_argument("--threads", type=int, default=1,
                   help="scene-level parallelism (1 = deterministic)")
    p.add_argument("--no-timestamp", action="store_true",
                   help="omit the meta timestamp from checkpoints")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ValueError, FileNotFoundError,
            body.ModelLoadError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SolverFailure, DivergenceError, NonConvergenceError,
            training.TrainingAborted, ag.NotSPDError,
            np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
