"""``f3`` command line: one subcommand per pipeline stage.

Every subcommand writes ``summary.json`` into ``--out`` (and prints it), and
exits nonzero when a check fails. Config files are strict JSON: unknown
keys are rejected.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .events import EventFileError

SUMMARY_VERSION = 1


class ConfigError(ValueError):
    pass


def load_json(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def strict_kwargs(data: dict, allowed, what: str) -> dict:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {unknown}")
    return data


def emit(out: Path, command: str, ok: bool, payload: dict) -> int:
    summary = {"command": command, "version": SUMMARY_VERSION, "passed": bool(ok), **payload}
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(summary, indent=2, sort_keys=True, default=_json_default)
    (out / "summary.json").write_text(text + "\n")
    print(text)
    return 0 if ok else 1


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# -- model loading ---------------------------------------------------------


def load_f3(path, with_head: bool = True):
    """Feature-field model (and head) from a training checkpoint.

    Only the needed sections are materialized: the config is read first,
    then exactly the ``f3.`` (and optionally ``head.``) tensors.
    """
    from .checkpoint import load_checkpoint, load_into_module
    from .events import SensorGeometry
    from .train import TrainConfig, make_model

    config = load_checkpoint(path, sections=set()).config
    cfg = TrainConfig.from_dict(config["train"])
    H, W, _ = config["grid"]["extent"]
    model, head = make_model(cfg, SensorGeometry(W, H))
    names = {"f3." + k for k in model.state_dict()}
    if with_head:
        names |= {"head." + k for k in head.state_dict()}
    sections = load_checkpoint(path, sections=names).sections
    load_into_module(model, {k: v for k, v in sections.items() if k.startswith("f3.")}, "f3.")
    if with_head:
        load_into_module(head, {k: v for k, v in sections.items() if k.startswith("head.")}, "head.")
    return model, (head if with_head else None), cfg


def load_flow(path):
    from .checkpoint import load_checkpoint, load_into_module
    from .flow import FlowNet, FlowTrainConfig

    ckpt = load_checkpoint(path)
    fcfg = FlowTrainConfig.from_dict(ckpt.config["flow"])
    net = FlowNet(ckpt.config["channels"], expansion=fcfg.expansion, grn=fcfg.grn, seed=fcfg.seed)
    load_into_module(net, ckpt.sections, "flow.")
    return net, fcfg, ckpt.config


# -- subcommands -----------------------------------------------------------


def cmd_synth_gen(args) -> int:
    from .events import write_events
    from .synth import SceneSpec, generate_events, translating_texture

    if args.scene:
        scene = SceneSpec.from_json(Path(args.scene).read_text())
    else:
        allowed = ("width", "height", "duration_us", "velocity", "mu", "density", "sizes",
                   "noise_fraction", "bin_us")
        kw = strict_kwargs(load_json(args.config), allowed, "texture") if args.config else {}
        kw = {"width": 64, "height": 64, "duration_us": 400_000, "velocity": (0.25, 0.0), "mu": 0.5,
              "noise_fraction": 0.1, **kw}
        scene = translating_texture(seed=args.seed, **kw)
    stream = generate_events(scene, args.seed)
    out_file = Path(args.events_out)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    write_events(out_file, stream)
    (Path(args.out) / "scene.json").parent.mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "scene.json").write_text(scene.to_json())
    return emit(Path(args.out), "synth-gen", len(stream) > 0,
                {"events": len(stream), "file": out_file, "surfaces": len(scene.surfaces),
                 "geometry": [scene.height, scene.width]})


def cmd_featurize(args) -> int:
    from .events import read_events, window
    from .field import featurize, pca_project, write_field, write_tensor
    from .train import TrainConfig, make_model

    stream = read_events(args.events)
    if args.checkpoint:
        model, _, cfg = load_f3(args.checkpoint)
    else:
        cfg = TrainConfig.from_dict(load_json(args.config)) if args.config else TrainConfig(dt_us=args.dt, bin_us=args.bin_us)
        model, _ = make_model(cfg, stream.geometry)
    t_ref = args.t_ref if args.t_ref is not None else min(stream.duration_us, cfg.dt_us)
    ff = featurize(window(stream, t_ref, cfg.dt_us, "past", cfg.bin_us), model)
    out_file = Path(args.field_out)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    write_field(out_file, ff)
    payload = {"file": out_file, "shape": list(ff.data.shape), "t_ref": t_ref,
               "finite": bool(np.isfinite(ff.data).all())}
    if args.pca:
        pca_file = out_file.with_suffix(".pca.f3ff")
        write_tensor(pca_file, pca_project(ff, args.pca))
        payload["pca_file"] = pca_file
    return emit(Path(args.out), "featurize", payload["finite"], payload)


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .events import read_events
    from .train import TrainConfig, to_checkpoint, train_f3

    stream = read_events(args.events)
    cfg = TrainConfig.from_dict(load_json(args.config)) if args.config else TrainConfig()
    cfg.seed, cfg.deterministic = args.seed, args.deterministic or cfg.deterministic
    res = train_f3(stream, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "f3.f3ck", to_checkpoint(res.model, res.head, cfg))
    np.savetxt(out / "losses.csv", np.array(res.losses), header="focal_loss", comments="")
    ok = bool(np.isfinite(res.losses).all())
    return emit(out, "train", ok, {"checkpoint": out / "f3.f3ck", "steps": cfg.steps,
                                   "first_loss": res.losses[0] if res.losses else None,
                                   "last_loss": res.losses[-1] if res.losses else None,
                                   "seconds": res.seconds})


def cmd_flow_train(args) -> int:
    from .checkpoint import Checkpoint, module_sections, save_checkpoint
    from .events import read_events
    from .flow import FlowTrainConfig, tensor_digest, train_flow

    stream = read_events(args.events)
    model, _, tcfg = load_f3(args.checkpoint, with_head=False)
    fcfg = FlowTrainConfig.from_dict(load_json(args.config)) if args.config else FlowTrainConfig()
    fcfg.seed = args.seed
    before = tensor_digest(model)
    res = train_flow(stream, model, fcfg, tcfg.dt_us, tcfg.bin_us)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"flow": dataclasses.asdict(fcfg), "channels": model.smoother_config.channels,
              "dt_us": tcfg.dt_us, "bin_us": tcfg.bin_us}
    save_checkpoint(out / "flow.f3ck", Checkpoint(config, module_sections(res.net, "flow.")))
    frozen = tensor_digest(model) == before
    return emit(out, "flow-train", frozen and bool(np.isfinite(res.losses).all()),
                {"checkpoint": out / "flow.f3ck", "f3_frozen": frozen, "f3_digest": before,
                 "last_loss": res.losses[-1] if res.losses else None, "seconds": res.seconds})


def cmd_flow_eval(args) -> int:
    from .events import discretize, read_events, window
    from .field import featurize
    from .flow import flow_metrics, predict_flow
    from .synth import read_flow, uniform_flow

    stream = read_events(args.events)
    H, W = stream.geometry.shape
    if args.pred:
        model = net = None
        dt_us, bin_us = args.dt_us, args.bin_us
    else:
        if not (args.checkpoint and args.flow_checkpoint):
            raise ConfigError("flow-eval needs --pred or both --checkpoint and --flow-checkpoint")
        model, _, tcfg = load_f3(args.checkpoint, with_head=False)
        net, _, _ = load_flow(args.flow_checkpoint)
        dt_us, bin_us = tcfg.dt_us, tcfg.bin_us
    if args.gt:
        gt = read_flow(args.gt)
    elif args.velocity:
        gt = uniform_flow(tuple(args.velocity), dt_us, H, W)
    else:
        raise ConfigError("flow-eval needs --gt or --velocity")
    t_refs = args.t_ref or [stream.duration_us - dt_us]
    rows = []
    for t in t_refs:
        win = window(stream, int(t), dt_us, "past", bin_us)
        em = None
        if args.on_events:
            d = discretize(win)
            em = np.zeros((H, W), dtype=bool)
            em[d.y, d.x] = True
        pred = read_flow(args.pred) if args.pred else predict_flow(featurize(win, model), net)
        rows.append(flow_metrics(pred, gt, event_mask=em).as_dict())
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("aee", "three_pe", "aae")}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "flow_metrics.csv", "w") as fh:
        fh.write("t_ref,aee,three_pe,aae,n_pixels\n")
        for t, r in zip(t_refs, rows):
            fh.write(f"{t},{r['aee']!r},{r['three_pe']!r},{r['aae']!r},{r['n_pixels']}\n")
    ok = all(np.isfinite(v) for v in mean.values())
    return emit(out, "flow-eval", ok, {"mean": mean, "windows": rows, "on_events": args.on_events})


def _read_disparity(path):
    from .field import MODE_DISPARITY, read_tensor

    data, mode = read_tensor(path)
    if mode == MODE_DISPARITY:
        return data[0].astype(np.float64), data[1] > 0.5
    return data[0].astype(np.float64), np.isfinite(data[0]) & (data[0] > 0)


def cmd_depth_eval(args) -> int:
    from .depth import depth_metrics, silog_loss

    pred, pvalid = _read_disparity(args.pred)
    gt, gvalid = _read_disparity(args.gt)
    mask = pvalid & gvalid
    m = depth_metrics(pred, gt, mask, args.max_depth, args.mode)
    payload = {"metrics": m.as_dict(), "silog": float(silog_loss(pred, gt, mask))}
    return emit(Path(args.out), "depth-eval", m.n_pixels > 0, payload)


def cmd_stereo(args) -> int:
    from .depth import block_match_stereo
    from .field import MODE_DISPARITY, read_tensor, write_tensor

    left, _ = read_tensor(args.left)
    right, _ = read_tensor(args.right)
    dm = block_match_stereo(left, right, args.max_disp, args.block)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "disparity.f3ff", np.stack([dm.d, dm.valid.astype(np.float64)]), MODE_DISPARITY)
    return emit(out, "stereo", True, {"file": out / "disparity.f3ff", "valid_fraction": float(dm.valid.mean()),
                                      "median_disparity": float(np.median(dm.d[dm.valid])) if dm.valid.any() else None})


def cmd_theory(args) -> int:
    from . import theory

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = theory.verify_theorem1(args.trials, args.m, args.lam, seed=args.seed)
    theory.write_reports_csv(out / "theorem1_constants.csv", reports)
    donoho = theory.donoho_trials(args.donoho_trials, args.m, args.lam, seed=args.seed)
    n_el = theory.BasisLibrary.standard(args.m).n_elements
    floor = theory.binomial_floor(1 - np.e / n_el, args.donoho_trials)
    dominated = all(r.joint_objective <= r.two_step_objective for r in reports)
    payload = {
        "trials": args.trials, "dominance_all_trials": dominated,
        "basis_recovery": float(np.mean([r.basis_selected == "haar" for r in reports])),
        "c1_median": float(np.nanmedian([r.c1_hat for r in reports])),
        "c2_median": float(np.nanmedian([r.c2_hat for r in reports])),
        "donoho_fraction": float(donoho.mean()), "donoho_floor": floor,
        "csv": out / "theorem1_constants.csv",
    }
    return emit(out, "theory", dominated and donoho.mean() >= floor, payload)


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .events import read_events

    stream = None if args.events == "synthetic" else read_events(args.events)
    rep = run_bench(args.count, args.height, args.width, args.dt, repeats=args.repeats, seed=args.seed,
                    stream=stream)
    return emit(Path(args.out), "bench", True, {"report": rep.as_dict()})


def cmd_accept(args) -> int:
    from .acceptance import SuiteContext, run_suite, summary

    if args.suite != "primary":
        raise ConfigError(f"unknown suite {args.suite!r}")
    only = [int(x) for x in args.only.split(",")] if args.only else None
    out = Path(args.out)
    ctx = SuiteContext(out_dir=out, seed=args.seed)
    results = run_suite(only, ctx, echo=lambda line: print(line, file=sys.stderr, flush=True))
    s = summary(results)
    return emit(out, "accept", s["passed"], {"suite": s["suite"], "suite_version": s["version"],
                                             "criteria": s["criteria"]})


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="f3_out", help="artifact directory (summary.json goes here)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--threads", type=int, default=None, help="defaults to $F3_THREADS")

    p = argparse.ArgumentParser(prog="f3", description="Fast feature fields from event streams.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic event file")
    s.add_argument("--scene", help="scene JSON; a translating texture is built otherwise")
    s.add_argument("--config", help="translating-texture parameters (JSON)")
    s.add_argument("--events-out", default="events.f3ev")
    s.set_defaults(fn=cmd_synth_gen)

    s = sub.add_parser("featurize", parents=[common], help="write the feature field of one window")
    s.add_argument("--events", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--config", help="training config used for an untrained model")
    s.add_argument("--dt", "--dt-us", dest="dt", type=int, default=20000)
    s.add_argument("--bin-us", type=int, default=1000)
    s.add_argument("--t-ref", "--t-ref-us", dest="t_ref", type=int)
    s.add_argument("--pca", type=int, default=0)
    s.add_argument("--field-out", default="field.f3ff")
    s.set_defaults(fn=cmd_featurize)

    s = sub.add_parser("train", parents=[common], help="train the feature field")
    s.add_argument("--events", required=True)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("flow-train", parents=[common], help="train the flow net on a frozen field")
    s.add_argument("--events", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_flow_train)

    s = sub.add_parser("flow-eval", parents=[common], help="evaluate predicted flow")
    s.add_argument("--events", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--flow-checkpoint")
    s.add_argument("--pred", help="F3FL predicted flow file (skips the networks)")
    s.add_argument("--dt-us", type=int, default=20000, help="window length when --pred is given")
    s.add_argument("--bin-us", type=int, default=1000)
    s.add_argument("--on-events", action="store_true", help="evaluate only on pixels with events")
    s.add_argument("--gt", help="F3FL ground-truth flow file")
    s.add_argument("--velocity", type=float, nargs=2, help="uniform velocity in px/ms")
    s.add_argument("--t-ref", "--t-ref-us", dest="t_ref", type=int, nargs="*")
    s.set_defaults(fn=cmd_flow_eval)

    s = sub.add_parser("depth-eval", parents=[common], help="disparity/depth metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--max-depth", type=float, default=80.0)
    s.add_argument("--mode", choices=("depth", "disparity"), default="disparity")
    s.set_defaults(fn=cmd_depth_eval)

    s = sub.add_parser("stereo", parents=[common], help="block matching on two fields")
    s.add_argument("--left", required=True)
    s.add_argument("--right", required=True)
    s.add_argument("--max-disp", type=int, required=True)
    s.add_argument("--block", type=int, default=9)
    s.set_defaults(fn=cmd_stereo)

    s = sub.add_parser("theory", parents=[common], help="Monte-Carlo oracle-inequality probes")
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--donoho-trials", type=int, default=1000)
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--lam", "--lambda", dest="lam", type=float, default=9.0)
    s.set_defaults(fn=cmd_theory)

    s = sub.add_parser("bench", parents=[common], help="featurization latency report")
    s.add_argument("--events", default="synthetic")
    s.add_argument("--count", type=int, default=200_000)
    s.add_argument("--height", type=int, default=720)
    s.add_argument("--width", type=int, default=1280)
    s.add_argument("--dt", type=int, default=20000)
    s.add_argument("--repeats", type=int, default=5)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("accept", parents=[common], help="run the acceptance suite")
    s.add_argument("--suite", default="primary")
    s.add_argument("--only", help="comma-separated criterion numbers")
    s.set_defaults(fn=cmd_accept)
    return p


def configure_runtime(args) -> None:
    threads = args.threads if args.threads is not None else int(os.environ.get("F3_THREADS", "0") or 0)
    if threads > 0:
        torch.set_num_threads(threads)
    torch.manual_seed(args.seed)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_runtime(args)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError, CheckpointError, EventFileError) as exc:
        print(f"f3 {args.command}: error: {exc}", file=sys.stderr)
        emit(Path(args.out), args.command, False, {"error": str(exc), "error_type": type(exc).__name__})
        return 2


if __name__ == "__main__":
    sys.exit(main())
