"""Command-line entrypoint: world/dataset creation, training, evaluation,
ablations, one-shot generation, and serving.

Exit codes: 0 success, 2 validation failure, 3 I/O failure, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .errors import NumericError, SpecValidationError
from .metrics import SweepProtocol, evaluate_checkpoint
from .training import TrainConfig, model_config_for, train
from .world import WorldSpec, build_world, generate_dataset, load_dataset

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config_snapshot: dict,
                    artifacts: dict, hashes: dict, timings: dict) -> Path:
    manifest = {
        "command": command,
        "config": config_snapshot,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "hashes": hashes,
        "timings_seconds": timings,
    }
    path = out_dir / f"{command.replace(' ', '_')}.manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig(world_spec=WorldSpec(), model_kwargs={}, train=TrainConfig(), io={})


def _resolve(args, cfg: RunConfig, attr: str, io_key: str, required: bool = True):
    value = getattr(args, attr, None) or cfg.io.get(io_key)
    if required and not value:
        raise SpecValidationError(f"missing --{attr.replace('_', '-')} (or io.{io_key} in config)")
    return value


def cmd_world_init(args) -> int:
    cfg = _load_config(args)
    spec = cfg.world_spec
    overrides = {}
    for name in ("world_seed", "n_attributes", "latent_dim", "n_prompt_classes",
                 "identity_dim", "obs_noise_sigma"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        if "n_attributes" in overrides:
            overrides.setdefault("attr_correlation", None)
        spec = replace(spec, **overrides)
    spec.validate()
    build_world(spec)  # materialization errors surface before writing
    spec.save(args.out)
    print(f"world spec written to {args.out} (hash {spec.hash():#018x})")
    return EXIT_OK


def cmd_data_gen(args) -> int:
    spec = WorldSpec.load(args.world)
    world = build_world(spec)
    t0 = time.perf_counter()
    generate_dataset(world, args.count, args.out, rng_seed=args.seed,
                     obs_noise_sigma=args.sigma)
    print(f"wrote {args.count} records to {args.out} "
          f"({time.perf_counter() - t0:.1f}s, sha256 {_sha256(args.out)[:16]}...)")
    return EXIT_OK


def _train_once(world, dataset, cfg: RunConfig, train_cfg: TrainConfig, out_dir: Path,
                run_name: str):
    model_cfg = model_config_for(world, train_cfg, **cfg.model_kwargs)
    return train(world, dataset, model_cfg, train_cfg, out_dir, run_name=run_name)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    world_path = _resolve(args, cfg, "world", "world")
    data_path = _resolve(args, cfg, "data", "dataset")
    out_dir = Path(_resolve(args, cfg, "out_dir", "out_dir"))
    run_name = args.run_name or cfg.io.get("run_name", "run")

    spec = WorldSpec.load(world_path)
    world = build_world(spec)
    dataset = load_dataset(data_path, expected_spec=spec)
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = replace(train_cfg, total_steps=args.steps)
    if args.batch_size is not None:
        train_cfg = replace(train_cfg, batch_size=args.batch_size)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed, init_seed=args.seed)

    result = _train_once(world, dataset, cfg, train_cfg, out_dir, run_name)
    _write_manifest(
        out_dir, "train",
        {"train": train_cfg.to_dict(), "model": result.model_cfg.to_dict(),
         "world_spec_hash": spec.hash()},
        {"checkpoint": result.checkpoint_path, "metrics": result.metrics_path,
         "world": world_path, "dataset": data_path},
        {"checkpoint_sha256": _sha256(result.checkpoint_path),
         "dataset_sha256": _sha256(data_path)},
        {"train": result.wall_seconds},
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"final losses: total={result.final_losses.total:.6f} "
          f"diffusion={result.final_losses.diffusion:.6f} "
          f"disentanglement={result.final_losses.disentanglement:.6f} "
          f"structure={result.final_losses.structure:.6f}")
    return EXIT_OK


def _protocol_from_args(args) -> SweepProtocol:
    values = tuple(np.linspace(0.0, 1.0, args.values))
    return SweepProtocol(n_prompts=args.prompts, values=values, baseline=args.baseline,
                         seed_base=args.seed_base, sampler_steps=args.sampler_steps)


def cmd_eval(args) -> int:
    spec = WorldSpec.load(args.world)
    world = build_world(spec)
    protocol = _protocol_from_args(args)
    t0 = time.perf_counter()
    rep, _ = evaluate_checkpoint(args.checkpoint, world, protocol,
                                 delta=args.delta, epsilon=args.epsilon)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".report.json")
    rep.save(out)
    print(rep.to_text())
    _write_manifest(
        out.parent, "eval",
        {"protocol": protocol.to_dict(), "delta": args.delta, "epsilon": args.epsilon},
        {"checkpoint": args.checkpoint, "report": out, "world": args.world},
        {"checkpoint_sha256": _sha256(args.checkpoint), "report_sha256": _sha256(out)},
        {"eval": time.perf_counter() - t0},
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    from .service import GenerateRequest, InferenceEngine

    engine = InferenceEngine.from_files(args.checkpoint, args.world)
    sliders = [float(x) for x in args.sliders.split(",")]
    resp = engine.generate(GenerateRequest(
        prompt_class=args.prompt_class, sliders=sliders, seed=args.seed, steps=args.steps))
    out = Path(args.out)
    out.write_text(resp["render"] + "\n")
    print(json.dumps({
        "measured_attributes": resp["measured_attributes"],
        "identity": resp["identity"],
        "model_step": resp["model_step"],
        "svg": str(out),
    }))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve

    addr = os.environ.get("SLIDERGEN_ADDR", args.addr)
    host, _, port = addr.partition(":")
    max_batch = int(os.environ.get("SLIDERGEN_MAX_BATCH", args.max_batch))
    serve(args.checkpoint, args.world, host=host or "127.0.0.1",
          port=int(port or 8123), max_batch=max_batch,
          cors_origins=args.cors_origin or None)
    return EXIT_OK


ABLATION_ROWS = (
    ("diff", {"loss_disentangle": False, "loss_structure": False}),
    ("diff+clss", {"loss_structure": False}),
    ("full", {}),
)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    world_path = _resolve(args, cfg, "world", "world")
    data_path = _resolve(args, cfg, "data", "dataset")
    out_dir = Path(_resolve(args, cfg, "out_dir", "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)

    spec = WorldSpec.load(world_path)
    world = build_world(spec)
    dataset = load_dataset(data_path, expected_spec=spec)
    base = cfg.train
    if args.steps is not None:
        base = replace(base, total_steps=args.steps)
    protocol = _protocol_from_args(args)

    timings = {}
    rows = []
    for name, flags in ABLATION_ROWS:
        t0 = time.perf_counter()
        run_cfg = replace(base, **flags)
        result = _train_once(world, dataset, cfg, run_cfg, out_dir / name, run_name=name)
        rep, _ = evaluate_checkpoint(result.checkpoint_path, world, protocol,
                                     delta=args.delta, epsilon=args.epsilon)
        rep.save(out_dir / name / "report.json")
        rows.append({"row": name, "continuity": rep.continuity, "consistency": rep.consistency,
                     "scope": rep.scope, "entanglement": rep.entanglement,
                     "checkpoint": str(result.checkpoint_path)})
        timings[name] = time.perf_counter() - t0

    lines = [f"{'losses':<12}{'Cont.%':>9}{'Cons.%':>9}{'Scope%':>9}{'Entang.%':>10}"]
    lines.append("-" * len(lines[0]))
    for row in rows:
        lines.append(f"{row['row']:<12}{row['continuity']:>9.2f}{row['consistency']:>9.2f}"
                     f"{row['scope']:>9.2f}{row['entanglement']:>10.2f}")
    table = "\n".join(lines)

    threshold_rows = []
    if args.thresholds:
        taus = [float(x) for x in args.thresholds.split(",")]
        tlines = [f"{'threshold':<12}{'Cont.%':>9}{'Cons.%':>9}{'Scope%':>9}"]
        tlines.append("-" * len(tlines[0]))
        for tau in taus:
            t0 = time.perf_counter()
            run_cfg = replace(base, structure_threshold=tau)
            run_name = f"tau{tau:g}"
            result = _train_once(world, dataset, cfg, run_cfg, out_dir / run_name, run_name)
            rep, _ = evaluate_checkpoint(result.checkpoint_path, world, protocol,
                                         delta=args.delta, epsilon=args.epsilon)
            rep.save(out_dir / run_name / "report.json")
            threshold_rows.append({"threshold": tau, "continuity": rep.continuity,
                                   "consistency": rep.consistency, "scope": rep.scope,
                                   "checkpoint": str(result.checkpoint_path)})
            tlines.append(f"{tau:<12g}{rep.continuity:>9.2f}{rep.consistency:>9.2f}"
                          f"{rep.scope:>9.2f}")
            timings[run_name] = time.perf_counter() - t0
        table += "\n\n" + "\n".join(tlines)

    (out_dir / "ablation_table.txt").write_text(table + "\n")
    (out_dir / "ablation_report.json").write_text(json.dumps(
        {"rows": rows, "threshold_rows": threshold_rows, "protocol": protocol.to_dict()},
        sort_keys=True, indent=2) + "\n")
    print(table)
    _write_manifest(
        out_dir, "ablate",
        {"train": base.to_dict(), "protocol": protocol.to_dict()},
        {"table": out_dir / "ablation_table.txt", "report": out_dir / "ablation_report.json"},
        {row["row"]: _sha256(row["checkpoint"]) for row in rows},
        timings,
    )
    return EXIT_OK


def _add_eval_args(sub, prompts_default: int):
    sub.add_argument("--prompts", type=int, default=prompts_default)
    sub.add_argument("--values", type=int, default=5, help="grid size, evenly spaced in [0,1]")
    sub.add_argument("--baseline", type=float, default=0.5)
    sub.add_argument("--delta", type=float, default=0.1, help="identity consistency threshold")
    sub.add_argument("--epsilon", type=float, default=0.1, help="entanglement tolerance")
    sub.add_argument("--seed-base", type=int, default=0)
    sub.add_argument("--sampler-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slidergen")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("world-init", help="write a world spec file")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--world-seed", type=int, dest="world_seed")
    p.add_argument("--n-attributes", type=int, dest="n_attributes")
    p.add_argument("--latent-dim", type=int, dest="latent_dim")
    p.add_argument("--prompt-classes", type=int, dest="n_prompt_classes")
    p.add_argument("--identity-dim", type=int, dest="identity_dim")
    p.add_argument("--obs-noise-sigma", type=float, dest="obs_noise_sigma")
    p.set_defaults(func=cmd_world_init)

    p = sub.add_parser("data-gen", help="sample a training dataset")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=50000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=None)
    p.set_defaults(func=cmd_data_gen)

    p = sub.add_parser("train", help="train a checkpoint")
    p.add_argument("--config")
    p.add_argument("--world")
    p.add_argument("--data")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--run-name", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the sweep protocol and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--out")
    _add_eval_args(p, prompts_default=50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="one-shot generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--sliders", required=True, help="comma-separated values in [0,1]")
    p.add_argument("--prompt-class", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default="generated.svg")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("serve", help="run the inference service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--addr", default="127.0.0.1:8123")
    p.add_argument("--max-batch", type=int, default=64)
    p.add_argument("--cors-origin", action="append")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ablate", help="loss-ablation rows and threshold sweep")
    p.add_argument("--config")
    p.add_argument("--world")
    p.add_argument("--data")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--thresholds", default=None, help="comma-separated taus, e.g. 0.5,0.1")
    _add_eval_args(p, prompts_default=20)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SpecValidationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
