"""Command-line entry points for the offline safety pipeline.

Subcommands cover the whole workflow: gen-data (scripted demonstrations into
a dataset directory), calibrate (fit safety thresholds), annotate (attach
reward annotations), train (flow-matching pretraining or reward-weighted
fine-tuning, tactile or proprio), distill (freeze teacher chunks and train
the touch-free student), eval (closed-loop rollouts with metrics) and report
(dataset summary table).

Configuration defaults live in dataclasses; a JSON file passed via --config
overlays named sections onto them. Failures exit with 2 for configuration
problems, 3 for data or storage problems and 4 for numerical blow-ups. Set
SAFEGRASP_LOG=DEBUG (or any level name) for progress logging on stderr.
Timestamps appear only in run manifests, never in data artifacts, so equal
inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (CalibrationConfig, DistillConfig, RewardWeights,
                     TrainConfig, WeightingConfig, overlay)
from .data import dataset_samples, split_ids
from .distill import (distill_train, generate_teacher_targets,
                      init_student_from_teacher, policy_hash,
                      validation_fm_loss)
from .errors import ConfigError, SafegraspError
from .policy import FlowPolicy, PolicyDims, student_dims
from .rewards import annotate_episode, calibrate
from .sim import (DEMO_KINDS, SimConfig, evaluate_policy, gen_dataset,
                  quota_counts)
from .store import (DatasetStore, read_checkpoint, read_targets, write_checkpoint,
                    write_json, write_targets)
from .trainer import Trainer

log = logging.getLogger("safegrasp")

CONFIG_SECTIONS = {
    "calibration": CalibrationConfig,
    "reward": RewardWeights,
    "weighting": WeightingConfig,
    "train": TrainConfig,
    "distill": DistillConfig,
    "sim": SimConfig,
    "policy": PolicyDims,
}


def load_config(path) -> dict:
    """Parse a sectioned JSON overlay into plain per-section dicts."""
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object of sections")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(
            f"config {path} has unknown sections {sorted(unknown)}; known "
            f"sections are {sorted(CONFIG_SECTIONS)}")
    return doc


def section(cfg_doc: dict, name: str, base=None):
    base = CONFIG_SECTIONS[name]() if base is None else base
    return overlay(base, cfg_doc.get(name, {}))


def sim_config(cfg_doc: dict, task: str) -> SimConfig:
    return SimConfig.for_task(task, **cfg_doc.get("sim", {}))


def write_run_manifest(path, args, started: float, extra=None):
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "tool_version": __version__,
        "started_unix": round(started, 3),
        "finished_unix": round(time.time(), 3),
    }
    if extra:
        doc.update(extra)
    write_json(path, doc)


def _dataset_manifest_path(store: DatasetStore, command: str) -> Path:
    return store.root / "runs" / f"{command}.json"


# -- subcommand implementations -----------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg_doc = load_config(args.config)
    ratio = [float(x) for x in args.counts.split(",")]
    if len(ratio) != len(DEMO_KINDS):
        raise ConfigError(
            f"--counts needs {len(DEMO_KINDS)} comma-separated numbers for "
            f"{DEMO_KINDS}, got {args.counts!r}")
    cfg = sim_config(cfg_doc, args.task)
    counts = dict(zip(DEMO_KINDS, quota_counts(ratio, args.episodes)))
    store = DatasetStore(args.out, create=True)
    episodes = gen_dataset(cfg, counts, args.seed)
    for ep in episodes:
        store.add_episode(ep)
    store.set_generator_info({
        "task": args.task, "seed": args.seed, "counts": counts,
        "episodes": args.episodes,
        "sim": dataclasses.asdict(cfg),
    })
    by_kind = {k: sum(1 for e in episodes if e.kind == k) for k in DEMO_KINDS}
    flags = {
        "success": sum(e.success for e in episodes),
        "drop": sum(e.drop for e in episodes),
        "damage": sum(e.damage for e in episodes),
    }
    write_run_manifest(_dataset_manifest_path(store, "gen-data"), args, started,
                       {"counts": by_kind, "flags": flags})
    print(f"wrote {len(episodes)} episodes to {store.root}")
    for k in DEMO_KINDS:
        print(f"  {k}: {by_kind[k]}")
    print(f"  success={flags['success']} drop={flags['drop']} "
          f"damage={flags['damage']}")
    return 0


def cmd_calibrate(args) -> int:
    started = time.time()
    cfg_doc = load_config(args.config)
    store = DatasetStore(args.data)
    episodes = [store.load_episode(eid) for eid in store.episode_ids()]
    calib = calibrate(episodes, section(cfg_doc, "calibration"))
    weights = section(cfg_doc, "reward")
    calib_hash = store.set_calibration(calib, weights)
    write_run_manifest(_dataset_manifest_path(store, "calibrate"), args, started,
                       {"calibration_hash": calib_hash})
    print(f"calibrated {len(episodes)} episodes "
          f"(hash {calib_hash[:12]})")
    print(f"  norm_scale={calib.norm_scale:.4f} active={list(calib.active_sides)}")
    print(f"  force band [{calib.f_min:.4f}, {calib.f_max:.4f}] "
          f"peak<={calib.p_max:.4f} conc<={calib.c_max:.4f} "
          f"asym<={calib.delta:.4f}")
    return 0


def cmd_annotate(args) -> int:
    started = time.time()
    store = DatasetStore(args.data)
    calib, weights = store.load_calibration()
    calib_hash = store.calibration_hash()
    totals: dict = {}
    for eid in store.episode_ids():
        ep = store.load_episode(eid)
        ann = annotate_episode(ep, calib, weights)
        store.attach_annotation(eid, ann, calib_hash)
        totals.setdefault(ep.kind, []).append(ann.r_episode)
    write_run_manifest(_dataset_manifest_path(store, "annotate"), args, started)
    print(f"annotated {sum(len(v) for v in totals.values())} episodes")
    for kind in sorted(totals):
        vals = totals[kind]
        print(f"  {kind}: mean episode reward {np.mean(vals):+.4f} "
              f"over {len(vals)} episodes")
    return 0


def _policy_dims(arch: str, cfg_doc: dict) -> PolicyDims:
    base = section(cfg_doc, "policy")
    if arch == "tactile":
        return base
    if arch == "proprio":
        return student_dims(base)
    raise ConfigError(f"unknown architecture {arch!r}, expected tactile|proprio")


def cmd_train(args) -> int:
    started = time.time()
    cfg_doc = load_config(args.config)
    train_cfg = section(cfg_doc, "train")
    updates = {"seed": args.seed}
    if args.steps is not None:
        updates["steps"] = args.steps
    train_cfg = overlay(train_cfg, updates)
    weight_cfg = section(cfg_doc, "weighting")
    store = DatasetStore(args.data)
    dims = _policy_dims(args.arch, cfg_doc)
    samples = dataset_samples(store, dims, stride=train_cfg.sample_stride)
    log.info("train: %d samples from %s", len(samples), store.root)
    if args.init:
        policy, _ = read_checkpoint(args.init)
        if policy.dims != dims:
            raise ConfigError(
                f"--init checkpoint architecture does not match --arch {args.arch}")
        theta0 = policy.copy()
        policy = policy.copy()
    else:
        policy = FlowPolicy.initialize(dims, args.seed)
        theta0 = policy.copy()
    weighted = args.mode == "sa-rwfm"
    trainer = Trainer(policy, samples, train_cfg, weight_cfg,
                      weighted=weighted, theta0=theta0 if weighted else None)
    out = Path(args.out)
    diag = trainer.run(train_cfg.steps, log_path=out.with_suffix(".log"))
    meta = {
        "mode": args.mode, "arch": args.arch, "steps": train_cfg.steps,
        "seed": args.seed, "dataset_hash": store.dataset_hash(),
        "init": str(args.init) if args.init else None,
        "final_loss": diag.loss_total if diag else None,
    }
    write_checkpoint(out, policy, meta)
    write_run_manifest(out.parent / f"{out.stem}.run.json", args, started, meta)
    tail = f"; final loss {diag.loss_total:.6f}" if diag else ""
    print(f"trained {args.mode}/{args.arch} for {train_cfg.steps} steps{tail}")
    print(f"checkpoint written to {out}")
    return 0


def cmd_distill(args) -> int:
    started = time.time()
    cfg_doc = load_config(args.config)
    dcfg = section(cfg_doc, "distill")
    updates = {"root_seed": args.seed}
    if args.alpha is not None:
        updates["blend_alpha"] = args.alpha
    dcfg = overlay(dcfg, updates)
    train_cfg = section(cfg_doc, "train")
    updates = {"seed": args.seed}
    if args.steps is not None:
        updates["steps"] = args.steps
    train_cfg = overlay(train_cfg, updates)
    store = DatasetStore(args.data)
    teacher, _ = read_checkpoint(args.teacher)
    if not teacher.dims.tactile:
        raise ConfigError("distillation teacher must be tactile-conditioned")
    dataset_hash = store.dataset_hash()

    train_ids, val_ids = split_ids(store.episode_ids(),
                                   dcfg.validation_fraction,
                                   dcfg.validation_seed)
    train_samples = dataset_samples(store, teacher.dims,
                                    stride=train_cfg.sample_stride,
                                    episode_ids=train_ids)
    val_samples = dataset_samples(store, teacher.dims,
                                  stride=train_cfg.sample_stride,
                                  episode_ids=val_ids)
    log.info("distill: %d train / %d validation samples",
             len(train_samples), len(val_samples))

    teacher_hash = policy_hash(teacher)
    targets_path = store.root / "targets" / f"{teacher_hash[:16]}.tgt"
    if targets_path.exists():
        target_set = read_targets(targets_path)
        log.info("reusing frozen teacher targets at %s", targets_path)
    else:
        target_set = generate_teacher_targets(teacher, train_samples, dcfg,
                                              dataset_hash)
        write_targets(targets_path, target_set)
        log.info("froze %d teacher chunks to %s", target_set.n, targets_path)

    student = init_student_from_teacher(teacher)
    trainer = distill_train(student, train_samples, target_set, dataset_hash,
                            dcfg, train_cfg, section(cfg_doc, "weighting"))
    out = Path(args.out)
    diag = trainer.run(train_cfg.steps, log_path=out.with_suffix(".log"))
    # blend alpha plays no role in validation: the held-out loss is always
    # against pure ground-truth chunks
    val_loss = validation_fm_loss(student, val_samples, dcfg.validation_seed)
    meta = {
        "teacher": str(args.teacher), "teacher_hash": teacher_hash,
        "dataset_hash": dataset_hash, "blend_alpha": dcfg.blend_alpha,
        "steps": train_cfg.steps, "seed": args.seed,
        "final_loss": diag.loss_total if diag else None,
        "validation_loss": val_loss,
        "validation_episodes": val_ids,
    }
    write_checkpoint(out, student, meta)
    write_run_manifest(out.parent / f"{out.stem}.run.json", args, started, meta)
    print(f"distilled student for {train_cfg.steps} steps at blend "
          f"alpha {dcfg.blend_alpha}")
    print(f"  validation loss {val_loss:.6f} over {len(val_samples)} held-out "
          f"samples")
    print(f"checkpoint written to {out}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    cfg_doc = load_config(args.config)
    policy, ckpt_meta = read_checkpoint(args.ckpt)
    calib = weights = None
    if args.data:
        calib, weights = DatasetStore(args.data).load_calibration()
    elif policy.dims.tactile:
        raise ConfigError(
            "evaluating a tactile policy needs --data for its calibration")
    cfg = sim_config(cfg_doc, args.task)
    metrics = evaluate_policy(policy, cfg, args.episodes, args.seed,
                              calib=calib, reward_weights=weights,
                              horizon=args.horizon)
    doc = {
        "checkpoint": str(args.ckpt),
        "checkpoint_meta": ckpt_meta,
        "task": args.task,
        "episodes": args.episodes,
        "seed": args.seed,
        "horizon": args.horizon,
        "metrics": metrics,
    }
    out = Path(args.out)
    write_json(out, doc)
    columns = ["success_rate", "damage_rate", "drop_rate",
               "mean_peak_force", "mean_episode_reward"]
    tsv = out.with_name(f"{out.stem}_table.tsv")
    with open(tsv, "w") as f:
        f.write("checkpoint\ttask\tepisodes\t" + "\t".join(columns) + "\n")
        cells = [Path(args.ckpt).stem, args.task, str(args.episodes)]
        cells += ["" if metrics[c] is None else f"{metrics[c]:.6f}"
                  for c in columns]
        f.write("\t".join(cells) + "\n")
    write_run_manifest(out.parent / f"{out.stem}.run.json", args, started)
    print(f"evaluated {args.episodes} episodes on task {args.task!r}")
    for c in columns:
        v = metrics[c]
        print(f"  {c}: " + ("n/a" if v is None else f"{v:.4f}"))
    print(f"metrics written to {out}")
    return 0


def cmd_report(args) -> int:
    store = DatasetStore(args.data)
    manifest = store.manifest()
    rows: dict = {}
    for eid in store.episode_ids():
        ep = store.load_episode(eid)
        row = rows.setdefault(ep.kind, {"n": 0, "success": 0, "drop": 0,
                                        "damage": 0, "rewards": []})
        row["n"] += 1
        row["success"] += int(ep.success)
        row["drop"] += int(ep.drop)
        row["damage"] += int(ep.damage)
        try:
            row["rewards"].append(store.load_annotation(eid).r_episode)
        except SafegraspError:
            pass
    header = ["kind", "episodes", "success_rate", "drop_rate", "damage_rate",
              "mean_episode_reward"]
    lines = ["\t".join(header)]
    for kind in sorted(rows):
        r = rows[kind]
        mean_r = f"{np.mean(r['rewards']):.6f}" if r["rewards"] else ""
        lines.append("\t".join([
            kind, str(r["n"]), f"{r['success'] / r['n']:.6f}",
            f"{r['drop'] / r['n']:.6f}", f"{r['damage'] / r['n']:.6f}", mean_r]))
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
        print(f"report written to {args.out}")
    print(f"dataset {store.root}: {len(manifest['episodes'])} episodes, "
          f"calibration "
          f"{'present' if manifest['calibration_hash'] else 'absent'}")
    sys.stdout.write(table)
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safegrasp",
        description="offline tactile-safety pipeline: demonstrations, reward "
                    "annotation, flow-policy training and touch-free "
                    "distillation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None,
                       help="JSON file with config section overrides")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate scripted demonstrations")
    add_common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--task", default="fragile")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--counts", default="70,20,10",
                   help="clean,over_force,weak_grip mixture ratio")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("calibrate", help="fit safety thresholds from a dataset")
    add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("annotate", help="attach reward annotations")
    add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_annotate)

    p = sub.add_parser("train", help="train a flow policy")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mode", choices=["plain-fm", "sa-rwfm"], default="sa-rwfm")
    p.add_argument("--arch", choices=["tactile", "proprio"], default="tactile")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--init", default=None,
                   help="checkpoint to start from (and anchor to, in sa-rwfm)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="distill a tactile teacher into a "
                                       "proprio student")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True, help="student checkpoint path")
    p.add_argument("--alpha", type=float, default=None,
                   help="teacher weight in the blended regression target "
                        "(default 0.5)")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--task", default="fragile")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--horizon", type=int, default=5,
                   help="steps executed per sampled chunk before replanning")
    p.add_argument("--data", default=None,
                   help="dataset whose calibration normalizes tactile input")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="summarize a dataset")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="optional TSV path")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SAFEGRASP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SafegraspError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
