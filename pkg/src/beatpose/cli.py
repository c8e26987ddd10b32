"""Command line entry point: ``beatpose {ingest,dataset,train,rollout,eval,gradcheck}``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from .beatmap import BeatmapError, BeatmapValidationError, load_beatmap
from .config import ConfigError, PipelineConfig, load_config, parse_override
from .context import (
    ContextConfig, build_dataset, build_training_window,
    layout_from_manifest, load_trace_file, read_dataset, read_manifest, select_style_references,
    sha256_file, stack_examples, stage_rng,
)
from .estimator import StylePosePredictor
from .evaluation import emit_report, score_hits, style_distance
from .model import ModelConfig, gradient_check, init_params, load_checkpoint, scheduled_lr
from .pose import write_pose_trace
from .rollout import ModelPredictor, RolloutConfig, rollout
from .synthetic import PlayerStyle, play_beatmap, random_beatmap

GRADCHECK_THRESHOLD = 1e-4


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _config(args) -> PipelineConfig:
    overrides = [parse_override(s) for s in args.set or []]
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_ingest(args, cfg, out: Path) -> int:
    files = []
    for p in args.paths:
        entry = {"path": str(p), "sha256": None, "ok": False, "violations": []}
        try:
            entry["sha256"] = sha256_file(p)
            bm = load_beatmap(p)
            entry.update(ok=True, notes=len(bm.notes), bombs=len(bm.bombs),
                         obstacles=len(bm.obstacles), song_length=bm.song_length)
        except BeatmapValidationError as exc:
            entry["violations"] = [v._asdict() for v in exc.violations]
        except (BeatmapError, OSError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        files.append(entry)
    summary = {"files": files, "n_files": len(files), "n_invalid": sum(not f["ok"] for f in files)}
    _write_json(out / "ingest_summary.json", summary)
    print(json.dumps({"n_files": summary["n_files"], "n_invalid": summary["n_invalid"]}, sort_keys=True))
    return 0 if summary["n_invalid"] == 0 else 1


def cmd_dataset(args, cfg, out: Path) -> int:
    pairs = read_manifest(args.manifest)
    data_path = out / "dataset.bin"
    manifest_path = out / "dataset.manifest.json"
    result = build_dataset(pairs, cfg.context_config, cfg.context.stride, cfg.seed, data_path,
                           manifest_path, cfg.geometry, threads=args.threads)
    doc = dict(result.manifest)
    doc["config"] = cfg.to_dict()
    doc["source_manifest_sha256"] = sha256_file(args.manifest)
    _write_json(manifest_path, doc)
    print(json.dumps({"examples": result.n_examples, "dataset": str(data_path)}))
    return 0


def _load_dataset(path: Path, manifest_path: Path | None):
    manifest_path = manifest_path or path.with_suffix(".manifest.json")
    manifest = json.loads(manifest_path.read_text())
    data = read_dataset(path, layout_from_manifest(manifest))
    if len(data["history"]) == 0:
        raise ValueError(f"{path} holds no examples")
    return manifest, data


def cmd_train(args, cfg, out: Path) -> int:
    manifest, data = _load_dataset(Path(args.dataset), Path(args.manifest) if args.manifest else None)
    t = cfg.train
    est = StylePosePredictor(d_z=cfg.model.d_z, width=cfg.model.width, lr=t.lr, momentum=t.momentum,
                             lambda_match=t.lambda_match, batch_size=t.batch_size, n_steps=t.steps,
                             lr_schedule=t.schedule, random_state=cfg.seed)
    est.fit(data)
    ckpt = out / "checkpoint.bpck"
    est.save(ckpt)
    history = out / "loss_history.csv"
    with open(history, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lr", "recon", "match", "total"])
        for step, lb in enumerate(est.loss_history_):
            w.writerow([step, repr(scheduled_lr(t.lr, step, t.steps, t.schedule)),
                        repr(lb.recon), repr(lb.match), repr(lb.total)])
    _write_json(out / "checkpoint.json", {
        "config": cfg.to_dict(),
        "model": asdict(est.config_),
        "seed": cfg.seed,
        "steps": est.n_steps_,
        "loss_history": history.name,
        "checkpoint": ckpt.name,
        "checkpoint_sha256": sha256_file(ckpt),
        "inputs": {"dataset_sha256": sha256_file(args.dataset),
                   "dataset_manifest_dataset_sha256": manifest.get("dataset_sha256")},
        "final_loss": est.loss_history_[-1]._asdict() if est.loss_history_ else None,
    })
    print(json.dumps({"checkpoint": str(ckpt), "steps": est.n_steps_}))
    return 0


def _rollout_refs(donor_path, model_cfg: ModelConfig, cfg: PipelineConfig):
    donor = load_trace_file(donor_path, cfg.pose.rate)
    refs = select_style_references(donor, model_cfg.n_ref, model_cfg.T, stage_rng(cfg.seed, "rollout"))
    return donor, refs


def _context_for(model_cfg: ModelConfig, cfg: PipelineConfig) -> ContextConfig:
    return ContextConfig(h=model_cfg.h, T=model_cfg.T, n=model_cfg.n, horizon=cfg.context.horizon,
                         n_ref=model_cfg.n_ref, rate=cfg.pose.rate)


def cmd_rollout(args, cfg, out: Path) -> int:
    model_cfg, params = load_checkpoint(args.checkpoint)
    if cfg.rollout.stride > model_cfg.T or cfg.rollout.stride + cfg.rollout.blend > model_cfg.T:
        raise ConfigError("rollout.stride", f"stride + blend must be <= the checkpoint's T={model_cfg.T}")
    beatmap = load_beatmap(args.beatmap)
    donor, refs = _rollout_refs(args.donor, model_cfg, cfg)

    def redraw(t):
        return select_style_references(donor, model_cfg.n_ref, model_cfg.T,
                                       stage_rng(cfg.seed, "rollout", int(round(t * cfg.pose.rate))))

    restyle = redraw if cfg.rollout.restyle_every_window else None
    trace = rollout(ModelPredictor(params, refs, restyle), beatmap, refs,
                    RolloutConfig(cfg.rollout.stride, cfg.rollout.blend),
                    _context_for(model_cfg, cfg), cfg.geometry)
    path = out / "trace.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        write_pose_trace(trace, f)
    _write_json(out / "trace.json", {
        "config": cfg.to_dict(),
        "inputs": {"checkpoint_sha256": sha256_file(args.checkpoint),
                   "beatmap_sha256": sha256_file(args.beatmap),
                   "donor_sha256": sha256_file(args.donor)},
        "style_ref_starts": list(refs.starts),
        "n_frames": len(trace),
        "trace_sha256": sha256_file(path),
    })
    print(json.dumps({"trace": str(path), "frames": len(trace)}))
    return 0


def cmd_eval(args, cfg, out: Path) -> int:
    beatmap = load_beatmap(args.beatmap)
    trace = load_trace_file(args.trace, cfg.pose.rate)
    report = score_hits(trace, beatmap, cfg.scoring)
    inputs = {"trace_sha256": sha256_file(args.trace), "beatmap_sha256": sha256_file(args.beatmap)}
    if args.checkpoint:
        if not args.donor:
            raise UsageError("--checkpoint needs --donor to pick style references")
        model_cfg, params = load_checkpoint(args.checkpoint)
        _, refs = _rollout_refs(args.donor, model_cfg, cfg)
        report.style_distance = style_distance(trace, refs, params)
        inputs.update(checkpoint_sha256=sha256_file(args.checkpoint), donor_sha256=sha256_file(args.donor))
    emit_report(report, out / "report.json", out / "plots", cfg.to_dict(), inputs, trace)
    print(json.dumps({"report": str(out / "report.json"), "hit_rate": report.hit_rate}))
    return 0


def gradcheck_batch(seed: int):
    """Toy problem for the gradient check: every layer at most 8 wide."""
    rng = stage_rng(seed, "gradcheck")
    ctx = ContextConfig(h=2, T=3, n=2, n_ref=2)
    bm = random_beatmap(rng, n_beats=16)
    trace = play_beatmap(bm, PlayerStyle.preset("energetic"), rng=rng)
    refs = select_style_references(trace, ctx.n_ref, ctx.T, rng)
    times = [float(trace.times[i]) for i in (40, 90)]
    batch = stack_examples([build_training_window(trace, bm, t, ctx, refs) for t in times])
    params = init_params(ModelConfig(d_z=4, width=8, h=2, T=3, n=2, n_ref=2), stage_rng(seed, "init"))
    return params, batch


def cmd_gradcheck(args, cfg, out: Path) -> int:
    params, batch = gradcheck_batch(cfg.seed)
    err = gradient_check(params, batch, lambda_match=cfg.train.lambda_match)
    print(json.dumps({"max_relative_error": err, "threshold": GRADCHECK_THRESHOLD}))
    return 0 if err < GRADCHECK_THRESHOLD else 1


# --------------------------------------------------------------------------
# parser and error envelope
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="beatpose", description="Beatmap-conditioned 3-point pose pipeline.")
    p.add_argument("--config", help="TOML config (default: $BEATPOSE_CONFIG)")
    p.add_argument("--seed", type=int, help="root seed, overrides the config")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="validate beatmap files")
    s.add_argument("paths", nargs="+")
    s = sub.add_parser("dataset", help="build training examples from a manifest")
    s.add_argument("manifest")
    s = sub.add_parser("train", help="fit the model on a dataset")
    s.add_argument("dataset")
    s.add_argument("--manifest", help="dataset manifest (default: next to the dataset)")
    s = sub.add_parser("rollout", help="generate a full-song trace")
    s.add_argument("checkpoint")
    s.add_argument("beatmap")
    s.add_argument("--donor", required=True, help="pose CSV supplying the style references")
    s = sub.add_parser("eval", help="score a trace against a beatmap")
    s.add_argument("trace")
    s.add_argument("beatmap")
    s.add_argument("--checkpoint", help="enables style distance (needs --donor)")
    s.add_argument("--donor")
    sub.add_parser("gradcheck", help="finite-difference gradient check on a toy model")
    return p


_COMMANDS = {"ingest": cmd_ingest, "dataset": cmd_dataset, "train": cmd_train,
             "rollout": cmd_rollout, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def _envelope(exc: BaseException, command: str | None) -> str:
    doc = {"error": type(exc).__name__, "message": str(exc), "command": command}
    for attr in ("key", "field", "index", "offset", "timestamp", "missing"):
        if getattr(exc, attr, None) is not None:
            doc[attr] = getattr(exc, attr)
    return json.dumps(doc, sort_keys=True, default=str)


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(args.threads):
            return _COMMANDS[command](args, cfg, out)
    except Exception as exc:  # every failure leaves through the JSON envelope
        print(_envelope(exc, command), file=sys.stderr)
        return 2 if isinstance(exc, (UsageError, ConfigError)) else 1


if __name__ == "__main__":
    sys.exit(main())
