"""Command-line orchestration: gen-data, train-codec, train, sample, eval,
scale-exp. Exit codes: 0 success, 2 bad usage, 3 invalid config, 4 missing
checkpoint; errors print one machine-parsable line to stderr."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import config as cfgmod
from . import metrics as metricsmod
from . import scaling as scalingmod
from . import toyworld
from .checkpointing import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .probe import probe_samples_from_scenes, train_probe_detector
from .sampling import contact_sheet, generate_clip, make_jobs, pixels_to_u8
from .subjects import build_external_bank, build_internal_bank
from .training import TrainConfig, build_bundle, prepare_base, train

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4


def _fail(code: int, kind: str, detail: str) -> int:
    print(f"error: {kind}: {detail}", file=sys.stderr)
    return code


def _out_dir(path: str) -> str:
    root = os.environ.get("SPRITEDIFF_OUT_ROOT")
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    os.makedirs(path, exist_ok=True)
    return path


def _load_manifest(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return load_checkpoint(path)


def _corpus(path: str):
    train_scenes, val_scenes = toyworld.load_corpus(path)
    return train_scenes, val_scenes


def _banks(train_scenes, include_external: bool):
    bank = build_internal_bank(train_scenes)
    if include_external:
        bank = bank + build_external_bank()
    return bank


def cmd_gen_data(cfg, args) -> int:
    out = _out_dir(args.out)
    d = cfg["data"]
    toyworld.generate_corpus(
        out,
        num_scenes=d["num_scenes"],
        base_seed=d["seed"],
        num_frames=d["num_frames"],
        resolution=(d["height"], d["width"]),
        min_subjects=d["min_subjects"],
        max_subjects=d["max_subjects"],
        val_fraction=d["val_fraction"],
    )
    cfgmod.write_run_metadata(out, cfg, "gen-data")
    print(f"corpus written to {out}")
    return 0


def cmd_train_codec(cfg, args) -> int:
    out = _out_dir(args.out)
    train_scenes, _ = _corpus(args.corpus)
    mc = _model_config(cfg)
    manifest = prepare_base(
        train_scenes,
        model_config=mc,
        codec_steps=cfg["codec"]["steps"],
        encoder_steps=cfg["codec"]["encoder_steps"],
        seed=cfg["codec"]["seed"],
    )
    path = save_checkpoint(manifest, os.path.join(out, "base.ckpt"))
    cfgmod.write_run_metadata(out, cfg, "train-codec", {"checkpoint": path})
    print(f"codec checkpoint written to {path}")
    return 0


def _model_config(cfg) -> dict:
    m = dict(cfg["model"])
    m["channel_multipliers"] = list(m["channel_multipliers"])
    m["attention_levels"] = list(m["attention_levels"])
    return m


def cmd_train(cfg, args) -> int:
    out = _out_dir(args.out)
    train_scenes, _ = _corpus(args.corpus)
    init = _load_manifest(args.init)
    t = cfg["train"]
    tc = TrainConfig(
        stage=t["stage"],
        steps=t["steps"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        seed=t["seed"],
        condition_dropout=t["condition_dropout"],
    )
    manifest, history = train(train_scenes, tc, init)
    path = save_checkpoint(manifest, os.path.join(out, "model.ckpt"))
    curves = "step,loss\n" + "".join(f"{s},{l:.6f}\n" for s, l in history)
    cfgmod.atomic_write_text(os.path.join(out, "curves.csv"), curves)
    cfgmod.write_run_metadata(out, cfg, "train", {"checkpoint": path, "stage": tc.stage})
    print(f"stage={tc.stage} checkpoint written to {path}")
    return 0


def cmd_sample(cfg, args) -> int:
    out = _out_dir(args.out)
    train_scenes, val_scenes = _corpus(args.corpus)
    manifest = _load_manifest(args.checkpoint)
    bundle = build_bundle(manifest)
    s = cfg["sample"]
    bank = _banks(train_scenes, include_external=s["external_ratio"] > 0)
    layouts = val_scenes or train_scenes
    jobs = make_jobs(
        [layouts[i % len(layouts)] for i in range(s["num_clips"])],
        bank,
        s["external_ratio"],
        s["seed"],
        codebook_size=bundle.model_config["codebook_size"],
    )
    meta = {"ddim_steps": s["steps"], "seed": s["seed"], "clips": []}
    for i, job in enumerate(jobs):
        pixels = generate_clip(bundle, job, ddim_steps=s["steps"],
                               guidance_scale=s["guidance_scale"])
        clip_dir = os.path.join(out, f"clip_{i:03d}")
        os.makedirs(clip_dir, exist_ok=True)
        u8 = pixels_to_u8(pixels)
        from PIL import Image

        for f in range(u8.shape[0]):
            Image.fromarray(u8[f]).save(os.path.join(clip_dir, f"frame_{f:03d}.png"))
        contact_sheet([pixels]).save(os.path.join(clip_dir, "sheet.png"))
        meta["clips"].append({"dir": f"clip_{i:03d}", "seed": job.seed})
    cfgmod.atomic_write_text(os.path.join(out, "metadata.json"), json.dumps(meta, indent=1, sort_keys=True))
    cfgmod.write_run_metadata(out, cfg, "sample")
    print(f"{len(jobs)} clips written to {out}")
    return 0


def cmd_eval(cfg, args) -> int:
    out = _out_dir(args.out)
    train_scenes, val_scenes = _corpus(args.corpus)
    manifest = _load_manifest(args.checkpoint)
    bundle = build_bundle(manifest)
    e = cfg["eval"]
    encoder = bundle.conditioner.image_encoder
    probe = train_probe_detector(
        probe_samples_from_scenes(train_scenes), seed=e["seed"], steps=e["probe_steps"]
    )
    bank = _banks(train_scenes, include_external=e["external_ratio"] > 0)
    layouts = (val_scenes or train_scenes)[: e["num_clips"]]

    groups = []
    gen_frames = []
    align_pairs = []
    temporal = []
    for i, scene in enumerate(layouts):
        clips = []
        for r in range(max(2, e["repeats"])):
            jobs = make_jobs([scene], bank, e["external_ratio"], e["seed"] + 1000 * r + i,
                             codebook_size=bundle.model_config["codebook_size"])
            pixels = generate_clip(bundle, jobs[0], ddim_steps=e["ddim_steps"])
            clips.append(pixels)
            gen_frames.append(pixels)
        groups.append((scene.layout, clips))
        align_pairs.append((clips[0], scene.layout))
        try:
            temporal.append(metricsmod.temporal_consistency_score(clips[0], scene.layout, encoder))
        except ValueError:
            pass
    alignment = metricsmod.alignment_of_clips(align_pairs, probe)
    diversity = metricsmod.diversity_score(groups, encoder)
    gen = torch.cat(gen_frames, dim=0)
    real = torch.cat([torch.as_tensor(s.pixel_video()) for s in val_scenes or train_scenes], dim=0)
    n = min(gen.shape[0], real.shape[0])
    if n >= e["fid_min_frames"]:
        fid = metricsmod.distribution_distance(gen[:n], real[:n], encoder, min_count=e["fid_min_frames"])
    else:
        fid = float("nan")
    report = metricsmod.MetricsReport(
        alignment=alignment,
        diversity=diversity,
        temporal_consistency=float(np.mean(temporal)) if temporal else float("nan"),
        distribution_distance=fid,
        breakdown={"num_clips": len(layouts), "repeats": max(2, e["repeats"]),
                   "ddim_steps": e["ddim_steps"], "seed": e["seed"]},
    )
    cfgmod.atomic_write_text(os.path.join(out, "metrics.json"), json.dumps(report.as_dict(), indent=1, sort_keys=True))
    lines = [f"{k}: {v}" for k, v in report.as_dict().items() if k != "breakdown"]
    cfgmod.atomic_write_text(os.path.join(out, "report.txt"), "\n".join(lines) + "\n")
    cfgmod.write_run_metadata(out, cfg, "eval")
    print("\n".join(lines))
    return 0


def cmd_scale_exp(cfg, args) -> int:
    out = _out_dir(args.out)
    train_scenes, val_scenes = _corpus(args.corpus)
    manifest = _load_manifest(args.checkpoint)
    bundle = build_bundle(manifest)
    s = cfg["scale"]
    real = train_scenes[: s["real_count"]]
    layout_source = val_scenes or train_scenes
    bank = _banks(train_scenes, include_external=True)
    rows = scalingmod.run_scaling_experiment(
        bundle,
        real,
        val_scenes or train_scenes,
        layout_source,
        bank,
        bundle.conditioner.image_encoder,
        synthetic_counts=list(s["synthetic_counts"]),
        bank_modes=list(s["bank_modes"]),
        seeds=list(s["seeds"]),
        probe_steps=s["probe_steps"],
        ddim_steps=s["ddim_steps"],
    )
    scalingmod.write_rows_jsonl(rows, os.path.join(out, "scaling.jsonl"))
    table = scalingmod.render_table(rows)
    cfgmod.atomic_write_text(os.path.join(out, "scaling.txt"), table)
    cfgmod.write_run_metadata(out, cfg, "scale-exp")
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spritediff")
    p.add_argument("--threads", type=int, default=int(os.environ.get("SPRITEDIFF_THREADS", "1")),
                   help="torch thread count (1 keeps runs reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, corpus=False, init=False):
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="section.key=value")
        sp.add_argument("--out", required=True)
        if corpus:
            sp.add_argument("--corpus", required=True)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if init:
            sp.add_argument("--init", required=True)

    common(sub.add_parser("gen-data", help="materialize a toy corpus"))
    common(sub.add_parser("train-codec", help="train frozen codec + image encoder"), corpus=True)
    common(sub.add_parser("train", help="train a diffusion stage"), corpus=True, init=True)
    common(sub.add_parser("sample", help="generate clips + contact sheets"), corpus=True, checkpoint=True)
    common(sub.add_parser("eval", help="compute the metrics report"), corpus=True, checkpoint=True)
    common(sub.add_parser("scale-exp", help="run the data-scaling table"), corpus=True, checkpoint=True)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "scale-exp": cmd_scale_exp,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = cfgmod.resolve_config(args.config, args.overrides)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", f"{exc.key}: {exc}")
    except OSError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    try:
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        return _fail(EXIT_CHECKPOINT, "missing-checkpoint", str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", f"{exc.key}: {exc}")
    except (ValueError, RuntimeError, KeyError) as exc:
        return _fail(1, "runtime", str(exc))


if __name__ == "__main__":
    sys.exit(main())
