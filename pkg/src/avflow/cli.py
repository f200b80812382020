"""Command-line surface: train / sample / eval / inspect-attn.

Exit codes: 0 success, 2 invalid configuration or arguments (with a
field-level diagnostic), 3 non-finite abort during training or sampling.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_tensors
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .model import ALL_TASKS, DualStreamDiT, TASK_TV2A
from .pgm import write_pgm
from .report import evaluate_model, report_lines, write_report
from .rope import RopeConfig, default_split
from .sampler import GuidanceSpec, IntegrationError, sample_latents
from .toyworld import (
    make_bank,
    make_paired_sample,
    mouth_token_mask,
    render_audio,
    render_video_frame,
    to_uint8,
)
from .training import TrainAbort, run_training


def build_rope_config(run: RunConfig) -> RopeConfig:
    return RopeConfig(
        head_dim=run.model.head_dim,
        split=default_split(run.model.head_dim),
        audio_anchor=(0, 0),
        audio_time_scale=run.world.frames / run.world.audio_frames,
    )


def build_runtime(run: RunConfig, params=None, init_seed: int | None = None):
    """Wire (model, world, bank) from a validated run configuration."""
    bank = make_bank(run.world, seed=run.bank_seed)
    rope_cfg = build_rope_config(run)
    if params is None:
        model = DualStreamDiT.create(
            run.model, seed=run.train.seed if init_seed is None else init_seed,
            rope_cfg=rope_cfg,
        )
    else:
        model = DualStreamDiT(run.model, params, rope_cfg)
    return model, run.world, bank


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_run_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    if ckpt.config is None:
        raise ConfigError("$", f"checkpoint {path} carries no run configuration")
    return ckpt, config_from_dict(ckpt.config)


def _build_task_inputs(run: RunConfig, bank, task: str, seed: int):
    """Derive the conditioning inputs for one sampling task from the toy world."""
    world = run.world
    source = make_paired_sample(np.random.default_rng([seed, 7]), world, bank)
    cond = source.condition()
    if task in ("T2AV", "TV2A", "TTS"):
        cond.image = np.zeros_like(cond.image)
        cond.ref_audio = (
            np.zeros_like(cond.ref_audio) if task != "TTS" else cond.ref_audio
        )
    elif task == "TI2AV":
        cond.ref_audio = np.zeros_like(cond.ref_audio)
    elif task == "TR2AV":
        cond.image = np.zeros_like(cond.image)
    return source, cond


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        run = load_config(args.config)
    except ConfigError as err:
        return _fail(f"config: {err}", 2)
    if args.seed is not None:
        from dataclasses import replace

        run.train = replace(run.train, seed=args.seed)
    out_dir = Path(args.out) if args.out else Path(run.out_dir)

    start_step = 0
    opt_state = None
    params = None
    if args.resume:
        try:
            ckpt = load_checkpoint(args.resume)
        except (OSError, CheckpointError) as err:
            return _fail(f"resume: {err}", 2)
        if ckpt.config is not None:
            ours = run.to_dict()
            for section in ("model", "world"):
                if ckpt.config.get(section) != ours[section]:
                    return _fail(
                        f"resume: checkpoint {section} section does not match the config",
                        2,
                    )
        params = ckpt.params
        ckpt_stage = (ckpt.rng or {}).get("stage")
        if ckpt_stage == run.train.stage:
            opt_state = ckpt.optimizer
            start_step = ckpt.step
        # a different stage is a transition: adopt the weights only and
        # start the new stage from step 0 with a fresh optimizer
    model, world, bank = build_runtime(run, params=params)
    try:
        result = run_training(
            model, world, bank, run.train, out_dir,
            config_header=run.to_dict(), start_step=start_step, opt_state=opt_state,
        )
    except TrainAbort as err:
        return _fail(str(err), 3)
    print(f"trained to step {result.final_step}; metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_sample(args) -> int:
    try:
        ckpt, run = _load_run_from_checkpoint(args.checkpoint)
    except (OSError, CheckpointError, ConfigError) as err:
        return _fail(str(err), 2)
    task = (args.task or run.sample.task).upper()
    if task not in ALL_TASKS:
        return _fail(f"task: unknown task {task!r}", 2)
    seed = args.seed if args.seed is not None else run.sample.seed
    try:
        spec = GuidanceSpec(
            omega=args.omega if args.omega is not None else run.sample.omega,
            steps=args.steps if args.steps is not None else run.sample.steps,
            task=task,
            seed=seed,
            method=run.sample.method,
        )
    except ValueError as err:
        return _fail(f"sample: {err}", 2)
    model, world, bank = build_runtime(run, params=ckpt.params)
    source, cond = _build_task_inputs(run, bank, task, seed)
    clean_video = source.video if task == TASK_TV2A else None
    out_dir = Path(args.out or run.out_dir) if (args.out or run.out_dir) else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        x_video, x_audio = sample_latents(
            model, cond, spec, world.video_shape, world.audio_shape,
            rng=np.random.default_rng([seed, 8]), clean_video=clean_video,
        )
    except IntegrationError as err:
        return _fail(str(err), 3)

    files = {}
    save_tensors(out_dir / "audio.bin", {"audio": x_audio}, config=run.to_dict())
    files["audio"] = "audio.bin"
    write_pgm(out_dir / "audio.pgm", render_audio(x_audio))
    files["audio_pgm"] = "audio.pgm"
    if x_video is not None:
        save_tensors(out_dir / "video.bin", {"video": x_video}, config=run.to_dict())
        files["video"] = "video.bin"
        for i, frame in enumerate(x_video):
            name = f"frame_{i:03d}.pgm"
            write_pgm(out_dir / name, render_video_frame(frame))
        files["frames"] = [f"frame_{i:03d}.pgm" for i in range(len(x_video))]
    manifest = {
        "task": task,
        "omega": spec.omega,
        "steps": spec.steps,
        "seed": seed,
        "method": spec.method,
        "checkpoint": str(args.checkpoint),
        "checkpoint_step": ckpt.step,
        "prompt_phonemes": source.phonemes.tolist(),
        "timbre_id": source.timbre_id,
        "identity_id": source.identity_id,
        "files": files,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote sample outputs to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    try:
        ckpt, run = _load_run_from_checkpoint(args.checkpoint)
    except (OSError, CheckpointError, ConfigError) as err:
        return _fail(str(err), 2)
    seed = args.seed if args.seed is not None else run.sample.seed
    model, world, bank = build_runtime(run, params=ckpt.params)
    report = evaluate_model(
        model, world, bank, n_samples=args.samples, seed=seed,
        omega=run.sample.omega if args.omega is None else args.omega,
        steps=run.sample.steps if args.steps is None else args.steps,
        method=run.sample.method,
    )
    out_dir = Path(args.out or run.out_dir)
    paths = write_report(report, out_dir)
    for line in report_lines(report):
        print(line)
    print(f"report files: {', '.join(str(p) for p in paths.values() if not isinstance(p, list))}")
    return 0


def cmd_inspect_attn(args) -> int:
    try:
        ckpt, run = _load_run_from_checkpoint(args.checkpoint)
    except (OSError, CheckpointError, ConfigError) as err:
        return _fail(str(err), 2)
    blocks = _parse_indices(args.blocks)
    steps = _parse_indices(args.steps)
    if blocks is None or steps is None:
        return _fail("blocks/steps: expected comma-separated integers", 2)
    n_blocks = run.model.n_blocks
    k = run.sample.steps
    bad_blocks = [b for b in blocks if not 0 <= b < n_blocks]
    bad_steps = [s for s in steps if not 0 <= s < k]
    if bad_blocks:
        return _fail(f"blocks: index {bad_blocks[0]} outside 0..{n_blocks - 1}", 2)
    if bad_steps:
        return _fail(f"steps: index {bad_steps[0]} outside 0..{k - 1}", 2)
    seed = args.seed if args.seed is not None else run.sample.seed
    model, world, bank = build_runtime(run, params=ckpt.params)
    source, cond = _build_task_inputs(run, bank, "T2AV", seed)
    spec = GuidanceSpec(
        omega=run.sample.omega, steps=k, task="T2AV", seed=seed, method=run.sample.method,
    )
    try:
        _, _, captured = sample_latents(
            model, cond, spec, world.video_shape, world.audio_shape,
            rng=np.random.default_rng([seed, 8]),
            capture_steps=steps, capture_blocks=blocks,
        )
    except IntegrationError as err:
        return _fail(str(err), 3)

    out_dir = Path(args.out or run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mouth_mask = mouth_token_mask(world, run.model.patch)
    raw = {}
    stats = []
    for (step, block), (weights, n_video) in sorted(captured.items()):
        mean_w = weights.mean(axis=0)  # head average, (n_joint, n_joint)
        a2v = mean_w[n_video:, :n_video]
        v2a = mean_w[:n_video, n_video:]
        raw[f"a2v_step{step}_block{block}"] = a2v
        raw[f"v2a_step{step}_block{block}"] = v2a
        write_pgm(out_dir / f"attn_a2v_step{step}_block{block}.pgm", to_uint8(a2v))
        write_pgm(out_dir / f"attn_v2a_step{step}_block{block}.pgm", to_uint8(v2a))
        mouth_mean = float(a2v[:, mouth_mask].mean())
        other_mean = float(a2v[:, ~mouth_mask].mean())
        stats.append(
            {
                "step": step,
                "block": block,
                "a2v_mouth_mean": mouth_mean,
                "a2v_other_mean": other_mean,
                "a2v_mouth_ratio": mouth_mean / other_mean if other_mean > 0 else float("inf"),
            }
        )
    save_tensors(out_dir / "attn_raw.bin", raw, config=run.to_dict())
    manifest = {
        "seed": seed,
        "task": "T2AV",
        "omega": spec.omega,
        "sampler_steps": k,
        "captured": stats,
        "mouth_tokens": int(mouth_mask.sum()),
        "video_tokens": int(mouth_mask.size),
    }
    with open(out_dir / "attn_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    for s in stats:
        print(
            f"step {s['step']} block {s['block']}: a2v mouth/other ratio "
            f"{s['a2v_mouth_ratio']:.3f}"
        )
    return 0


def _parse_indices(text: str):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avflow",
        description="Train, sample, and inspect the dual-stream audio/video flow model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training stage from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="generate latents from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--task", default=None)
    p_sample.add_argument("--omega", type=float, default=None)
    p_sample.add_argument("--steps", type=int, default=None)
    p_sample.add_argument("--seed", type=int, default=None)
    p_sample.add_argument("--out", default=None)
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="score generated samples with the oracles")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--samples", type=int, default=64)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--omega", type=float, default=None)
    p_eval.add_argument("--steps", type=int, default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_attn = sub.add_parser(
        "inspect-attn", help="export joint-attention maps captured during sampling"
    )
    p_attn.add_argument("--checkpoint", required=True)
    p_attn.add_argument("--seed", type=int, default=None)
    p_attn.add_argument("--blocks", default="0")
    p_attn.add_argument("--steps", default="0", help="sampler step indices to capture")
    p_attn.add_argument("--out", default=None)
    p_attn.set_defaults(func=cmd_inspect_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
