"""Evaluation pipeline: sample each task, decode with the toy-world oracles,
and emit a plain-text summary, a JSON report, a per-sample CSV, and rendered
matplotlib figures."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .model import (  # noqa: E402
    ConditionSet,
    DualStreamDiT,
    TASK_T2AV,
    TASK_TI2AV,
    TASK_TR2AV,
    TASK_TV2A,
)
from .sampler import GuidanceSpec, sample_latents  # noqa: E402
from .toyworld import (  # noqa: E402
    TemplateBank,
    ToyWorldConfig,
    make_paired_sample,
    sync_agreement,
    text_adherence,
    timbre_similarity,
)

EVAL_TASKS = (TASK_T2AV, TASK_TV2A, TASK_TI2AV, TASK_TR2AV)

CSV_HEADER = (
    "task,sample,sync,adherence_audio,adherence_video,adherence,"
    "timbre_matched,timbre_mismatched"
)


def _conditions_for(task: str, samples) -> ConditionSet:
    text = np.stack([s.text for s in samples])
    image = np.stack([s.identity for s in samples])
    ref = np.stack([s.ref_audio for s in samples])
    if task in (TASK_T2AV, TASK_TV2A):
        image = np.zeros_like(image)
        ref = np.zeros_like(ref)
    elif task == TASK_TI2AV:
        ref = np.zeros_like(ref)
    elif task == TASK_TR2AV:
        image = np.zeros_like(image)
    return ConditionSet(text=text, image=image, ref_audio=ref)


def evaluate_task(model: DualStreamDiT, world: ToyWorldConfig, bank: TemplateBank,
                  task: str, n_samples: int, seed: int, omega: float, steps: int,
                  method: str = "euler") -> dict:
    """Sample ``n_samples`` of one task and score them with the oracles."""
    task_index = EVAL_TASKS.index(task)
    data_rng = np.random.default_rng([seed, task_index, 0])
    samples = [make_paired_sample(data_rng, world, bank) for _ in range(n_samples)]
    cond = _conditions_for(task, samples)
    clean_video = np.stack([s.video for s in samples]) if task == TASK_TV2A else None
    spec = GuidanceSpec(omega=omega, steps=steps, task=task, seed=seed, method=method)
    noise_rng = np.random.default_rng([seed, task_index, 1])
    video_shape = (n_samples,) + world.video_shape
    audio_shape = (n_samples,) + world.audio_shape
    x_video, x_audio = sample_latents(
        model, cond, spec, video_shape, audio_shape, rng=noise_rng,
        clean_video=clean_video,
    )

    rows = []
    for i, s in enumerate(samples):
        sync = sync_agreement(x_video[i], x_audio[i], bank, world)
        adherence = text_adherence(x_video[i], x_audio[i], s.phonemes, bank, world)
        row = {
            "sample": i,
            "sync": sync,
            "adherence_audio": adherence["audio"],
            "adherence_video": adherence["video"],
            "adherence": adherence["mean"],
        }
        if task == TASK_TR2AV:
            other = (s.timbre_id + 1) % bank.n_timbres
            row["timbre_matched"] = timbre_similarity(x_audio[i], s.timbre_id, bank)
            row["timbre_mismatched"] = timbre_similarity(x_audio[i], other, bank)
        rows.append(row)

    def stats(key):
        vals = np.array([r[key] for r in rows])
        return {"mean": float(vals.mean()), "std": float(vals.std())}

    result = {
        "task": task,
        "n_samples": n_samples,
        "sync": stats("sync"),
        "adherence_audio": stats("adherence_audio"),
        "adherence_video": stats("adherence_video"),
        "adherence": stats("adherence"),
        "samples": rows,
    }
    if task == TASK_TR2AV:
        result["timbre_matched"] = stats("timbre_matched")
        result["timbre_mismatched"] = stats("timbre_mismatched")
    if task == TASK_TV2A:
        result["video_clamped"] = bool(np.array_equal(x_video, clean_video))
    return result


def evaluate_model(model: DualStreamDiT, world: ToyWorldConfig, bank: TemplateBank,
                   n_samples: int, seed: int, omega: float, steps: int,
                   tasks=EVAL_TASKS, method: str = "euler") -> dict:
    report = {
        "seed": seed,
        "n_samples": n_samples,
        "omega": omega,
        "steps": steps,
        "method": method,
        "chance": 1.0 / world.alphabet,
        "tasks": {},
    }
    for task in tasks:
        report["tasks"][task] = evaluate_task(
            model, world, bank, task, n_samples, seed, omega, steps, method
        )
    return report


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def report_lines(report: dict) -> list[str]:
    lines = [
        f"evaluation: {report['n_samples']} samples/task, omega={report['omega']}, "
        f"steps={report['steps']}, seed={report['seed']} "
        f"(chance level {report['chance']:.3f})",
        "",
        f"{'task':<8}{'sync':>14}{'adher(a)':>12}{'adher(v)':>12}{'adherence':>12}",
    ]
    for task, res in report["tasks"].items():
        lines.append(
            f"{task:<8}"
            f"{res['sync']['mean']:>8.3f}±{res['sync']['std']:<5.3f}"
            f"{res['adherence_audio']['mean']:>10.3f}"
            f"{res['adherence_video']['mean']:>12.3f}"
            f"{res['adherence']['mean']:>12.3f}"
        )
        if "timbre_matched" in res:
            lines.append(
                f"{'':<8}timbre matched {res['timbre_matched']['mean']:.3f} "
                f"vs mismatched {res['timbre_mismatched']['mean']:.3f}"
            )
        if "video_clamped" in res:
            lines.append(f"{'':<8}video clamped to conditioning: {res['video_clamped']}")
    return lines


def write_csv(report: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for task, res in report["tasks"].items():
            for row in res["samples"]:
                matched = f"{row['timbre_matched']:.6f}" if "timbre_matched" in row else ""
                mismatched = (
                    f"{row['timbre_mismatched']:.6f}" if "timbre_mismatched" in row else ""
                )
                fh.write(
                    f"{task},{row['sample']},{row['sync']:.6f},"
                    f"{row['adherence_audio']:.6f},{row['adherence_video']:.6f},"
                    f"{row['adherence']:.6f},{matched},{mismatched}\n"
                )


def render_figures(report: dict, out_dir: Path) -> list[Path]:
    tasks = list(report["tasks"])
    chance = report["chance"]
    written = []

    def save(fig, name):
        path = out_dir / name
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    means = [report["tasks"][t]["sync"]["mean"] for t in tasks]
    stds = [report["tasks"][t]["sync"]["std"] for t in tasks]
    ax.bar(tasks, means, yerr=stds, capsize=3, color="#4878cf")
    ax.axhline(chance, color="gray", linestyle="--", linewidth=1, label="chance")
    ax.set_ylabel("sync agreement")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    save(fig, "eval_sync.png")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.38
    xs = np.arange(len(tasks))
    aud = [report["tasks"][t]["adherence_audio"]["mean"] for t in tasks]
    vid = [report["tasks"][t]["adherence_video"]["mean"] for t in tasks]
    ax.bar(xs - width / 2, aud, width, label="audio", color="#4878cf")
    ax.bar(xs + width / 2, vid, width, label="video", color="#ee854a")
    ax.axhline(chance, color="gray", linestyle="--", linewidth=1)
    ax.set_xticks(xs, tasks)
    ax.set_ylabel("text adherence")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    save(fig, "eval_adherence.png")

    timbre_tasks = [t for t in tasks if "timbre_matched" in report["tasks"][t]]
    if timbre_tasks:
        fig, ax = plt.subplots(figsize=(4, 3.2))
        xs = np.arange(len(timbre_tasks))
        matched = [report["tasks"][t]["timbre_matched"]["mean"] for t in timbre_tasks]
        mismatched = [report["tasks"][t]["timbre_mismatched"]["mean"] for t in timbre_tasks]
        ax.bar(xs - 0.2, matched, width=0.38, color="#4878cf", label="matched")
        ax.bar(xs + 0.2, mismatched, width=0.38, color="#ee854a", label="mismatched")
        ax.set_xticks(xs, timbre_tasks)
        ax.set_ylabel("timbre cosine similarity")
        ax.set_ylim(-1.05, 1.05)
        ax.axhline(0.0, color="gray", linewidth=0.8)
        ax.legend(frameon=False)
        save(fig, "eval_timbre.png")
    return written


def write_report(report: dict, out_dir) -> dict:
    """Write report.json / report.txt / report.csv and the figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    txt_path = out_dir / "report.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report_lines(report)) + "\n")
    csv_path = out_dir / "report.csv"
    write_csv(report, csv_path)
    figures = render_figures(report, out_dir)
    return {
        "json": json_path,
        "txt": txt_path,
        "csv": csv_path,
        "figures": figures,
    }
