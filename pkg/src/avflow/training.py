"""Two-stage training: audio-branch pretraining on TTS with everything else
frozen, then end-to-end multi-task training alternating the four audio/video
tasks round-robin. AdamW with decoupled weight decay, bias correction, and
global-norm gradient clipping; every step derives its RNG from
(seed, stage, step) so interrupted runs resume bit-exactly."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .flow import AUDIO_ONLY_TASKS, cfm_loss, compose_loss, condition_dropout, sample_path
from .model import (
    DualStreamDiT,
    TASK_T2AV,
    TASK_TI2AV,
    TASK_TR2AV,
    TASK_TTS,
    TASK_TV2A,
)
from .tensor import NonFiniteError, ParamStore, Tensor
from .toyworld import PairedSample, TemplateBank, ToyWorldConfig, make_paired_sample

STAGE2_CYCLE = (TASK_T2AV, TASK_TV2A, TASK_TI2AV, TASK_TR2AV)

METRICS_HEADER = "step,task,loss_total,loss_a,loss_v,grad_norm,wall_ms"


class TrainAbort(RuntimeError):
    """Raised when a step produces non-finite values; carries step and task."""

    def __init__(self, step: int, task: str, cause: str):
        super().__init__(f"training aborted at step {step} ({task}): {cause}")
        self.step = step
        self.task = task


@dataclass(frozen=True)
class OptimizerHyper:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")


def toy_hyper(**overrides) -> OptimizerHyper:
    """Desk-scale profile; the reference defaults above keep lr at 1e-5."""
    base = dict(lr=1e-3)
    base.update(overrides)
    return OptimizerHyper(**base)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer_state(params: ParamStore) -> OptimizerState:
    state = OptimizerState()
    for name in params.trainable_names():
        state.m[name] = np.zeros_like(params[name].data)
        state.v[name] = np.zeros_like(params[name].data)
    return state


def reconcile_optimizer_state(state: OptimizerState, params: ParamStore) -> None:
    """Align moment entries with the current trainable set.

    Newly-unfrozen parameters get zero moments; entries for parameters that
    are no longer trainable are dropped (the state invariant: entries exist
    only for currently-trainable parameters).
    """
    trainable = set(params.trainable_names())
    for name in list(state.m):
        if name not in trainable:
            del state.m[name]
            del state.v[name]
    for name in trainable:
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name].data)
            state.v[name] = np.zeros_like(params[name].data)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray],
               state: OptimizerState, hyper: OptimizerHyper) -> float:
    """Decoupled-weight-decay Adam update on the trainable parameters.

    Rejects the step (raising NonFiniteError) if any gradient is non-finite;
    frozen parameters are never touched. Returns the pre-clip gradient norm.
    """
    trainable = params.trainable_names()
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise KeyError(f"gradients missing for trainable parameters: {missing[:3]}")
    for name in trainable:
        if not np.isfinite(grads[name]).all():
            raise NonFiniteError(f"gradient of {name}")

    norm = global_grad_norm({n: grads[n] for n in trainable})
    clip = hyper.clip_norm
    scale = 1.0 if (clip is None or clip <= 0 or norm <= clip) else clip / norm

    state.step += 1
    bc1 = 1.0 - hyper.beta1 ** state.step
    bc2 = 1.0 - hyper.beta2 ** state.step
    for name in trainable:
        g = grads[name] * scale if scale != 1.0 else grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        p = params[name]
        update = hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        if hyper.weight_decay:
            update = update + hyper.lr * hyper.weight_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype)
    return norm


def freeze_plan(stage: int, params: ParamStore) -> set[str]:
    """Stage 1 trains only the audio stream (input/output projections,
    joint-attention and cross-attention projections, FFN, adaLN); the video
    stream and timestep conditioning stay frozen. Stage 2 trains everything."""
    if stage == 1:
        return {n for n in params.names() if n.startswith("audio.")}
    if stage == 2:
        return set(params.names())
    raise ValueError(f"unknown stage: {stage}")


def default_cycle(stage: int) -> tuple[str, ...]:
    return (TASK_TTS,) if stage == 1 else STAGE2_CYCLE


def task_scheduler(step: int, cycle) -> str:
    """Deterministic round-robin over the task cycle."""
    return cycle[step % len(cycle)]


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    batch_size: int = 16
    hyper: OptimizerHyper = field(default_factory=OptimizerHyper)
    cfg_dropout: float = 0.1
    task_cycle: tuple[str, ...] | None = None
    seed: int = 0
    checkpoint_every: int = 1000
    metrics_name: str = "metrics.csv"
    checkpoint_name: str = "model.utlk"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1]")
        if self.task_cycle is not None:
            cycle = tuple(self.task_cycle)
            if self.stage == 1 and not set(cycle) <= {TASK_TTS}:
                raise ValueError("stage-1 task cycle may only contain TTS")
            if self.stage == 2 and set(cycle) != set(STAGE2_CYCLE):
                raise ValueError("stage-2 task cycle must cover the four AV tasks")

    def cycle(self) -> tuple[str, ...]:
        return tuple(self.task_cycle) if self.task_cycle else default_cycle(self.stage)


def _prepare_conditions(samples: list[PairedSample], task: str, p_drop: float,
                        rng: np.random.Generator):
    """Per-task condition wiring plus joint classifier-free dropout."""
    conds = []
    for s in samples:
        c = s.condition()
        if task == TASK_TTS:
            if rng.random() >= 0.5:  # composite TTS: with / without timbre reference
                c.ref_audio = np.zeros_like(c.ref_audio)
            c.image = np.zeros_like(c.image)
        elif task in (TASK_T2AV, TASK_TV2A):
            c.ref_audio = np.zeros_like(c.ref_audio)
            c.image = np.zeros_like(c.image)
        elif task == TASK_TI2AV:
            c.ref_audio = np.zeros_like(c.ref_audio)
        elif task == TASK_TR2AV:
            c.image = np.zeros_like(c.image)
        conds.append(condition_dropout(c, p_drop, rng))
    text = np.stack([c.text for c in conds])
    image = np.stack([c.image for c in conds])
    ref = np.stack([c.ref_audio for c in conds])
    return text, image, ref


@dataclass
class TaskBatch:
    """Model inputs and flow targets assembled for one task step."""

    task: str
    video_in: np.ndarray | None
    audio_in: np.ndarray
    t: np.ndarray
    text: np.ndarray
    image: np.ndarray
    ref: np.ndarray
    target_v: np.ndarray | None
    target_a: np.ndarray
    frame_mask: np.ndarray | None


def build_task_batch(samples: list[PairedSample], task: str, p_drop: float,
                     rng: np.random.Generator) -> TaskBatch:
    """Assemble per-task inputs for a batch.

    RNG consumption order is fixed: per-sample condition coins, then the
    shared-per-sample timestep, then the video prior noise, then the audio
    prior noise.
    """
    b = len(samples)
    x1_a = np.stack([s.audio for s in samples])
    text, image, ref = _prepare_conditions(samples, task, p_drop, rng)
    t = rng.random(b)

    video_in = None
    frame_mask = None
    target_v = None
    if task == TASK_TV2A:
        video_in = np.stack([s.video for s in samples])
    elif task != TASK_TTS:
        x1_v = np.stack([s.video for s in samples])
        x0_v = rng.standard_normal(x1_v.shape).astype(np.float32)
        path_v = sample_path(x0_v, x1_v, t)
        video_in = path_v.x_t
        target_v = path_v.target
        if task == TASK_TI2AV:
            # the identity latent replaces frame 0 and is excluded from the loss
            video_in = video_in.copy()
            video_in[:, 0] = image[:, 0]
            frame_mask = np.ones((1, x1_v.shape[1], 1, 1, 1), dtype=bool)
            frame_mask[:, 0] = False
    x0_a = rng.standard_normal(x1_a.shape).astype(np.float32)
    path_a = sample_path(x0_a, x1_a, t)
    return TaskBatch(
        task=task, video_in=video_in, audio_in=path_a.x_t, t=t,
        text=text, image=image, ref=ref,
        target_v=target_v, target_a=path_a.target, frame_mask=frame_mask,
    )


def batch_losses(v_video, v_audio: Tensor, batch: TaskBatch):
    """(total tensor, loss_a scalar, loss_v scalar) for one task batch."""
    loss_a = cfm_loss(v_audio, batch.target_a)
    if batch.task in AUDIO_ONLY_TASKS:
        return loss_a, loss_a.item(), 0.0
    loss_v = cfm_loss(v_video, batch.target_v, batch.frame_mask)
    return T.add(loss_a, loss_v), loss_a.item(), loss_v.item()


def train_step(model: DualStreamDiT, samples: list[PairedSample], task: str,
               state: OptimizerState, hyper: OptimizerHyper, p_drop: float,
               rng: np.random.Generator):
    """One optimization step on a batch -> (LossBreakdown, grad_norm)."""
    params = model.params
    batch = build_task_batch(samples, task, p_drop, rng)

    params.zero_grad()
    v_video, v_audio = model.forward_batch(
        Tensor(batch.video_in) if batch.video_in is not None else None,
        Tensor(batch.audio_in),
        batch.t,
        Tensor(batch.text),
        Tensor(batch.ref),
        task=task,
    )
    total, loss_a_val, loss_v_val = batch_losses(v_video, v_audio, batch)
    total.backward()

    grads = {}
    for name in params.trainable_names():
        p = params[name]
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    norm = adamw_step(params, grads, state, hyper)
    return compose_loss(task, loss_a_val, loss_v_val), norm


def format_metrics_row(step: int, task: str, breakdown, grad_norm: float,
                       wall_ms: int) -> str:
    return (
        f"{step},{task},{breakdown.total:.8g},{breakdown.loss_a:.8g},"
        f"{breakdown.loss_v:.8g},{grad_norm:.8g},{wall_ms}"
    )


@dataclass
class TrainResult:
    metrics_path: Path
    checkpoint_path: Path
    final_step: int
    first_loss: float | None
    last_loss: float | None


def run_training(model: DualStreamDiT, world: ToyWorldConfig, bank: TemplateBank,
                 tcfg: TrainConfig, out_dir, config_header: dict | None = None,
                 start_step: int = 0, opt_state: OptimizerState | None = None,
                 on_step=None) -> TrainResult:
    """Drive the configured stage, emitting metrics rows and checkpoints."""
    from .checkpoint import save_checkpoint  # local import: checkpoint has no deps on us

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / tcfg.metrics_name
    checkpoint_path = out_dir / tcfg.checkpoint_name

    params = model.params
    params.set_trainable(freeze_plan(tcfg.stage, params))
    if opt_state is None:
        opt_state = init_optimizer_state(params)
    else:
        reconcile_optimizer_state(opt_state, params)
    cycle = tcfg.cycle()

    def rng_blob(next_step: int) -> dict:
        return {
            "scheme": "per-step",
            "seed": tcfg.seed,
            "stage": tcfg.stage,
            "next_step": next_step,
        }

    def save(path, step):
        save_checkpoint(path, params, config_header, opt_state, rng_blob(step), step)

    first_loss = None
    last_loss = None
    with open(metrics_path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        for step in range(start_step, tcfg.steps):
            t0 = time.perf_counter()
            rng = np.random.default_rng([tcfg.seed, tcfg.stage, step])
            task = task_scheduler(step, cycle)
            samples = [make_paired_sample(rng, world, bank) for _ in range(tcfg.batch_size)]
            try:
                breakdown, grad_norm = train_step(
                    model, samples, task, opt_state, tcfg.hyper, tcfg.cfg_dropout, rng
                )
            except NonFiniteError as err:
                raise TrainAbort(step, task, str(err)) from err
            wall_ms = int(round((time.perf_counter() - t0) * 1000))
            fh.write(format_metrics_row(step, task, breakdown, grad_norm, wall_ms) + "\n")
            if first_loss is None:
                first_loss = breakdown.total
            last_loss = breakdown.total
            if on_step is not None:
                on_step(step, task, breakdown)
            if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                periodic = checkpoint_path.with_name(
                    f"{checkpoint_path.stem}.step{step + 1:06d}{checkpoint_path.suffix}"
                )
                save(periodic, step + 1)
    save(checkpoint_path, tcfg.steps)
    return TrainResult(
        metrics_path=metrics_path,
        checkpoint_path=checkpoint_path,
        final_step=tcfg.steps,
        first_loss=first_loss,
        last_loss=last_loss,
    )
