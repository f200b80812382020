"""Symmetric dual-stream transformer over video and audio latent tokens.

Each block runs joint attention across the concatenated token streams,
cross-attention into text / reference-audio conditions (two key-value sets
summed element-wise), and a per-stream FFN, all modulated by timestep-derived
shift/scale/gate vectors with zero-initialized gates so every block starts as
the identity. The audio stream mirrors the video stream parameter-for-
parameter inside the blocks; only the input/output projections differ by
modality.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .rope import RopeConfig, RotationTable, angle_table, audio_angle_positions, default_split
from .tensor import ParamStore, Tensor

STREAMS = ("video", "audio")

TASK_TTS = "TTS"
TASK_T2AV = "T2AV"
TASK_TV2A = "TV2A"
TASK_TI2AV = "TI2AV"
TASK_TR2AV = "TR2AV"
ALL_TASKS = (TASK_TTS, TASK_T2AV, TASK_TV2A, TASK_TI2AV, TASK_TR2AV)


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    model_dim: int = 64
    n_heads: int = 4
    head_dim: int = 16
    ffn_mult: int = 4
    patch: tuple[int, int, int] = (1, 2, 2)
    c_video: int = 8
    c_audio: int = 8
    text_dim: int = 8
    text_len: int = 16
    ref_len: int = 8

    def __post_init__(self):
        if self.model_dim != self.n_heads * self.head_dim:
            raise ValueError("model_dim must equal n_heads * head_dim")
        if self.model_dim % 2 != 0:
            raise ValueError("model_dim must be even")

    @property
    def patch_volume(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * self.c_video


@dataclass
class ConditionSet:
    """Text / identity-image / reference-audio conditions.

    A null condition is the all-zeros array of the same shape, so the set is
    always fully materialized and "missing" conditions contribute exactly
    nothing through the bias-free key/value projections.
    """

    text: np.ndarray       # (text_len, text_dim)
    image: np.ndarray      # (1, H, W, c_video)
    ref_audio: np.ndarray  # (ref_len, c_audio)

    def null_like(self) -> "ConditionSet":
        return ConditionSet(
            text=np.zeros_like(self.text),
            image=np.zeros_like(self.image),
            ref_audio=np.zeros_like(self.ref_audio),
        )

    def copy(self) -> "ConditionSet":
        return ConditionSet(self.text.copy(), self.image.copy(), self.ref_audio.copy())


def null_condition(cfg: ModelConfig, image_shape: tuple[int, int, int]) -> ConditionSet:
    h, w, c = image_shape
    return ConditionSet(
        text=np.zeros((cfg.text_len, cfg.text_dim), dtype=np.float32),
        image=np.zeros((1, h, w, c), dtype=np.float32),
        ref_audio=np.zeros((cfg.ref_len, cfg.c_audio), dtype=np.float32),
    )


def stack_conditions(conds: list[ConditionSet]):
    text = np.stack([c.text for c in conds])
    image = np.stack([c.image for c in conds])
    ref = np.stack([c.ref_audio for c in conds])
    return text, image, ref


@dataclass
class TokenBatch:
    """Paired token streams entering joint attention.

    ``video`` may be None (audio-only tasks). Positions are integer (t, h, w)
    triples per token; every audio token carries the fixed spatial anchor.
    """

    video: Tensor | None
    audio: Tensor
    video_positions: np.ndarray | None
    audio_positions: np.ndarray
    tv2a_mask: bool = False


class AttentionCapture:
    """Collects joint-attention weights for the requested block indices."""

    def __init__(self, blocks):
        self.blocks = set(blocks)
        self.maps: dict[int, tuple[np.ndarray, int]] = {}

    def record(self, block: int, weights: np.ndarray, n_video: int) -> None:
        if block in self.blocks:
            # first batch element; (heads, n_joint, n_joint)
            self.maps[block] = (weights[0].copy(), n_video)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Xavier-uniform projections; output heads and adaLN maps start at zero."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d = cfg.model_dim

    def xavier(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    store.add("time_mlp.w1", xavier(d, d))
    store.add("time_mlp.b1", zeros(d))
    store.add("time_mlp.w2", xavier(d, d))
    store.add("time_mlp.b2", zeros(d))

    store.add("video.patch_in.w", xavier(cfg.patch_volume, d))
    store.add("video.patch_in.b", zeros(d))
    store.add("audio.frame_in.w", xavier(cfg.c_audio, d))
    store.add("audio.frame_in.b", zeros(d))

    hidden = cfg.ffn_mult * d
    for i in range(cfg.n_blocks):
        for s in STREAMS:
            p = f"{s}.blocks.{i}"
            for name in ("wq", "wk", "wv", "wo"):
                store.add(f"{p}.joint.{name}", xavier(d, d))
            store.add(f"{p}.cross.wq", xavier(d, d))
            store.add(f"{p}.cross.text_wk", xavier(cfg.text_dim, d))
            store.add(f"{p}.cross.text_wv", xavier(cfg.text_dim, d))
            store.add(f"{p}.cross.ref_wk", xavier(cfg.c_audio, d))
            store.add(f"{p}.cross.ref_wv", xavier(cfg.c_audio, d))
            store.add(f"{p}.ffn.w1", xavier(d, hidden))
            store.add(f"{p}.ffn.b1", zeros(hidden))
            store.add(f"{p}.ffn.w2", xavier(hidden, d))
            store.add(f"{p}.ffn.b2", zeros(d))
            store.add(f"{p}.adaln.w", zeros(d, 9 * d))
            store.add(f"{p}.adaln.b", zeros(9 * d))

    store.add("video.head.w", zeros(d, cfg.patch_volume))
    store.add("video.head.b", zeros(cfg.patch_volume))
    store.add("audio.head.w", zeros(d, cfg.c_audio))
    store.add("audio.head.b", zeros(cfg.c_audio))
    return store


def block_param_shapes(params: ParamStore, stream: str) -> dict[str, tuple]:
    """Shapes of the per-block parameters of one stream, keyed without prefix."""
    prefix = f"{stream}.blocks."
    return {
        name[len(stream) + 1:]: params[name].shape
        for name in params.names()
        if name.startswith(prefix)
    }


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    if b is not None:
        y = T.add(y, b)
    return y


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _modulate(x: Tensor, shift: Tensor, scl: Tensor) -> Tensor:
    return T.add(T.mul(x, T.add(scl, 1.0)), shift)


def timestep_embed(params: ParamStore, cfg: ModelConfig, t) -> Tensor:
    """Sinusoidal features of t*1000 through a two-layer MLP -> (B, model_dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = cfg.model_dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * 1000.0 * freqs
    feat = Tensor(np.concatenate([np.cos(args), np.sin(args)], axis=1))
    h = T.gelu(_linear(feat, params["time_mlp.w1"], params["time_mlp.b1"]))
    return _linear(h, params["time_mlp.w2"], params["time_mlp.b2"])


def _tv2a_attention_mask(n_video: int, n_audio: int) -> np.ndarray:
    """Video query rows may not attend audio key columns; audio sees all."""
    n = n_video + n_audio
    mask = np.ones((n, n), dtype=bool)
    mask[:n_video, n_video:] = False
    return mask


def joint_attention(
    batch: TokenBatch,
    params: ParamStore,
    block: int,
    cfg: ModelConfig,
    rope_cfg: RopeConfig,
    tables: tuple[RotationTable | None, RotationTable] | None = None,
    capture: AttentionCapture | None = None,
):
    """Joint attention over the concatenated streams -> (video_out, audio_out).

    Per-stream Q/K/V/O projections; rotary embedding on Q and K; keys and
    values concatenated video-first. With the TV2A flag, video queries are
    blocked from audio keys while audio queries attend everything.
    """
    if tables is None:
        video_tab = (
            RotationTable(angle_table(batch.video_positions.astype(np.float64), rope_cfg))
            if batch.video is not None
            else None
        )
        audio_tab = RotationTable(
            angle_table(audio_angle_positions(batch.audio.shape[1], rope_cfg), rope_cfg)
        )
    else:
        video_tab, audio_tab = tables

    def project(x, tab, stream):
        p = f"{stream}.blocks.{block}.joint"
        q = tab.apply(_split_heads(_linear(x, params[f"{p}.wq"]), cfg.n_heads))
        k = tab.apply(_split_heads(_linear(x, params[f"{p}.wk"]), cfg.n_heads))
        v = _split_heads(_linear(x, params[f"{p}.wv"]), cfg.n_heads)
        return q, k, v

    qa, ka, va = project(batch.audio, audio_tab, "audio")
    n_audio = batch.audio.shape[1]
    if batch.video is None:
        if n_audio == 0:
            raise T.ShapeError("joint attention over an empty sequence")
        q, k, v = qa, ka, va
        n_video = 0
    else:
        qv, kv, vv = project(batch.video, video_tab, "video")
        n_video = batch.video.shape[1]
        q = T.concat([qv, qa], axis=2)
        k = T.concat([kv, ka], axis=2)
        v = T.concat([vv, va], axis=2)

    logits = T.scale(
        T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.head_dim)
    )
    if batch.tv2a_mask and n_video > 0:
        weights = T.masked_softmax(logits, _tv2a_attention_mask(n_video, n_audio), axis=-1)
    else:
        weights = T.softmax(logits, axis=-1)
    if capture is not None:
        capture.record(block, weights.data, n_video)
    out = T.matmul(weights, v)

    audio_rows = T.slice_axis(out, 2, n_video, n_video + n_audio) if n_video else out
    audio_out = _linear(_merge_heads(audio_rows), params[f"audio.blocks.{block}.joint.wo"])
    if n_video == 0:
        return None, audio_out
    video_rows = T.slice_axis(out, 2, 0, n_video)
    video_out = _linear(_merge_heads(video_rows), params[f"video.blocks.{block}.joint.wo"])
    return video_out, audio_out


def dual_cross_attention(
    x: Tensor,
    text: Tensor,
    ref: Tensor,
    params: ParamStore,
    block: int,
    stream: str,
    cfg: ModelConfig,
    query_table: RotationTable,
    text_table: RotationTable,
    ref_table: RotationTable,
) -> Tensor:
    """Attend text and reference-audio conditions separately, then sum.

    The condition key/value projections carry no bias, so an all-zero (null)
    condition contributes an exactly-zero branch output.
    """
    p = f"{stream}.blocks.{block}.cross"
    q = query_table.apply(_split_heads(_linear(x, params[f"{p}.wq"]), cfg.n_heads))

    def branch(cond, wk, wv, tab):
        if cond.data.shape[-1] != params[wk].shape[0]:
            raise T.ShapeError(f"condition width mismatch for {wk}")
        k = tab.apply(_split_heads(_linear(cond, params[wk]), cfg.n_heads))
        v = _split_heads(_linear(cond, params[wv]), cfg.n_heads)
        w = T.softmax(
            T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.head_dim)),
            axis=-1,
        )
        return T.matmul(w, v)

    if text.data.shape[1] != cfg.text_len:
        raise T.ShapeError(f"text condition length must be {cfg.text_len}")
    if ref.data.shape[1] != cfg.ref_len:
        raise T.ShapeError(f"reference condition length must be {cfg.ref_len}")
    out_text = branch(text, f"{p}.text_wk", f"{p}.text_wv", text_table)
    out_ref = branch(ref, f"{p}.ref_wk", f"{p}.ref_wv", ref_table)
    return _merge_heads(T.add(out_text, out_ref))


def block_forward(
    batch: TokenBatch,
    text: Tensor,
    ref: Tensor,
    t_emb: Tensor,
    params: ParamStore,
    block: int,
    cfg: ModelConfig,
    rope_cfg: RopeConfig,
    tables: dict,
    capture: AttentionCapture | None = None,
) -> TokenBatch:
    """One transformer block over both streams.

    x += gate1 * JointAttn(mod1(LN(x)))
    x += gate2 * DualCrossAttn(LN(x), conditions)
    x += gate3 * FFN(mod3(LN(x)))
    with the nine modulation vectors produced per stream from the timestep
    embedding (the cross-attention shift/scale slots exist but its input is
    plain LN, matching the residual formula above).
    """
    mods = {}
    for s in STREAMS:
        p = f"{s}.blocks.{block}"
        nine = _linear(T.gelu(t_emb), params[f"{p}.adaln.w"], params[f"{p}.adaln.b"])
        nine = T.reshape(nine, (t_emb.shape[0], 9, cfg.model_dim))
        mods[s] = [T.slice_axis(nine, 1, j, j + 1) for j in range(9)]

    def attn_input(x, m):
        return _modulate(T.layer_norm(x, axis=-1), m[0], m[1])

    hv = attn_input(batch.video, mods["video"]) if batch.video is not None else None
    ha = attn_input(batch.audio, mods["audio"])
    jv, ja = joint_attention(
        replace(batch, video=hv, audio=ha), params, block, cfg, rope_cfg,
        tables=(tables.get("video"), tables["audio"]), capture=capture,
    )
    xv = T.add(batch.video, T.mul(mods["video"][2], jv)) if batch.video is not None else None
    xa = T.add(batch.audio, T.mul(mods["audio"][2], ja))

    def cross(x, stream, qtab):
        return dual_cross_attention(
            T.layer_norm(x, axis=-1), text, ref, params, block, stream, cfg,
            qtab, tables["text"], tables["ref"],
        )

    if xv is not None:
        xv = T.add(xv, T.mul(mods["video"][5], cross(xv, "video", tables["video"])))
    xa = T.add(xa, T.mul(mods["audio"][5], cross(xa, "audio", tables["audio"])))

    def ffn(x, stream, m):
        p = f"{stream}.blocks.{block}.ffn"
        h = _modulate(T.layer_norm(x, axis=-1), m[6], m[7])
        h = T.gelu(_linear(h, params[f"{p}.w1"], params[f"{p}.b1"]))
        return _linear(h, params[f"{p}.w2"], params[f"{p}.b2"])

    if xv is not None:
        xv = T.add(xv, T.mul(mods["video"][8], ffn(xv, "video", mods["video"])))
    xa = T.add(xa, T.mul(mods["audio"][8], ffn(xa, "audio", mods["audio"])))
    return replace(batch, video=xv, audio=xa)


# ---------------------------------------------------------------------------
# patch helpers
# ---------------------------------------------------------------------------


def video_token_positions(shape, patch) -> np.ndarray:
    """Integer (t, h, w) start positions of each patch, t-major order."""
    t, h, w, _ = shape
    pt, ph, pw = patch
    grid = [
        (it * pt, ih * ph, iw * pw)
        for it in range(t // pt)
        for ih in range(h // ph)
        for iw in range(w // pw)
    ]
    return np.array(grid, dtype=np.int64)


def patchify(video: Tensor, patch) -> Tensor:
    b, t, h, w, c = video.shape
    pt, ph, pw = patch
    x = T.reshape(video, (b, t // pt, pt, h // ph, ph, w // pw, pw, c))
    x = T.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    n = (t // pt) * (h // ph) * (w // pw)
    return T.reshape(x, (b, n, pt * ph * pw * c))


def unpatchify(tokens: Tensor, shape, patch) -> Tensor:
    t, h, w, c = shape
    pt, ph, pw = patch
    b = tokens.shape[0]
    x = T.reshape(tokens, (b, t // pt, h // ph, w // pw, pt, ph, pw, c))
    x = T.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return T.reshape(x, (b, t, h, w, c))


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------


class DualStreamDiT:
    """Parameter store plus forward logic for the dual-stream backbone."""

    def __init__(self, cfg: ModelConfig, params: ParamStore, rope_cfg: RopeConfig | None = None):
        self.cfg = cfg
        self.params = params
        self.rope_cfg = rope_cfg or RopeConfig(
            head_dim=cfg.head_dim, split=default_split(cfg.head_dim)
        )
        self._table_cache: dict = {}

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, rope_cfg: RopeConfig | None = None):
        return cls(cfg, init_params(cfg, seed), rope_cfg)

    # rotation tables depend only on sequence geometry, so cache them
    def _tables(self, video_shape, n_audio: int) -> dict:
        key = (video_shape, n_audio)
        cached = self._table_cache.get(key)
        if cached is not None:
            return cached
        rc = self.rope_cfg
        h0, w0 = rc.audio_anchor
        tables = {}
        if video_shape is not None:
            pos = video_token_positions(video_shape, self.cfg.patch)
            tables["video"] = RotationTable(angle_table(pos.astype(np.float64), rc))
        tables["audio"] = RotationTable(angle_table(audio_angle_positions(n_audio, rc), rc))
        text_pos = np.zeros((self.cfg.text_len, 3))
        text_pos[:, 0] = np.arange(self.cfg.text_len)
        text_pos[:, 1] = h0
        text_pos[:, 2] = w0
        tables["text"] = RotationTable(angle_table(text_pos, rc))
        tables["ref"] = RotationTable(angle_table(audio_angle_positions(self.cfg.ref_len, rc), rc))
        self._table_cache[key] = tables
        return tables

    def forward_batch(
        self,
        video: Tensor | None,
        audio: Tensor,
        t: np.ndarray,
        text: Tensor,
        ref: Tensor,
        task: str = TASK_T2AV,
        capture: AttentionCapture | None = None,
    ):
        """Batched forward pass -> (video velocity | None, audio velocity)."""
        cfg = self.cfg
        params = self.params
        if task not in ALL_TASKS:
            raise ValueError(f"unknown task: {task}")
        video_shape = None
        if video is not None:
            _, tt, hh, ww, cc = video.shape
            pt, ph, pw = cfg.patch
            if cc != cfg.c_video or tt % pt or hh % ph or ww % pw:
                raise T.ShapeError(
                    f"video latent {video.shape[1:]} incompatible with patch {cfg.patch}"
                )
            video_shape = (tt, hh, ww, cc)
        if audio.data.shape[-1] != cfg.c_audio:
            raise T.ShapeError(f"audio channels must be {cfg.c_audio}")

        tables = self._tables(video_shape, audio.shape[1])
        xv = None
        pos_v = None
        if video is not None:
            xv = _linear(patchify(video, cfg.patch), params["video.patch_in.w"], params["video.patch_in.b"])
            pos_v = video_token_positions(video_shape, cfg.patch)
        xa = _linear(audio, params["audio.frame_in.w"], params["audio.frame_in.b"])
        h0, w0 = self.rope_cfg.audio_anchor
        pos_a = np.stack(
            [np.arange(audio.shape[1]), np.full(audio.shape[1], h0), np.full(audio.shape[1], w0)],
            axis=1,
        )
        batch = TokenBatch(
            video=xv,
            audio=xa,
            video_positions=pos_v,
            audio_positions=pos_a,
            tv2a_mask=(task == TASK_TV2A),
        )

        t_emb = timestep_embed(params, cfg, t)
        for i in range(cfg.n_blocks):
            batch = block_forward(
                batch, text, ref, t_emb, params, i, cfg, self.rope_cfg, tables, capture
            )

        v_audio = _linear(
            T.layer_norm(batch.audio, axis=-1), params["audio.head.w"], params["audio.head.b"]
        )
        if batch.video is None:
            return None, v_audio
        head = _linear(
            T.layer_norm(batch.video, axis=-1), params["video.head.w"], params["video.head.b"]
        )
        return unpatchify(head, video_shape, cfg.patch), v_audio

    def velocity(self, video, audio, t, cond: ConditionSet, task: str = TASK_T2AV,
                 capture: AttentionCapture | None = None):
        """Single- or batched-sample forward on numpy arrays -> numpy arrays."""
        batched = audio.ndim == 3
        if not batched:
            audio = audio[None]
            if video is not None:
                video = video[None]
        b = audio.shape[0]
        if cond.text.ndim == 3:
            text, ref = cond.text, cond.ref_audio
        else:
            text = np.broadcast_to(cond.text, (b,) + cond.text.shape)
            ref = np.broadcast_to(cond.ref_audio, (b,) + cond.ref_audio.shape)
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (audio.shape[0],))
        v_video, v_audio = self.forward_batch(
            Tensor(video) if video is not None else None,
            Tensor(audio),
            t,
            Tensor(np.ascontiguousarray(text)),
            Tensor(np.ascontiguousarray(ref)),
            task=task,
            capture=capture,
        )
        vv = v_video.data if v_video is not None else None
        va = v_audio.data
        if not batched:
            vv = vv[0] if vv is not None else None
            va = va[0]
        return vv, va


def model_forward(model: DualStreamDiT, video, audio, t, cond: ConditionSet,
                  task: str = TASK_T2AV):
    """Spec-shaped convenience wrapper: latents in, velocity fields out."""
    return model.velocity(video, audio, t, cond, task)
