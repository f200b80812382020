"""A synthetic audiovisual world with exact oracles.

A hidden phoneme string drives both latent streams: each video frame gets a
viseme template stamped onto a fixed mouth region on top of a per-sample
identity background, and each audio frame gets the matching phoneme template
plus a speaker-timbre vector living in a subspace orthogonal to all phoneme
content. Because the generators are template banks, synchronization, text
adherence, and timbre similarity can be measured exactly by nearest-template
decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConditionSet, ModelConfig


@dataclass(frozen=True)
class ToyWorldConfig:
    alphabet: int = 4
    frames: int = 8
    height: int = 4
    width: int = 4
    c_video: int = 8
    audio_rate: int = 2
    c_audio: int = 8
    timbre_dim: int = 4
    mouth: tuple[tuple[int, int], ...] = ((2, 1), (2, 2), (3, 1), (3, 2))
    noise_std: float = 0.05
    text_len: int = 16
    ref_len: int = 8
    ref_frames: tuple[int, int] = (4, 8)
    text_dim: int = 8

    def __post_init__(self):
        if self.alphabet < 2:
            raise ValueError("alphabet size must be >= 2")
        if self.alphabet + self.timbre_dim > self.c_audio:
            raise ValueError("phoneme templates plus timbre subspace must fit in c_audio")
        for (h, w) in self.mouth:
            if not (0 <= h < self.height and 0 <= w < self.width):
                raise ValueError(f"mouth cell {(h, w)} outside the {self.height}x{self.width} grid")
        if self.text_len < self.frames:
            raise ValueError("text_len must cover one row per video frame")
        if not (1 <= self.ref_frames[0] <= self.ref_frames[1]):
            raise ValueError("ref frame range must be an increasing positive pair")

    @property
    def audio_frames(self) -> int:
        return self.frames * self.audio_rate

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.c_video)

    @property
    def audio_shape(self) -> tuple[int, int]:
        return (self.audio_frames, self.c_audio)

    def model_config(self, **overrides) -> ModelConfig:
        """A ModelConfig whose latent/condition dims match this world."""
        base = dict(
            c_video=self.c_video,
            c_audio=self.c_audio,
            text_dim=self.text_dim,
            text_len=self.text_len,
            ref_len=self.ref_len,
        )
        base.update(overrides)
        return ModelConfig(**base)


def _orthonormal_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """n orthonormal vectors in R^dim (n <= dim), deterministic from rng."""
    if n > dim:
        raise ValueError("cannot orthonormalize more vectors than dimensions")
    m = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    return np.ascontiguousarray(q[:, :n].T.astype(np.float32))


@dataclass
class TemplateBank:
    """Deterministic template banks generated from (world, seed)."""

    visemes: np.ndarray        # (A, mouth_cells * c_video)
    phonemes: np.ndarray       # (A, c_audio)
    timbre_basis: np.ndarray   # (timbre_dim, c_audio), orthonormal rows
    timbres: np.ndarray        # (n_timbres, timbre_dim), orthonormal rows
    identities: np.ndarray     # (n_identities, H, W, c_video), zero at mouth
    text_embed: np.ndarray     # (A, text_dim), orthonormal rows
    seed: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def n_timbres(self) -> int:
        return self.timbres.shape[0]

    @property
    def n_identities(self) -> int:
        return self.identities.shape[0]

    def timbre_embedding(self, timbre_id: int) -> np.ndarray:
        """The timbre vector embedded into audio-channel space."""
        return (self.timbres[timbre_id] @ self.timbre_basis).astype(np.float32)


def make_bank(world: ToyWorldConfig, seed: int = 0, n_identities: int = 4,
              n_timbres: int | None = None) -> TemplateBank:
    rng = np.random.default_rng([seed, 0xBA])
    a = world.alphabet
    if n_timbres is None:
        n_timbres = world.timbre_dim
    visemes = _orthonormal_rows(rng, a, len(world.mouth) * world.c_video)
    # phoneme templates and the timbre subspace come from one orthonormal
    # frame of audio-channel space, so content and style never mix
    frame = _orthonormal_rows(rng, a + world.timbre_dim, world.c_audio)
    phonemes = frame[:a]
    timbre_basis = frame[a:]
    timbres = _orthonormal_rows(rng, n_timbres, world.timbre_dim)
    identities = rng.normal(0.0, 0.15, (n_identities, world.height, world.width, world.c_video))
    for (h, w) in world.mouth:
        identities[:, h, w, :] = 0.0
    text_embed = _orthonormal_rows(rng, a, world.text_dim)
    bank = TemplateBank(
        visemes=visemes,
        phonemes=phonemes,
        timbre_basis=timbre_basis,
        timbres=timbres,
        identities=identities.astype(np.float32),
        text_embed=text_embed,
        seed=seed,
    )
    _check_separability(bank, world)
    return bank


def _check_separability(bank: TemplateBank, world: ToyWorldConfig) -> None:
    for name, templates in (("viseme", bank.visemes), ("phoneme", bank.phonemes)):
        a = templates.shape[0]
        for i in range(a):
            for j in range(i + 1, a):
                dist = float(np.linalg.norm(templates[i] - templates[j]))
                if dist <= 6.0 * world.noise_std:
                    raise ValueError(
                        f"{name} templates {i},{j} too close ({dist:.3f}) for "
                        f"noise_std={world.noise_std}"
                    )


@dataclass
class PairedSample:
    phonemes: np.ndarray       # (frames,) int
    video: np.ndarray          # (frames, H, W, c_video)
    audio: np.ndarray          # (audio_frames, c_audio)
    text: np.ndarray           # (text_len, text_dim)
    identity: np.ndarray       # (1, H, W, c_video) = rendered first frame
    ref_audio: np.ndarray      # (ref_len, c_audio)
    timbre_id: int
    identity_id: int

    def condition(self) -> ConditionSet:
        return ConditionSet(
            text=self.text.copy(), image=self.identity.copy(), ref_audio=self.ref_audio.copy()
        )


def render_audio_frames(phonemes: np.ndarray, timbre_id: int, bank: TemplateBank,
                        world: ToyWorldConfig, rng: np.random.Generator,
                        frames_per_symbol: int) -> np.ndarray:
    """Phoneme template + timbre embedding per frame, plus noise."""
    n = len(phonemes) * frames_per_symbol
    out = np.repeat(bank.phonemes[phonemes], frames_per_symbol, axis=0).astype(np.float32)
    out += bank.timbre_embedding(timbre_id)
    out += rng.normal(0.0, world.noise_std, (n, world.c_audio)).astype(np.float32)
    return out


def make_paired_sample(rng: np.random.Generator, world: ToyWorldConfig,
                       bank: TemplateBank) -> PairedSample:
    a = world.alphabet
    phonemes = rng.integers(0, a, world.frames)
    identity_id = int(rng.integers(0, bank.n_identities))
    timbre_id = int(rng.integers(0, bank.n_timbres))

    video = np.broadcast_to(
        bank.identities[identity_id], world.video_shape
    ).astype(np.float32).copy()
    mouth_v = bank.visemes[phonemes].reshape(world.frames, len(world.mouth), world.c_video)
    for ci, (h, w) in enumerate(world.mouth):
        video[:, h, w, :] += mouth_v[:, ci, :]
    video += rng.normal(0.0, world.noise_std, world.video_shape).astype(np.float32)

    audio = render_audio_frames(phonemes, timbre_id, bank, world, rng, world.audio_rate)

    text = np.zeros((world.text_len, world.text_dim), dtype=np.float32)
    text[: world.frames] = bank.text_embed[phonemes]

    identity = video[0:1].copy()

    lo, hi = world.ref_frames
    ref_len_raw = int(rng.integers(lo, hi + 1))
    ref_phonemes = rng.integers(0, a, ref_len_raw)
    ref_raw = render_audio_frames(ref_phonemes, timbre_id, bank, world, rng, 1)
    ref = np.zeros((world.ref_len, world.c_audio), dtype=np.float32)
    keep = min(world.ref_len, ref_len_raw)
    ref[:keep] = ref_raw[:keep]

    return PairedSample(
        phonemes=phonemes.astype(np.int64),
        video=video,
        audio=audio,
        text=text,
        identity=identity,
        ref_audio=ref,
        timbre_id=timbre_id,
        identity_id=identity_id,
    )


# ---------------------------------------------------------------------------
# oracle decoders and metrics
# ---------------------------------------------------------------------------


def mouth_patch(frame: np.ndarray, world: ToyWorldConfig) -> np.ndarray:
    """Flatten the mouth-region cells of one video frame."""
    return np.concatenate([frame[h, w, :] for (h, w) in world.mouth])


def strip_timbre(vec: np.ndarray, bank: TemplateBank) -> np.ndarray:
    """Project the timbre subspace out of an audio frame."""
    coeff = bank.timbre_basis @ vec
    return vec - bank.timbre_basis.T @ coeff


def nearest_phoneme(vec: np.ndarray, bank: TemplateBank, which: str) -> int:
    """Nearest-template id by L2 distance; ties resolve to the lowest id."""
    if which == "viseme":
        templates = bank.visemes
    elif which == "phoneme":
        templates = bank.phonemes
        vec = strip_timbre(np.asarray(vec, dtype=np.float64), bank)
    else:
        raise ValueError("which must be 'viseme' or 'phoneme'")
    dists = np.linalg.norm(templates.astype(np.float64) - np.asarray(vec, dtype=np.float64), axis=1)
    return int(np.argmin(dists))


def decode_video(video: np.ndarray, bank: TemplateBank, world: ToyWorldConfig) -> np.ndarray:
    return np.array(
        [nearest_phoneme(mouth_patch(frame, world), bank, "viseme") for frame in video]
    )


def decode_audio(audio: np.ndarray, bank: TemplateBank) -> np.ndarray:
    return np.array([nearest_phoneme(f, bank, "phoneme") for f in audio])


def _majority(ids: np.ndarray) -> int:
    counts = np.bincount(ids)
    return int(np.argmax(counts))


def decode_audio_per_video_frame(audio: np.ndarray, bank: TemplateBank,
                                 world: ToyWorldConfig) -> np.ndarray:
    """Majority phoneme over each group of audio frames covering one video frame."""
    per_frame = decode_audio(audio, bank)
    r = world.audio_rate
    return np.array([_majority(per_frame[i * r : (i + 1) * r]) for i in range(world.frames)])


def sync_agreement(video: np.ndarray, audio: np.ndarray, bank: TemplateBank,
                   world: ToyWorldConfig) -> float:
    """Fraction of video frames whose viseme matches the audio majority phoneme."""
    if audio.shape[0] != world.audio_rate * video.shape[0]:
        raise ValueError("audio length must be audio_rate * video length")
    vid = decode_video(video, bank, world)
    aud = decode_audio_per_video_frame(audio, bank, world)
    return float(np.mean(vid == aud))


def timbre_similarity(audio: np.ndarray, timbre_id: int, bank: TemplateBank) -> float:
    """Cosine between the mean timbre-subspace projection and the target timbre."""
    coeffs = audio @ bank.timbre_basis.T
    mean = coeffs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        return 0.0
    return float(np.dot(mean / norm, bank.timbres[timbre_id]))


def text_adherence(video: np.ndarray, audio: np.ndarray, phonemes: np.ndarray,
                   bank: TemplateBank, world: ToyWorldConfig) -> dict:
    """Per-modality fraction of frames whose decoded symbol matches the prompt."""
    vid = decode_video(video, bank, world)
    aud = decode_audio_per_video_frame(audio, bank, world)
    video_acc = float(np.mean(vid == phonemes))
    audio_acc = float(np.mean(aud == phonemes))
    return {
        "video": video_acc,
        "audio": audio_acc,
        "mean": 0.5 * (video_acc + audio_acc),
    }


def mouth_token_mask(world: ToyWorldConfig, patch) -> np.ndarray:
    """Boolean mask over video tokens whose patch overlaps the mouth region."""
    from .model import video_token_positions

    positions = video_token_positions(world.video_shape, patch)
    _, ph, pw = patch
    mouth = set(world.mouth)
    mask = []
    for (_, h0, w0) in positions:
        cells = {(h, w) for h in range(h0, h0 + ph) for w in range(w0, w0 + pw)}
        mask.append(bool(cells & mouth))
    return np.array(mask, dtype=bool)


# ---------------------------------------------------------------------------
# image-style renders for inspection
# ---------------------------------------------------------------------------


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Min-max normalize to the 0..255 byte range."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_video_frame(frame: np.ndarray) -> np.ndarray:
    """Lay the channels of one (H, W, C) frame out side by side."""
    h, w, c = frame.shape
    panel = np.concatenate([frame[:, :, k] for k in range(c)], axis=1)
    return to_uint8(panel)


def render_audio(audio: np.ndarray) -> np.ndarray:
    """Channel-by-time panel for an (frames, channels) audio latent."""
    return to_uint8(audio.T)
