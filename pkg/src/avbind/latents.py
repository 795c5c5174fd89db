"""Deterministic, invertible latent codecs for both modalities.

Learned compressors are deliberately replaced with fixed orthonormal linear
maps (patchify for video, frame stacking for audio) so that anything the
model generates can be decoded exactly and scored against the world's
identity codes. Codec matrices are seeded constants, never trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .binding import pack_multiview
from .config import CodecConfig


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    # fix signs so the factorization is unique
    return q * np.sign(np.diag(r))


@dataclass
class VideoLatent:
    """Latent frames x spatial patches x channels, plus the latent frame rate."""

    data: np.ndarray  # [T, Hp, Wp, Dv]
    fps_latent: float

    def __post_init__(self) -> None:
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ValueError(f"video latent must be [T, H, W, D] with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("video latent contains non-finite entries")


@dataclass
class AudioLatent:
    """Latent steps x channels, plus the latent token rate."""

    data: np.ndarray  # [Ta, Da]
    tokens_per_second: float

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"audio latent must be [T, D] with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("audio latent contains non-finite entries")


@dataclass
class ReferenceSignal:
    """Raw identity control signal for one subject slot.

    Visual payloads are one or more images [H, W, C] (multi-view supported);
    auditory payloads are a waveform-like array [N, C].
    """

    modality: str  # visual | auditory
    payload: Sequence[np.ndarray] | np.ndarray
    identity_slot: int

    def __post_init__(self) -> None:
        if self.modality not in ("visual", "auditory"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.identity_slot < 1:
            raise ValueError("identity_slot must be >= 1")
        if self.modality == "visual":
            if len(self.payload) == 0:
                raise ValueError("visual reference needs at least one image")
            shapes = {img.shape for img in self.payload}
            if len(shapes) != 1:
                raise ValueError(f"reference images must share dimensions, got {sorted(shapes)}")


class Codecs:
    """Fixed orthonormal codecs plus the projections into the model width.

    ``encode -> decode`` round-trips exactly (up to float error) and both maps
    are linear. The width projections have orthonormal rows, so tokens can be
    projected back to latent space with the transpose.
    """

    def __init__(self, cfg: CodecConfig, model_width: int) -> None:
        dv, da = cfg.video_latent_dim, cfg.audio_latent_dim
        if model_width < max(dv, da):
            raise ValueError(f"model width {model_width} must be >= latent dims ({dv}, {da})")
        self.cfg = cfg
        self.width = model_width
        rng = np.random.default_rng(cfg.projection_seed)
        self._video_mix = _orthogonal(dv, rng)
        self._audio_mix = _orthogonal(da, rng)
        self._video_lift = _orthogonal(model_width, rng)[:dv]  # [Dv, D], orthonormal rows
        self._audio_lift = _orthogonal(model_width, rng)[:da]

    @property
    def video_lift(self) -> np.ndarray:
        return self._video_lift

    @property
    def audio_lift(self) -> np.ndarray:
        return self._audio_lift

    # --- video -------------------------------------------------------------

    def encode_video(self, frames: np.ndarray, fps_latent: float = 0.0) -> VideoLatent:
        p, c = self.cfg.patch_size, self.cfg.video_channels
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[3] != c:
            raise ValueError(f"expected frames [T, H, W, {c}], got {frames.shape}")
        t, h, w, _ = frames.shape
        if h % p or w % p:
            raise ValueError(f"frame dims ({h}, {w}) not divisible by patch size {p}")
        patches = frames.reshape(t, h // p, p, w // p, p, c)
        patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(t, h // p, w // p, p * p * c)
        return VideoLatent(patches @ self._video_mix, fps_latent)

    def decode_video(self, latent: VideoLatent) -> np.ndarray:
        p, c = self.cfg.patch_size, self.cfg.video_channels
        t, hp, wp, dv = latent.data.shape
        if dv != self.cfg.video_latent_dim:
            raise ValueError(f"latent channel dim {dv} does not match codec ({self.cfg.video_latent_dim})")
        patches = latent.data @ self._video_mix.T
        patches = patches.reshape(t, hp, wp, p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return patches.reshape(t, hp * p, wp * p, c)

    # --- audio -------------------------------------------------------------

    def encode_audio(self, wave: np.ndarray, tokens_per_second: float = 0.0) -> AudioLatent:
        hop, c = self.cfg.hop, self.cfg.audio_channels
        wave = np.asarray(wave, dtype=np.float64)
        if wave.ndim != 2 or wave.shape[1] != c:
            raise ValueError(f"expected wave [N, {c}], got {wave.shape}")
        n = wave.shape[0]
        if n % hop:
            raise ValueError(f"wave length {n} not divisible by hop {hop}")
        stacked = wave.reshape(n // hop, hop * c)
        return AudioLatent(stacked @ self._audio_mix, tokens_per_second)

    def decode_audio(self, latent: AudioLatent) -> np.ndarray:
        hop, c = self.cfg.hop, self.cfg.audio_channels
        ta, da = latent.data.shape
        if da != self.cfg.audio_latent_dim:
            raise ValueError(f"latent channel dim {da} does not match codec ({self.cfg.audio_latent_dim})")
        stacked = latent.data @ self._audio_mix.T
        return stacked.reshape(ta * hop, c)

    # --- model-width tokens --------------------------------------------------

    def video_tokens(self, latent: VideoLatent) -> np.ndarray:
        t, hp, wp, dv = latent.data.shape
        return (latent.data @ self._video_lift).reshape(t * hp * wp, self.width)

    def video_from_tokens(self, tokens: np.ndarray, grid: tuple[int, int, int]) -> np.ndarray:
        t, hp, wp = grid
        return (tokens @ self._video_lift.T).reshape(t, hp, wp, self.cfg.video_latent_dim)

    def audio_tokens(self, latent: AudioLatent) -> np.ndarray:
        return latent.data @ self._audio_lift

    def audio_from_tokens(self, tokens: np.ndarray) -> np.ndarray:
        return tokens @ self._audio_lift.T

    # --- references ----------------------------------------------------------

    def tokenize_reference(self, ref: ReferenceSignal) -> np.ndarray:
        """Project a reference signal to model-width tokens.

        Visual references are packed into a near-square grid first, then
        patchified row-major over the packed canvas (empty cells included);
        auditory references yield one token per latent step.
        """
        if ref.modality == "visual":
            canvas, _ = pack_multiview(list(ref.payload))
            latent = self.encode_video(canvas[np.newaxis])
            return self.video_tokens(latent)
        return self.audio_tokens(self.encode_audio(np.asarray(ref.payload)))
