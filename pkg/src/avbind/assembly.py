"""Glue between world scenes and tower token sequences.

A PreparedScene carries pre-tokenized references and condition tokens; the
Assembler turns groups of layout-compatible scenes into batched tower inputs
for training steps and sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .binding import SequenceLayout, TokenLayout, assign_positions, grid_shape
from .config import Config
from .flow import euler_integrate, sample_timesteps
from .latents import Codecs, ReferenceSignal
from .seeding import derived_seed
from .towers import DualTowerModel, TokenSequence
from .world import Scene, condition_features


@dataclass
class PreparedScene:
    """One scene, tokenized and ready to batch."""

    scene_id: int
    k: int
    mix: str
    spec: object  # SceneSpec, kept for decoding/eval
    x0_video: Optional[np.ndarray]  # [T, Hp, Wp, Dv] float32
    x0_audio: Optional[np.ndarray]  # [Ta, Da] float32
    vis_ref_tokens: Optional[np.ndarray]  # [K, L_slot, D] float32
    vis_ref_grid: Optional[tuple[int, int]]  # packed canvas patch (rows, cols)
    aud_ref_tokens: Optional[np.ndarray]  # [K, steps, D] float32
    aud_ref_steps: int

    @property
    def group_key(self) -> tuple:
        return (
            self.k,
            self.x0_video is not None,
            self.x0_audio is not None,
            self.vis_ref_grid,
            self.aud_ref_steps,
        )


def prepare_scene(scene: Scene, cfg: Config, codecs: Codecs) -> PreparedScene:
    spec = scene.spec
    x0_v = x0_a = None
    vis_tokens = aud_tokens = None
    vis_grid = None
    aud_steps = 0
    if scene.video is not None:
        x0_v = codecs.encode_video(scene.video).data.astype(np.float32)
    if scene.audio is not None:
        x0_a = codecs.encode_audio(scene.audio).data.astype(np.float32)
    if scene.ref_images:
        per_slot = []
        for subj in sorted(spec.subjects, key=lambda s: s.slot):
            images = scene.ref_images[subj.slot]
            ref = ReferenceSignal("visual", list(images), identity_slot=subj.slot)
            per_slot.append(codecs.tokenize_reference(ref).astype(np.float32))
            rows, cols = grid_shape(len(images))
            patches = cfg.world.ref_image_size // cfg.codec.patch_size
            vis_grid = (rows * patches, cols * patches)
        vis_tokens = np.stack(per_slot)
    if scene.ref_waves:
        per_slot = []
        for subj in sorted(spec.subjects, key=lambda s: s.slot):
            ref = ReferenceSignal("auditory", scene.ref_waves[subj.slot], identity_slot=subj.slot)
            per_slot.append(codecs.tokenize_reference(ref).astype(np.float32))
        aud_tokens = np.stack(per_slot)
        aud_steps = aud_tokens.shape[1]
    return PreparedScene(
        scene_id=spec.scene_id,
        k=spec.k,
        mix=spec.mix,
        spec=spec,
        x0_video=x0_v,
        x0_audio=x0_a,
        vis_ref_tokens=vis_tokens,
        vis_ref_grid=vis_grid,
        aud_ref_tokens=aud_tokens,
        aud_ref_steps=aud_steps,
    )


@dataclass
class AssembledBatch:
    video: Optional[TokenSequence]
    audio: Optional[TokenSequence]
    cond_feats: torch.Tensor  # [B, K, F]
    cond_pos: np.ndarray  # [K, 3]
    t: torch.Tensor  # [B]
    video_grid: Optional[tuple[int, int, int]]
    target_v: Optional[torch.Tensor] = None
    target_a: Optional[torch.Tensor] = None


class Assembler:
    """Builds batched tower inputs for groups of layout-compatible scenes."""

    def __init__(self, cfg: Config, anchors_enabled: bool = True) -> None:
        cfg.validate()
        self.cfg = cfg
        self.anchors_enabled = anchors_enabled
        self.codecs = Codecs(cfg.codec, cfg.model.width)
        self.lift_v = torch.tensor(self.codecs.video_lift, dtype=torch.float32)
        self.lift_a = torch.tensor(self.codecs.audio_lift, dtype=torch.float32)
        w = cfg.world
        self.video_grid = (w.latent_frames, w.frame_h // cfg.codec.patch_size, w.frame_w // cfg.codec.patch_size)
        self.audio_scale = w.fps_latent / w.tokens_per_second
        self._layout_cache: dict[tuple, tuple[Optional[SequenceLayout], Optional[SequenceLayout]]] = {}

    def prepare(self, scene: Scene) -> PreparedScene:
        return prepare_scene(scene, self.cfg, self.codecs)

    def layouts(self, ps: PreparedScene) -> tuple[Optional[SequenceLayout], Optional[SequenceLayout]]:
        cached = self._layout_cache.get(ps.group_key)
        if cached is not None:
            return cached
        w, m = self.cfg.world, self.cfg.model
        layout = TokenLayout(
            t_video_max=w.latent_frames,
            t_audio_max=w.audio_steps,
            audio_scale=self.audio_scale,
            audio_ref_window=m.audio_ref_window,
            k_max=m.k_max,
            video_grid=self.video_grid if ps.x0_video is not None else None,
            audio_steps=w.audio_steps if ps.x0_audio is not None else None,
            visual_refs=[(s + 1, *ps.vis_ref_grid) for s in range(ps.k)] if ps.vis_ref_tokens is not None else [],
            audio_refs=[(s + 1, ps.aud_ref_steps) for s in range(ps.k)] if ps.aud_ref_tokens is not None else [],
        )
        result = assign_positions(layout)
        self._layout_cache[ps.group_key] = result
        return result

    def conditions(self, group: Sequence[PreparedScene]) -> tuple[torch.Tensor, np.ndarray]:
        """Batched condition tokens [B, K, F] and per-item positions [B, K, 3]."""
        feats, pos = [], []
        for ps in group:
            f, p = condition_features(ps.spec, self.cfg, self.anchors_enabled)
            feats.append(f.astype(np.float32))
            pos.append(p)
        return torch.tensor(np.stack(feats)), np.stack(pos)

    def tower_tokens(
        self,
        group: Sequence[PreparedScene],
        x_v: Optional[torch.Tensor],
        x_a: Optional[torch.Tensor],
        layouts: tuple[Optional[SequenceLayout], Optional[SequenceLayout]],
    ) -> tuple[Optional[TokenSequence], Optional[TokenSequence]]:
        layout_v, layout_a = layouts
        video_seq = audio_seq = None
        b = len(group)
        if x_v is not None:
            refs = torch.tensor(np.stack([ps.vis_ref_tokens.reshape(-1, self.cfg.model.width) for ps in group]))
            noisy = x_v.reshape(b, -1, self.cfg.codec.video_latent_dim) @ self.lift_v
            video_seq = TokenSequence(torch.cat([refs, noisy], dim=1), layout_v)
        if x_a is not None:
            refs = torch.tensor(np.stack([ps.aud_ref_tokens.reshape(-1, self.cfg.model.width) for ps in group]))
            noisy = x_a @ self.lift_a
            audio_seq = TokenSequence(torch.cat([refs, noisy], dim=1), layout_a)
        return video_seq, audio_seq

    def flow_batch(self, group: Sequence[PreparedScene], seed: int, step: int) -> AssembledBatch:
        """Interpolated training batch at per-item uniform times."""
        gen = torch.Generator().manual_seed(derived_seed(seed, 1, step))
        b = len(group)
        t = sample_timesteps(b, gen)
        layouts = self.layouts(group[0])
        x_t_v = target_v = x_t_a = target_a = None
        if group[0].x0_video is not None:
            x0 = torch.tensor(np.stack([ps.x0_video for ps in group]))
            x1 = torch.randn(x0.shape, generator=gen)
            tt = t.view(b, 1, 1, 1, 1)
            x_t_v = (1 - tt) * x0 + tt * x1
            target_v = x1 - x0
        if group[0].x0_audio is not None:
            x0 = torch.tensor(np.stack([ps.x0_audio for ps in group]))
            x1 = torch.randn(x0.shape, generator=gen)
            tt = t.view(b, 1, 1)
            x_t_a = (1 - tt) * x0 + tt * x1
            target_a = x1 - x0
        video_seq, audio_seq = self.tower_tokens(group, x_t_v, x_t_a, layouts)
        cond_feats, cond_pos = self.conditions(group)
        return AssembledBatch(
            video=video_seq,
            audio=audio_seq,
            cond_feats=cond_feats,
            cond_pos=cond_pos,
            t=t,
            video_grid=self.video_grid,
            target_v=target_v,
            target_a=target_a,
        )


def forward_towers(
    model: DualTowerModel,
    assembler: Assembler,
    batch: AssembledBatch,
    fusion_gate: str = "active",
) -> tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
    """Velocity predictions reshaped to latent layouts ([B,T,Hp,Wp,Dv], [B,Ta,Da])."""
    u_v, u_a = model(batch.video, batch.audio, batch.cond_feats, batch.cond_pos, batch.t, fusion_gate)
    if u_v is not None:
        b = u_v.shape[0]
        t_len, hp, wp = batch.video_grid
        u_v = u_v.reshape(b, t_len, hp, wp, -1)
    return u_v, u_a


@torch.no_grad()
def sample_scenes(
    model: DualTowerModel,
    assembler: Assembler,
    group: Sequence[PreparedScene],
    steps: int,
    seed: int,
    fusion_gate: str = "active",
    guidance_scale: float = 0.0,
) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Euler-integrate the learned field from per-scene seeded noise.

    Noise is keyed by (seed, scene_id), so results do not depend on batch
    grouping. ``guidance_scale`` is accepted as a hook but unused at 0.0.
    """
    del guidance_scale  # classifier-free guidance intentionally not wired up
    model.eval()
    cfg = assembler.cfg
    layouts = assembler.layouts(group[0])
    cond_feats, cond_pos = assembler.conditions(group)
    w = cfg.world
    has_video = group[0].x0_video is not None or group[0].vis_ref_tokens is not None
    has_audio = group[0].x0_audio is not None or group[0].aud_ref_tokens is not None
    x_v = x_a = None
    grid = assembler.video_grid
    if has_video:
        shape = (grid[0], grid[1], grid[2], cfg.codec.video_latent_dim)
        x_v = torch.stack(
            [torch.randn(shape, generator=torch.Generator().manual_seed(derived_seed(seed, 2, ps.scene_id))) for ps in group]
        )
    if has_audio:
        shape = (w.audio_steps, cfg.codec.audio_latent_dim)
        x_a = torch.stack(
            [torch.randn(shape, generator=torch.Generator().manual_seed(derived_seed(seed, 3, ps.scene_id))) for ps in group]
        )

    def velocity(state, t):
        sv, sa = state
        video_seq, audio_seq = assembler.tower_tokens(group, sv, sa, layouts)
        t_vec = torch.full((len(group),), t, dtype=torch.float32)
        u_v, u_a = model(video_seq, audio_seq, cond_feats, cond_pos, t_vec, fusion_gate)
        if u_v is not None:
            u_v = u_v.reshape(sv.shape)
        return u_v, u_a

    final_v, final_a = euler_integrate(velocity, (x_v, x_a), steps)
    return (
        final_v.numpy().astype(np.float64) if final_v is not None else None,
        final_a.numpy().astype(np.float64) if final_a is not None else None,
    )


def load_prepared_dataset(manifest_path: str | Path, cfg: Config, anchors_enabled: bool = True):
    """Load every manifest row into PreparedScenes (refs tokenized once)."""
    from .world import load_manifest, load_scene_row

    root = Path(manifest_path).parent
    codecs = Codecs(cfg.codec, cfg.model.width)
    prepared = []
    for row in load_manifest(manifest_path):
        scene = load_scene_row(row, root)
        prepared.append(prepare_scene(scene, cfg, codecs))
    return prepared
