"""Dual-tower transformer with asymmetric self-attention over reference/noisy tokens.

Each tower processes one modality's sequence [references; noisy latents].
Reference and noisy tokens are projected by disjoint weight sets, and a
structural mask stops reference rows from attending to noisy columns, so
reference features stay untouched by diffusion noise at every depth.
Cross-modal fusion layers connect the two towers' noisy tokens and can be
masked to an exact identity map during unimodal training.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .binding import ROLE_NOISY, ROLE_REF, SequenceLayout, apply_rope, rope_split_dims
from .config import AblationFlags, Config

# Additive stand-in for -inf; exp() underflows to exactly 0.0 so masked
# attention weights vanish without inf*0 NaNs.
MASK_FILL = -1e9


def materialize_mask(roles: np.ndarray) -> np.ndarray:
    """Dense additive mask: ref rows may not see noisy columns."""
    roles = np.asarray(roles)
    if roles.size == 0:
        raise ValueError("roles must be non-empty")
    ref_rows = (roles == ROLE_REF)[:, None]
    noisy_cols = (roles == ROLE_NOISY)[None, :]
    return np.where(ref_rows & noisy_cols, MASK_FILL, 0.0).astype(np.float32)


_MASK_CACHE: "OrderedDict[tuple, torch.Tensor]" = OrderedDict()


def _additive_mask(layout: SequenceLayout, dtype: torch.dtype) -> torch.Tensor:
    key = (layout.roles.tobytes(), str(dtype))
    hit = _MASK_CACHE.get(key)
    if hit is None:
        hit = torch.from_numpy(materialize_mask(layout.roles)).to(dtype)
        _MASK_CACHE[key] = hit
        if len(_MASK_CACHE) > 128:
            _MASK_CACHE.popitem(last=False)
    else:
        _MASK_CACHE.move_to_end(key)
    return hit


@dataclass
class TokenSequence:
    """Batched tower input: tokens [B, L, D] plus shared per-token layout."""

    tokens: torch.Tensor
    layout: SequenceLayout

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3 or self.tokens.shape[1] != len(self.layout):
            raise ValueError(
                f"tokens [B, L, D] must match layout length {len(self.layout)}, got {tuple(self.tokens.shape)}"
            )
        roles = self.layout.roles
        n_ref = self.layout.n_ref
        if not (np.all(roles[:n_ref] == ROLE_REF) and np.all(roles[n_ref:] == ROLE_NOISY)):
            raise ValueError("reference tokens must precede noisy tokens")
        if n_ref and np.any(self.layout.slots[:n_ref] < 1):
            raise ValueError("every reference token needs an identity slot")


class DecoupledLinear(nn.Module):
    """Two parameter sets for one linear map, routed by token role."""

    def __init__(self, d_in: int, d_out: int) -> None:
        super().__init__()
        self.ref = nn.Linear(d_in, d_out)
        self.noisy = nn.Linear(d_in, d_out)

    def forward(self, x: torch.Tensor, n_ref: int) -> torch.Tensor:
        return torch.cat([self.ref(x[:, :n_ref]), self.noisy(x[:, n_ref:])], dim=1)


class AsymmetricAttention(nn.Module):
    """Multi-head self-attention with decoupled projections and the role mask."""

    def __init__(self, width: int, heads: int, rope_base: float = 10000.0,
                 rope_split: tuple[int, int, int] = (2, 1, 1), use_rope: bool = True) -> None:
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = width // heads
        self.rope_base = rope_base
        self.use_rope = use_rope
        self.split = rope_split_dims(self.d_head, rope_split) if use_rope else None
        self.qkv = DecoupledLinear(width, 3 * width)
        self.out = DecoupledLinear(width, width)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.d_head).transpose(1, 2)

    def forward(self, x: torch.Tensor, layout: SequenceLayout) -> torch.Tensor:
        n_ref = layout.n_ref
        length = len(layout)
        if n_ref == length:
            raise ValueError("sequence has no noisy tokens to denoise")
        q, k, v = (self._heads(part) for part in self.qkv(x, n_ref).chunk(3, dim=-1))
        if self.use_rope:
            q = apply_rope(q, layout.positions, self.split, self.rope_base)
            k = apply_rope(k, layout.positions, self.split, self.rope_base)
        mask = _additive_mask(layout, q.dtype) if n_ref else None
        merged = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(merged.transpose(1, 2).reshape(x.shape), n_ref)


class CrossAttention(nn.Module):
    """Queries from one token set, keys/values from another, RoPE on both."""

    def __init__(self, width: int, heads: int, rope_base: float = 10000.0,
                 rope_split: tuple[int, int, int] = (2, 1, 1), zero_out: bool = False) -> None:
        super().__init__()
        self.heads = heads
        self.d_head = width // heads
        self.rope_base = rope_base
        self.split = rope_split_dims(self.d_head, rope_split)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.d_head).transpose(1, 2)

    def forward(self, x: torch.Tensor, x_pos: np.ndarray, ctx: torch.Tensor, ctx_pos: np.ndarray) -> torch.Tensor:
        q = apply_rope(self._heads(self.q(x)), x_pos, self.split, self.rope_base)
        k = apply_rope(self._heads(self.k(ctx)), ctx_pos, self.split, self.rope_base)
        v = self._heads(self.v(ctx))
        out = F.scaled_dot_product_attention(q, k, v)
        return self.out(out.transpose(1, 2).reshape(x.shape))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int = 64) -> None:
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = t[:, None] * 1000.0 * freqs[None]
        return self.mlp(torch.cat([torch.cos(args), torch.sin(args)], dim=-1))


class TowerBlock(nn.Module):
    """Pre-norm block: asymmetric self-attention, condition cross-attention
    (noisy queries only), shared feed-forward; the noisy path is modulated by
    the timestep, the reference path is not."""

    def __init__(self, cfg: Config) -> None:
        super().__init__()
        m = cfg.model
        width = m.width
        self.attn = AsymmetricAttention(width, m.heads, m.rope_base, m.rope_split)
        self.cross = CrossAttention(width, m.heads, m.rope_base, m.rope_split)
        self.norm1_ref = nn.LayerNorm(width)
        self.norm1_noisy = nn.LayerNorm(width, elementwise_affine=False)
        self.norm_cross = nn.LayerNorm(width, elementwise_affine=False)
        self.norm2_ref = nn.LayerNorm(width)
        self.norm2_noisy = nn.LayerNorm(width, elementwise_affine=False)
        self.ffn = nn.Sequential(nn.Linear(width, m.ffn_mult * width), nn.SiLU(), nn.Linear(m.ffn_mult * width, width))
        self.ada = nn.Linear(width, 9 * width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def _role_norm(self, x: torch.Tensor, n_ref: int, norm_ref: nn.Module, norm_noisy: nn.Module) -> torch.Tensor:
        return torch.cat([norm_ref(x[:, :n_ref]), norm_noisy(x[:, n_ref:])], dim=1)

    def forward(
        self,
        x: torch.Tensor,
        layout: SequenceLayout,
        t_emb: torch.Tensor,
        cond: Optional[torch.Tensor],
        cond_pos: Optional[np.ndarray],
    ) -> torch.Tensor:
        n_ref = layout.n_ref
        mods = self.ada(t_emb).chunk(9, dim=-1)
        (sh_a, sc_a, g_a), (sh_c, sc_c, g_c), (sh_f, sc_f, g_f) = mods[:3], mods[3:6], mods[6:]

        h = self._role_norm(x, n_ref, self.norm1_ref, self.norm1_noisy)
        h = torch.cat([h[:, :n_ref], modulate(h[:, n_ref:], sh_a, sc_a)], dim=1)
        a = self.attn(h, layout)
        x = x + torch.cat([a[:, :n_ref], g_a.unsqueeze(1) * a[:, n_ref:]], dim=1)

        if cond is not None:
            noisy = modulate(self.norm_cross(x[:, n_ref:]), sh_c, sc_c)
            c = self.cross(noisy, layout.positions[n_ref:], cond, cond_pos)
            x = torch.cat([x[:, :n_ref], x[:, n_ref:] + g_c.unsqueeze(1) * c], dim=1)

        h = self._role_norm(x, n_ref, self.norm2_ref, self.norm2_noisy)
        h = torch.cat([h[:, :n_ref], modulate(h[:, n_ref:], sh_f, sc_f)], dim=1)
        f = self.ffn(h)
        return x + torch.cat([f[:, :n_ref], g_f.unsqueeze(1) * f[:, n_ref:]], dim=1)


class FusionBlock(nn.Module):
    """Bidirectional cross-attention between the towers' noisy tokens.

    With gate="masked" the block is skipped outright, so it is the identity
    map bit for bit. Output projections start at zero, so newly activated
    fusion begins as a no-op and learns its contribution.
    """

    def __init__(self, cfg: Config) -> None:
        super().__init__()
        m = cfg.model
        self.norm_v = nn.LayerNorm(m.width, elementwise_affine=False)
        self.norm_a = nn.LayerNorm(m.width, elementwise_affine=False)
        self.v_from_a = CrossAttention(m.width, m.heads, m.rope_base, m.rope_split, zero_out=True)
        self.a_from_v = CrossAttention(m.width, m.heads, m.rope_base, m.rope_split, zero_out=True)

    def forward(
        self,
        xv: Optional[torch.Tensor],
        layout_v: Optional[SequenceLayout],
        xa: Optional[torch.Tensor],
        layout_a: Optional[SequenceLayout],
        gate: str,
    ):
        if gate == "masked" or xv is None or xa is None:
            return xv, xa
        nv, na = layout_v.n_ref, layout_a.n_ref
        pv, pa = layout_v.positions[nv:], layout_a.positions[na:]
        hv, ha = self.norm_v(xv[:, nv:]), self.norm_a(xa[:, na:])
        dv = self.v_from_a(hv, pv, ha, pa)
        da = self.a_from_v(ha, pa, hv, pv)
        xv = torch.cat([xv[:, :nv], xv[:, nv:] + dv], dim=1)
        xa = torch.cat([xa[:, :na], xa[:, na:] + da], dim=1)
        return xv, xa


class FinalLayer(nn.Module):
    """Timestep-modulated norm plus a zero-initialized projection to latent channels."""

    def __init__(self, width: int, out_dim: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.ada = nn.Linear(width, 2 * width)
        self.proj = nn.Linear(width, out_dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        shift, scale = self.ada(t_emb).chunk(2, dim=-1)
        return self.proj(modulate(self.norm(x), shift, scale))


class DualTowerModel(nn.Module):
    """Two towers over [refs; noisy] sequences with stage-gatable fusion.

    Identity embeddings are added to reference tokens inside the forward pass
    (the same table row for both modalities of a slot); ablation flags zero
    the addition without changing any parameter shape.
    """

    def __init__(self, cfg: Config, flags: Optional[AblationFlags] = None) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.flags = flags or AblationFlags()
        m = cfg.model
        self.identity_table = nn.Parameter(torch.zeros(m.k_max, m.width))
        self.t_embed = TimestepEmbedder(m.width)
        self.cond_proj_v = nn.Linear(cfg.cond_feature_dim, m.width)
        self.cond_proj_a = nn.Linear(cfg.cond_feature_dim, m.width)
        self.video_blocks = nn.ModuleList(TowerBlock(cfg) for _ in range(m.blocks))
        self.audio_blocks = nn.ModuleList(TowerBlock(cfg) for _ in range(m.blocks))
        self.fusion = nn.ModuleDict({str(i): FusionBlock(cfg) for i in m.fusion_after})
        self.head_v = FinalLayer(m.width, cfg.codec.video_latent_dim)
        self.head_a = FinalLayer(m.width, cfg.codec.audio_latent_dim)

    def video_parameters(self):
        mods = [self.video_blocks, self.cond_proj_v, self.head_v]
        for mod in mods:
            yield from mod.parameters()

    def audio_parameters(self):
        mods = [self.audio_blocks, self.cond_proj_a, self.head_a]
        for mod in mods:
            yield from mod.parameters()

    def _inject_identity(self, x: torch.Tensor, layout: SequenceLayout) -> torch.Tensor:
        n_ref = layout.n_ref
        if n_ref == 0:
            return x
        table = self.identity_table
        if not self.flags.identity_embeddings:
            table = table * 0.0
        rows = torch.as_tensor(layout.slots[:n_ref], dtype=torch.long, device=x.device) - 1
        add = table[rows].to(x.dtype)
        return torch.cat([x[:, :n_ref] + add, x[:, n_ref:]], dim=1)

    def forward(
        self,
        video: Optional[TokenSequence],
        audio: Optional[TokenSequence],
        cond_feats: torch.Tensor,
        cond_pos: np.ndarray,
        t: torch.Tensor,
        fusion_gate: str = "active",
    ) -> tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """Velocity predictions at the noisy-token positions of each tower.

        Returns (video tokens [B, L_noisy, Dv] or None, audio tokens
        [B, L_noisy, Da] or None).
        """
        if fusion_gate not in ("active", "masked"):
            raise ValueError(f"fusion_gate must be active|masked, got {fusion_gate!r}")
        t_emb = self.t_embed(t)
        xv = xa = None
        cv = ca = None
        if video is not None:
            xv = self._inject_identity(video.tokens, video.layout)
            cv = self.cond_proj_v(cond_feats)
        if audio is not None:
            xa = self._inject_identity(audio.tokens, audio.layout)
            ca = self.cond_proj_a(cond_feats)
        for i in range(self.cfg.model.blocks):
            if xv is not None:
                xv = self.video_blocks[i](xv, video.layout, t_emb, cv, cond_pos)
            if xa is not None:
                xa = self.audio_blocks[i](xa, audio.layout, t_emb, ca, cond_pos)
            if str(i) in self.fusion:
                xv, xa = self.fusion[str(i)](
                    xv, video.layout if video else None, xa, audio.layout if audio else None, fusion_gate
                )
        u_v = self.head_v(xv[:, video.layout.n_ref :], t_emb) if xv is not None else None
        u_a = self.head_a(xa[:, audio.layout.n_ref :], t_emb) if xa is not None else None
        return u_v, u_a
