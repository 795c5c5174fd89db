"""Identity embeddings, reference packing, and the structured positional scheme.

Reference tokens live on a virtual extension of the generation timeline:
visual references of slot k sit one frame past the video window (plus k-1),
audio references occupy per-slot windows past the audio window, expressed on
the video-aligned timeline so slot anchors line up across modalities. Rotary
embeddings are factorized over (t, h, w) so attention sees only coordinate
differences.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch

ROLE_REF = 0
ROLE_NOISY = 1


class Position3D(NamedTuple):
    t: int
    h: int
    w: int


@dataclass
class IdentityEmbeddingTable:
    """Learnable per-slot vectors, shared by both modalities of a slot."""

    table: "np.ndarray | torch.Tensor"  # [K_max, D]

    @property
    def k_max(self) -> int:
        return self.table.shape[0]

    def row(self, k: int):
        if not 1 <= k <= self.k_max:
            raise ValueError(f"identity slot {k} out of range 1..{self.k_max}")
        return self.table[k - 1]


def inject_identity(r, k: int, table: IdentityEmbeddingTable):
    """Add slot k's embedding to every token of ``r`` (element-wise, per Eq.-style additive injection).

    The same row is used for visual and auditory tokens of the slot, which is
    what makes it a cross-modal binding signal.
    """
    return r + table.row(k)


def grid_shape(n: int) -> tuple[int, int]:
    """Near-square grid: columns first by ceil(sqrt(n)), rows to fit."""
    if n < 1:
        raise ValueError("need at least one image")
    cols = math.isqrt(n - 1) + 1  # == ceil(sqrt(n))
    rows = -(-n // cols)
    return rows, cols


def pack_multiview(images: Sequence[np.ndarray]) -> tuple[np.ndarray, tuple[int, int]]:
    """Pack n same-sized images into a dense near-square grid canvas.

    Images are placed row-major; unused cells stay zero. Keeping the canvas
    near-square keeps packed spatial coordinates inside the range the model
    trains on.
    """
    images = [np.asarray(img, dtype=np.float64) for img in images]
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"images must share dimensions, got {sorted(shapes)}")
    h, w, c = images[0].shape
    rows, cols = grid_shape(len(images))
    canvas = np.zeros((rows * h, cols * w, c), dtype=np.float64)
    for idx, img in enumerate(images):
        r, col = divmod(idx, cols)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = img
    return canvas, (rows, cols)


# --- position assignment -----------------------------------------------------


@dataclass
class TokenLayout:
    """Declarative description of one tower pair's token geometry."""

    t_video_max: int
    t_audio_max: int
    audio_scale: float  # latent fps / audio token rate
    audio_ref_window: int  # per-slot window L on the video-aligned timeline
    k_max: int
    video_grid: Optional[tuple[int, int, int]] = None  # (T, Hp, Wp) noisy video tokens
    audio_steps: Optional[int] = None  # noisy audio tokens
    visual_refs: list[tuple[int, int, int]] = field(default_factory=list)  # (slot, patch_rows, patch_cols)
    audio_refs: list[tuple[int, int]] = field(default_factory=list)  # (slot, native_steps)


@dataclass
class SequenceLayout:
    """Per-token roles, identity slots, and 3D coordinates for one tower.

    Reference tokens always precede noisy tokens, ordered by slot.
    """

    roles: np.ndarray  # [L] int8, ROLE_REF / ROLE_NOISY
    slots: np.ndarray  # [L] int16, 0 = none
    positions: np.ndarray  # [L, 3] int64

    @property
    def n_ref(self) -> int:
        return int(np.sum(self.roles == ROLE_REF))

    def __len__(self) -> int:
        return len(self.roles)


def _rint(x: float) -> int:
    return int(np.rint(x))


def assign_positions(layout: TokenLayout) -> tuple[Optional[SequenceLayout], Optional[SequenceLayout]]:
    """Deterministic coordinates for both towers' sequences.

    Noisy video token (f, h, w) -> (f, h, w). Noisy audio step s ->
    (rint(s * scale), 0, 0). Visual references of slot k sit at the virtual
    frame t_video_max + (k - 1) with their packed-grid (h, w). Audio
    references of slot k occupy [base + (k-1)L, base + kL) on the
    video-aligned timeline, base = rint(t_audio_max * scale), so the slot-1
    anchor coincides with the slot-1 visual virtual frame.
    """
    video = None
    if layout.video_grid is not None or layout.visual_refs:
        roles, slots, pos = [], [], []
        for slot, prows, pcols in sorted(layout.visual_refs):
            _check_slot(slot, layout.k_max)
            t = layout.t_video_max + (slot - 1)
            for h in range(prows):
                for w in range(pcols):
                    roles.append(ROLE_REF)
                    slots.append(slot)
                    pos.append((t, h, w))
        if layout.video_grid is not None:
            t_len, hp, wp = layout.video_grid
            for f in range(t_len):
                for h in range(hp):
                    for w in range(wp):
                        roles.append(ROLE_NOISY)
                        slots.append(0)
                        pos.append((f, h, w))
        video = _as_layout(roles, slots, pos)

    audio = None
    if layout.audio_steps is not None or layout.audio_refs:
        base = _rint(layout.t_audio_max * layout.audio_scale)
        l_window = layout.audio_ref_window
        roles, slots, pos = [], [], []
        for slot, native_steps in sorted(layout.audio_refs):
            _check_slot(slot, layout.k_max)
            for j in range(native_steps):
                offset = _rint(j * layout.audio_scale)
                if offset >= l_window:
                    raise ValueError(
                        f"audio reference of {native_steps} steps exceeds the per-slot window ({l_window})"
                    )
                roles.append(ROLE_REF)
                slots.append(slot)
                pos.append((base + (slot - 1) * l_window + offset, 0, 0))
        if layout.audio_steps is not None:
            for s in range(layout.audio_steps):
                roles.append(ROLE_NOISY)
                slots.append(0)
                pos.append((_rint(s * layout.audio_scale), 0, 0))
        audio = _as_layout(roles, slots, pos)

    return video, audio


def _check_slot(slot: int, k_max: int) -> None:
    if not 1 <= slot <= k_max:
        raise ValueError(f"identity slot {slot} out of range 1..{k_max}")


def _as_layout(roles, slots, pos) -> SequenceLayout:
    return SequenceLayout(
        roles=np.asarray(roles, dtype=np.int8),
        slots=np.asarray(slots, dtype=np.int16),
        positions=np.asarray(pos, dtype=np.int64).reshape(len(roles), 3),
    )


# --- factorized 3D rotary embedding -------------------------------------------


def rope_split_dims(d_head: int, proportions: tuple[int, int, int] = (2, 1, 1)) -> tuple[int, int, int]:
    """Split a head dimension into even per-axis channel counts."""
    total = sum(proportions)
    dims = [2 * int(d_head * p / total / 2) for p in proportions]
    dims[0] += d_head - sum(dims)
    if any(d < 2 or d % 2 for d in dims):
        raise ValueError(f"head dim {d_head} cannot be split into even (t, h, w) parts {tuple(dims)}")
    return tuple(dims)


def rope_angles(
    positions: "np.ndarray | torch.Tensor",
    split: tuple[int, int, int],
    base: float = 10000.0,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables [..., L, D_head/2] grouping the (t, h, w) axes side by side.

    Positions are [..., L, 3]; a shared [L, 3] table broadcasts over any batch
    dims of the rotated tensor.
    """
    if isinstance(positions, np.ndarray):
        positions = torch.from_numpy(positions)
    positions = positions.to(dtype)
    parts = []
    for axis, d_axis in enumerate(split):
        half = d_axis // 2
        inv_freq = base ** (-torch.arange(half, dtype=dtype) / half)
        parts.append(positions[..., axis : axis + 1] * inv_freq)
    angles = torch.cat(parts, dim=-1)
    return torch.cos(angles), torch.sin(angles)


# Full-width rotation tables memoized by position bytes; entries are tiny, the
# cap just guards odd workloads.
_ROPE_CACHE: "OrderedDict[tuple, tuple[torch.Tensor, torch.Tensor, torch.Tensor]]" = OrderedDict()
_ROPE_CACHE_CAP = 128


def _rope_tables(
    positions: "np.ndarray | torch.Tensor", split: tuple[int, int, int], base: float, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Full-width (cos, signed sin, pair-swap matrix) tables for one position set."""
    pos_np = positions if isinstance(positions, np.ndarray) else positions.cpu().numpy()
    key = (pos_np.tobytes(), pos_np.shape, split, base, str(dtype))
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        _ROPE_CACHE.move_to_end(key)
        return hit
    cos, sin = rope_angles(pos_np, split, base, dtype)
    d_head = sum(split)
    cos_full = torch.empty(cos.shape[:-1] + (d_head,), dtype=dtype)
    sin_full = torch.empty_like(cos_full)
    # pair-swap with sign as a [D, D] matrix so the rotation is two muls,
    # one small matmul, and one add (cheap on CPU, clean autograd)
    swap = torch.zeros(d_head, d_head, dtype=dtype)
    offset = half_offset = 0
    for d_axis in split:
        half = d_axis // 2
        c = cos[..., half_offset : half_offset + half]
        s = sin[..., half_offset : half_offset + half]
        cos_full[..., offset : offset + half] = c
        cos_full[..., offset + half : offset + d_axis] = c
        sin_full[..., offset : offset + half] = s
        sin_full[..., offset + half : offset + d_axis] = s
        for j in range(half):
            swap[offset + half + j, offset + j] = -1.0  # out[j] gets -x2[j] * sin
            swap[offset + j, offset + half + j] = 1.0  # out[half+j] gets x1[j] * sin
        offset += d_axis
        half_offset += half
    entry = (cos_full, sin_full, swap)
    _ROPE_CACHE[key] = entry
    if len(_ROPE_CACHE) > _ROPE_CACHE_CAP:
        _ROPE_CACHE.popitem(last=False)
    return entry


def apply_rope(
    x: torch.Tensor,
    positions: "np.ndarray | torch.Tensor",
    split: Optional[tuple[int, int, int]] = None,
    base: float = 10000.0,
) -> torch.Tensor:
    """Rotate the trailing head dimension of ``x`` by its tokens' 3D coordinates.

    ``x`` is [..., L, D_head]; each axis group is rotated pairwise by
    angle(coordinate) so post-rotation dot products depend only on coordinate
    differences. Rotation is orthogonal, hence norm-preserving.
    """
    d_head = x.shape[-1]
    if split is None:
        split = rope_split_dims(d_head)
    if sum(split) != d_head:
        raise ValueError(f"rope split {split} does not cover head dim {d_head}")
    cos, sin, swap = _rope_tables(positions, split, base, x.dtype)
    if cos.ndim == 3 and x.ndim == 4:
        # per-item positions [B, L, D_head] against [B, heads, L, D_head]
        cos, sin = cos.unsqueeze(1), sin.unsqueeze(1)
    return x * cos + (x @ swap) * sin
