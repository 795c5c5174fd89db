"""Cross-clip identity grouping and training-pair construction.

Clips are grouped by face embedding (single-linkage over a cosine threshold),
each group is refined by speaker embedding to split out dubbed or voiced-over
clips, and training pairs are ordered cross-clip pairs within a refined group
whose transcripts barely overlap, so a model must inject identity instead of
copying the reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass
class ClipRecord:
    clip_id: str
    face_embedding: np.ndarray  # unit vector
    speaker_embedding: np.ndarray  # unit vector
    transcript_tokens: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        for name, vec in (("face", self.face_embedding), ("speaker", self.speaker_embedding)):
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"{name} embedding of {self.clip_id!r} is not unit-norm (|v|={norm:.6f})")
        self.transcript_tokens = frozenset(self.transcript_tokens)


@dataclass
class IdentityGroup:
    group_id: int
    members: list[str]  # clip ids, sorted
    provenance: str  # face_stage | voice_refined

    @property
    def is_singleton(self) -> bool:
        return len(self.members) == 1


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _single_linkage(ids: Sequence[str], embeddings: np.ndarray, tau: float) -> list[list[str]]:
    n = len(ids)
    uf = _UnionFind(n)
    if n:
        sims = embeddings @ embeddings.T
        for i in range(n):
            for j in range(i + 1, n):
                if sims[i, j] >= tau:
                    uf.union(i, j)
    components: dict[int, list[str]] = {}
    for i in range(n):
        components.setdefault(uf.find(i), []).append(ids[i])
    groups = [sorted(members) for members in components.values()]
    return sorted(groups, key=lambda m: m[0])


def group_by_face(clips: Sequence[ClipRecord], tau_face: float) -> list[IdentityGroup]:
    """Connected components over the face-similarity graph (cosine >= tau)."""
    if not 0.0 < tau_face < 1.0:
        raise ValueError(f"tau_face must be in (0, 1), got {tau_face}")
    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        raise ValueError("clip ids must be unique")
    embeddings = np.stack([c.face_embedding for c in clips]) if clips else np.zeros((0, 1))
    members = _single_linkage(ids, embeddings, tau_face)
    return [IdentityGroup(group_id=i, members=m, provenance="face_stage") for i, m in enumerate(members)]


def refine_by_voice(
    group: IdentityGroup, clips: Sequence[ClipRecord], tau_voice: float, first_id: int = 0
) -> list[IdentityGroup]:
    """Split one face group into voice-coherent subgroups.

    Visual consistency does not guarantee vocal consistency (dubbing), so the
    same single-linkage rule runs again over speaker embeddings. Singletons
    are retained rather than dropped.
    """
    if not 0.0 < tau_voice < 1.0:
        raise ValueError(f"tau_voice must be in (0, 1), got {tau_voice}")
    by_id = {c.clip_id: c for c in clips}
    records = [by_id[m] for m in group.members]
    embeddings = np.stack([c.speaker_embedding for c in records]) if records else np.zeros((0, 1))
    members = _single_linkage([c.clip_id for c in records], embeddings, tau_voice)
    return [
        IdentityGroup(group_id=first_id + i, members=m, provenance="voice_refined") for i, m in enumerate(members)
    ]


def refine_groups(groups: Iterable[IdentityGroup], clips: Sequence[ClipRecord], tau_voice: float) -> list[IdentityGroup]:
    refined: list[IdentityGroup] = []
    for group in groups:
        refined.extend(refine_by_voice(group, clips, tau_voice, first_id=len(refined)))
    return refined


def transcript_overlap(a: frozenset[str], b: frozenset[str]) -> float:
    """Token-set Jaccard; two empty transcripts count as non-overlapping."""
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def make_training_pairs(
    groups: Iterable[IdentityGroup], clips: Sequence[ClipRecord], max_overlap: float = 0.2
) -> list[tuple[str, str]]:
    """Ordered (reference, target) pairs of distinct clips within a group.

    Pairs with transcript Jaccard at or above the cap are dropped, so targets
    never share spoken content with their reference; a clip is never its own
    reference.
    """
    by_id = {c.clip_id: c for c in clips}
    pairs: list[tuple[str, str]] = []
    for group in groups:
        for ref in group.members:
            for tgt in group.members:
                if ref == tgt:
                    continue
                if transcript_overlap(by_id[ref].transcript_tokens, by_id[tgt].transcript_tokens) < max_overlap:
                    pairs.append((ref, tgt))
    return pairs


def curate(
    clips: Sequence[ClipRecord], tau_face: float = 0.6, tau_voice: float = 0.7, max_overlap: float = 0.2
) -> tuple[list[IdentityGroup], list[tuple[str, str]]]:
    """Full pipeline: face grouping, voice refinement, pair construction."""
    refined = refine_groups(group_by_face(clips, tau_face), clips, tau_voice)
    return refined, make_training_pairs(refined, clips, max_overlap)
