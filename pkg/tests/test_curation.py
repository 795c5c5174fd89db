import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbind.curation import (
    ClipRecord,
    IdentityGroup,
    curate,
    group_by_face,
    make_training_pairs,
    refine_by_voice,
    refine_groups,
    transcript_overlap,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def clip(cid, face, voice=None, words=()):
    face = unit(face)
    voice = unit(voice) if voice is not None else face
    return ClipRecord(cid, face, voice, frozenset(words))


def random_corpus(rng, n, dim=6, n_centers=4, jitter=0.4):
    """Clustered random clips so linkage graphs are non-trivial."""
    centers = rng.standard_normal((n_centers, dim))
    clips = []
    for i in range(n):
        cf = centers[rng.integers(n_centers)] + jitter * rng.standard_normal(dim)
        cv = centers[rng.integers(n_centers)] + jitter * rng.standard_normal(dim)
        words = frozenset(f"w{k}" for k in rng.integers(0, 30, size=rng.integers(0, 8)))
        clips.append(ClipRecord(f"c{i:03d}", unit(cf), unit(cv), words))
    return clips


# --- oracles -------------------------------------------------------------------


def oracle_components(ids, embeddings, tau):
    """Brute-force transitive closure by repeated sweeps."""
    n = len(ids)
    labels = list(range(n))
    sims = embeddings @ embeddings.T
    changed = True
    while changed:
        changed = False
        for i in range(n):
            for j in range(n):
                if i != j and sims[i, j] >= tau and labels[i] != labels[j]:
                    lo = min(labels[i], labels[j])
                    labels[i] = labels[j] = lo
                    changed = True
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(ids[i])
    return sorted([sorted(m) for m in groups.values()], key=lambda m: m[0])


def oracle_pairs(groups, clips, cap):
    by_id = {c.clip_id: c for c in clips}
    out = []
    for g in groups:
        for a in g.members:
            for b in g.members:
                if a != b:
                    ta, tb = by_id[a].transcript_tokens, by_id[b].transcript_tokens
                    union = ta | tb
                    jac = len(ta & tb) / len(union) if union else 0.0
                    if jac < cap:
                        out.append((a, b))
    return out


# --- grouping ----------------------------------------------------------------------


def test_identical_embeddings_form_one_group():
    clips = [clip("a", [1, 0, 0]), clip("b", [1, 0, 0])]
    groups = group_by_face(clips, 0.6)
    assert len(groups) == 1
    assert groups[0].members == ["a", "b"]
    assert groups[0].provenance == "face_stage"


def test_orthogonal_embeddings_split():
    clips = [clip("a", [1, 0, 0]), clip("b", [0, 1, 0])]
    groups = group_by_face(clips, 0.5)
    assert [g.members for g in groups] == [["a"], ["b"]]


def test_group_by_face_matches_oracle_on_random_corpus():
    rng = np.random.default_rng(0)
    clips = random_corpus(rng, 20)
    got = [g.members for g in group_by_face(clips, 0.6)]
    want = oracle_components([c.clip_id for c in clips], np.stack([c.face_embedding for c in clips]), 0.6)
    assert got == want


def test_group_by_face_validates():
    with pytest.raises(ValueError, match="tau_face"):
        group_by_face([], 1.5)
    with pytest.raises(ValueError, match="unit-norm"):
        ClipRecord("a", np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="unique"):
        group_by_face([clip("a", [1, 0]), clip("a", [0, 1])], 0.5)


# --- refinement --------------------------------------------------------------------


def test_coherent_group_is_unchanged_by_voice_refinement():
    clips = [clip(f"c{i}", [1, 0, 0], [0, 1, 0]) for i in range(4)]
    group = IdentityGroup(0, [c.clip_id for c in clips], "face_stage")
    refined = refine_by_voice(group, clips, 0.7)
    assert len(refined) == 1
    assert refined[0].members == [c.clip_id for c in clips]
    assert refined[0].provenance == "voice_refined"


def test_dubbed_clip_splits_into_marked_singleton():
    clips = [
        clip("a", [1, 0, 0], [0, 1, 0]),
        clip("b", [1, 0, 0], [0, 1, 0]),
        clip("dub", [1, 0, 0], [0, 0, 1]),
    ]
    group = IdentityGroup(0, ["a", "b", "dub"], "face_stage")
    refined = refine_by_voice(group, clips, 0.7)
    assert [g.members for g in refined] == [["a", "b"], ["dub"]]
    assert refined[1].is_singleton


def test_refinement_matches_oracle_on_mixed_group():
    rng = np.random.default_rng(1)
    clips = random_corpus(rng, 8, n_centers=2)
    group = IdentityGroup(0, sorted(c.clip_id for c in clips), "face_stage")
    got = [g.members for g in refine_by_voice(group, clips, 0.7)]
    want = oracle_components(
        sorted(c.clip_id for c in clips),
        np.stack([c.speaker_embedding for c in sorted(clips, key=lambda c: c.clip_id)]),
        0.7,
    )
    assert got == want


# --- pairs ----------------------------------------------------------------------------


def test_singleton_group_yields_no_pairs():
    clips = [clip("a", [1, 0])]
    groups = [IdentityGroup(0, ["a"], "voice_refined")]
    assert make_training_pairs(groups, clips) == []


def test_two_clips_disjoint_transcripts_give_two_ordered_pairs():
    clips = [clip("a", [1, 0], words={"hello"}), clip("b", [1, 0], words={"world"})]
    groups = [IdentityGroup(0, ["a", "b"], "voice_refined")]
    assert sorted(make_training_pairs(groups, clips)) == [("a", "b"), ("b", "a")]


def test_high_overlap_pairs_are_dropped():
    words = [{"x", "y", "z"}, {"x", "y", "q"}, {"p"}, {"r"}]
    clips = [clip(f"c{i}", [1, 0], words=w) for i, w in enumerate(words)]
    groups = [IdentityGroup(0, [c.clip_id for c in clips], "voice_refined")]
    pairs = make_training_pairs(groups, clips, max_overlap=0.2)
    # c0<->c1 share 2 of 4 tokens (jaccard 0.5): both directions excluded
    assert ("c0", "c1") not in pairs and ("c1", "c0") not in pairs
    assert len(pairs) == 4 * 3 - 2
    assert pairs == oracle_pairs(groups, clips, 0.2)


def test_transcript_overlap_conventions():
    assert transcript_overlap(frozenset(), frozenset()) == 0.0
    assert transcript_overlap(frozenset("ab"), frozenset("ab")) == 1.0
    assert transcript_overlap(frozenset("ab"), frozenset("bc")) == pytest.approx(1 / 3)


# --- properties -------------------------------------------------------------------------


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30))
def test_partition_and_pair_properties(seed, n):
    rng = np.random.default_rng(seed)
    clips = random_corpus(rng, n)
    groups, pairs = curate(clips, 0.6, 0.7, 0.2)
    seen = [m for g in groups for m in g.members]
    assert sorted(seen) == sorted(c.clip_id for c in clips)  # exactly one group each
    by_group = {m: g.group_id for g in groups for m in g.members}
    by_id = {c.clip_id: c for c in clips}
    for ref, tgt in pairs:
        assert ref != tgt
        assert by_group[ref] == by_group[tgt]
        assert transcript_overlap(by_id[ref].transcript_tokens, by_id[tgt].transcript_tokens) < 0.2


@settings(deadline=None, max_examples=20)
@given(seed=st.integers(0, 10_000))
def test_raising_tau_never_merges(seed):
    rng = np.random.default_rng(seed)
    clips = random_corpus(rng, 15)
    coarse = group_by_face(clips, 0.5)
    fine = group_by_face(clips, 0.75)
    coarse_of = {m: g.group_id for g in coarse for m in g.members}
    # each fine group sits inside one coarse group
    for g in fine:
        assert len({coarse_of[m] for m in g.members}) == 1


@settings(deadline=None, max_examples=15)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 50))
def test_full_pipeline_matches_oracles(seed, n):
    rng = np.random.default_rng(seed)
    clips = random_corpus(rng, n)
    ids = sorted(c.clip_id for c in clips)
    ordered = sorted(clips, key=lambda c: c.clip_id)
    face_groups = group_by_face(clips, 0.6)
    assert [g.members for g in face_groups] == oracle_components(
        ids, np.stack([c.face_embedding for c in ordered]), 0.6
    )
    refined = refine_groups(face_groups, clips, 0.7)
    expected_refined = []
    for g in face_groups:
        sub = [c for c in ordered if c.clip_id in g.members]
        expected_refined.extend(
            oracle_components([c.clip_id for c in sub], np.stack([c.speaker_embedding for c in sub]), 0.7)
        )
    assert [g.members for g in refined] == expected_refined
    assert make_training_pairs(refined, clips, 0.2) == oracle_pairs(refined, clips, 0.2)
