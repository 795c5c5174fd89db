"""Procedural multi-identity audio-visual world with exactly decodable codes.

Every identity owns a unit appearance code and a unit timbre code. Video
regions and audio intervals are linear renderings of those codes through
fixed orthonormal bases, so matched-filter decoding recovers the intended
identity exactly (up to the small render noise). That makes face-voice
binding a measurable quantity instead of a vibe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorio
from .config import Config, WorldConfig
from .seeding import derived_rng

MIXES = ("unimodal_audio", "unimodal_video", "paired", "multiview")


# --- identities and render bases ----------------------------------------------


@dataclass
class IdentityRegistry:
    """Global table of identities: unit appearance and timbre codes."""

    appearance: np.ndarray  # [n, d_appearance]
    timbre: np.ndarray  # [n, d_timbre]

    def __len__(self) -> int:
        return self.appearance.shape[0]


def _max_coherence(x: np.ndarray) -> float:
    gram = np.abs(x @ x.T)
    np.fill_diagonal(gram, 0.0)
    return float(gram.max())


def _sample_separated(rng: np.random.Generator, n: int, dim: int, max_abs_corr: float) -> np.ndarray:
    """Seeded unit codes with every pairwise |dot| strictly below the bound.

    16 codes in R^8 under 0.3 sit close to the best-known line packing
    (~0.288), far beyond what plain rejection sampling reaches, so a random
    start is annealed with soft-max repulsion until the bound holds. Fully
    deterministic given the generator.
    """
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    target = 0.98 * max_abs_corr
    for phase in range(80):
        if _max_coherence(x) < target:
            break
        beta = 20.0 * 1.3**phase
        lr = 0.1 / (1 + 0.15 * phase)
        for _ in range(400):
            gram = x @ x.T
            np.fill_diagonal(gram, 0.0)
            mag = np.abs(gram)
            weights = np.exp(beta * (mag - mag.max()))
            np.fill_diagonal(weights, 0.0)
            grad = (weights * np.sign(gram)) @ x
            grad -= np.sum(grad * x, axis=1, keepdims=True) * x  # tangent step
            norm = np.linalg.norm(grad, axis=1, keepdims=True) + 1e-12
            x = x - lr * grad / norm
            x /= np.linalg.norm(x, axis=1, keepdims=True)
    if _max_coherence(x) >= max_abs_corr:
        raise RuntimeError(f"could not separate {n} codes in R^{dim} below {max_abs_corr}")
    return x


@lru_cache(maxsize=8)
def _cached_registry(registry_seed: int, size: int, d_app: int, d_timbre: int, bound: float) -> IdentityRegistry:
    rng = derived_rng(registry_seed, 0)
    return IdentityRegistry(
        appearance=_sample_separated(rng, size, d_app, bound),
        timbre=_sample_separated(rng, size, d_timbre, bound),
    )


def build_registry(cfg: WorldConfig) -> IdentityRegistry:
    return _cached_registry(cfg.registry_seed, cfg.registry_size, cfg.d_appearance, cfg.d_timbre, cfg.max_abs_corr)


@dataclass
class RenderBases:
    """Fixed orthonormal render maps shared by generation and decoding."""

    appearance: np.ndarray  # [region_pixels, d_appearance], orthonormal columns
    activity: np.ndarray  # [region_pixels], unit, orthogonal to appearance columns
    audio: np.ndarray  # [hop_samples, hop_samples], orthogonal


def build_bases(cfg: WorldConfig, hop_samples: int) -> RenderBases:
    rng = derived_rng(cfg.registry_seed, 1)
    pixels = cfg.region_size * cfg.region_size * cfg.channels
    raw = rng.standard_normal((pixels, cfg.d_appearance + 1))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))
    raw_a = rng.standard_normal((hop_samples, hop_samples))
    qa, ra = np.linalg.qr(raw_a)
    return RenderBases(appearance=q[:, : cfg.d_appearance], activity=q[:, cfg.d_appearance], audio=qa * np.sign(np.diag(ra)))


def pose_rotation(dim: int, angle_deg: float) -> np.ndarray:
    """Rotation of code space by one angle applied in (2i, 2i+1) planes."""
    if dim % 2:
        raise ValueError("code dimension must be even for paired-plane rotation")
    phi = math.radians(angle_deg)
    rot = np.eye(dim)
    c, s = math.cos(phi), math.sin(phi)
    for i in range(0, dim, 2):
        rot[i, i] = c
        rot[i, i + 1] = -s
        rot[i + 1, i] = s
        rot[i + 1, i + 1] = c
    return rot


# --- scene specification ----------------------------------------------------------


@dataclass
class SubjectSpec:
    identity_id: int
    slot: int
    region: tuple[int, int]  # top-left (row, col) of a region_size square
    intervals: list[tuple[int, int]]  # half-open [start, end) in audio latent steps
    content_code: np.ndarray  # [d_content] target utterance content
    ref_content_code: np.ndarray  # reference utterance content, never the target's
    pose_angles_deg: list[float]  # one per reference view
    summary_signs: np.ndarray  # coarse appearance summary: signs of first two coords


@dataclass
class SceneSpec:
    scene_id: int
    subjects: list[SubjectSpec]
    mix: str = "paired"

    def __post_init__(self) -> None:
        slots = sorted(s.slot for s in self.subjects)
        if slots != list(range(1, len(self.subjects) + 1)):
            raise ValueError(f"slots must be 1..K without gaps, got {slots}")
        regions = [s.region for s in self.subjects]
        if len(set(regions)) != len(regions):
            raise ValueError("subject regions must be disjoint")

    @property
    def k(self) -> int:
        return len(self.subjects)


@dataclass
class Scene:
    """Rendered clip plus per-subject reference signals."""

    spec: SceneSpec
    video: Optional[np.ndarray]  # [T, H, W, C]
    audio: Optional[np.ndarray]  # [N, 1]
    ref_images: dict[int, np.ndarray]  # slot -> [views, rs, rs, C]
    ref_waves: dict[int, np.ndarray]  # slot -> [steps*hop, 1]


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _content_code(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Unit content vector on a canonical hemisphere (first coord bounded away
    from zero), so the timbre factor of a reference rendering is sign-stable."""
    while True:
        v = _unit(rng, dim)
        if abs(v[0]) >= 0.05:
            return v if v[0] > 0 else -v


def _quadrants(cfg: WorldConfig) -> list[tuple[int, int]]:
    rs = cfg.region_size
    return [(0, 0), (0, rs), (rs, 0), (rs, rs)]


def _schedule_turns(rng: np.random.Generator, steps: int, k: int, min_len: int) -> list[list[tuple[int, int]]]:
    """One non-overlapping speaking interval per subject, in shuffled order."""
    seg = steps // k
    order = rng.permutation(k)
    intervals: list[list[tuple[int, int]]] = [[] for _ in range(k)]
    for seg_idx, subject in enumerate(order):
        lo = seg_idx * seg
        length = int(rng.integers(min_len, max(min_len + 1, seg - 1)))
        start = lo + int(rng.integers(0, seg - length + 1))
        intervals[subject] = [(start, start + length)]
    return intervals


def sample_scene_spec(
    rng: np.random.Generator,
    cfg: WorldConfig,
    registry: IdentityRegistry,
    scene_id: int,
    k: int,
    n_views: int = 1,
    pose_range_deg: tuple[float, float] = (0.0, 45.0),
    mix: str = "paired",
) -> SceneSpec:
    if k > 4:
        raise ValueError("at most 4 subjects fit the quadrant layout")
    ids = rng.choice(len(registry), size=k, replace=False)
    quadrant_order = rng.permutation(4)[:k]
    turn_sets = _schedule_turns(rng, cfg.audio_steps, k, cfg.min_turn_steps)
    quads = _quadrants(cfg)
    subjects = []
    for slot0 in range(k):
        content = _content_code(rng, cfg.d_content)
        ref_content = _content_code(rng, cfg.d_content)
        while abs(ref_content @ content) > 0.95:
            ref_content = _content_code(rng, cfg.d_content)
        lo, hi = pose_range_deg
        angles = [float(rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])) for _ in range(n_views)]
        identity = int(ids[slot0])
        subjects.append(
            SubjectSpec(
                identity_id=identity,
                slot=slot0 + 1,
                region=quads[quadrant_order[slot0]],
                intervals=turn_sets[slot0],
                content_code=content,
                ref_content_code=ref_content,
                pose_angles_deg=angles,
                summary_signs=np.sign(registry.appearance[identity, :2]).astype(np.float64),
            )
        )
    return SceneSpec(scene_id=scene_id, subjects=subjects, mix=mix)


# --- rendering ----------------------------------------------------------------------


def _render_region(code: np.ndarray, angle_deg: float, bases: RenderBases, cfg: WorldConfig) -> np.ndarray:
    rotated = pose_rotation(cfg.d_appearance, angle_deg) @ code
    flat = cfg.appearance_gain * (bases.appearance @ rotated)
    return flat.reshape(cfg.region_size, cfg.region_size, cfg.channels)


def _render_audio_step(timbre: np.ndarray, content: np.ndarray, bases: RenderBases, cfg: WorldConfig) -> np.ndarray:
    return cfg.audio_gain * (bases.audio @ np.outer(timbre, content).ravel())


def speaking_frames(interval: tuple[int, int], cfg: WorldConfig) -> tuple[int, int]:
    """Map an audio-step interval onto the video frame timeline."""
    scale = cfg.latent_frames / cfg.audio_steps
    s0, s1 = interval
    return int(math.floor(s0 * scale)), min(cfg.latent_frames, int(math.ceil(s1 * scale)))


def generate_scene(
    spec: SceneSpec,
    registry: IdentityRegistry,
    bases: RenderBases,
    cfg: WorldConfig,
    rng: np.random.Generator,
    hop: int,
) -> Scene:
    """Render a scene: regions carry appearance codes, speaking intervals carry
    timbre (x) content renderings, references carry posed appearance / off-target
    content."""
    rs = cfg.region_size
    video = np.zeros((cfg.latent_frames, cfg.frame_h, cfg.frame_w, cfg.channels))
    audio = np.zeros((cfg.audio_steps * hop, 1))
    act = (cfg.activity_gain * bases.activity).reshape(rs, rs, cfg.channels)
    ref_images: dict[int, np.ndarray] = {}
    ref_waves: dict[int, np.ndarray] = {}
    for subj in spec.subjects:
        r0, c0 = subj.region
        appearance = registry.appearance[subj.identity_id]
        timbre = registry.timbre[subj.identity_id]
        video[:, r0 : r0 + rs, c0 : c0 + rs] += _render_region(appearance, 0.0, bases, cfg)
        step_wave = _render_audio_step(timbre, subj.content_code, bases, cfg)
        for interval in subj.intervals:
            f0, f1 = speaking_frames(interval, cfg)
            video[f0:f1, r0 : r0 + rs, c0 : c0 + rs] += act
            for s in range(*interval):
                audio[s * hop : (s + 1) * hop, 0] += step_wave
        views = [
            _render_region(appearance, angle, bases, cfg) + rng.normal(0.0, cfg.render_noise, (rs, rs, cfg.channels))
            for angle in subj.pose_angles_deg
        ]
        ref_images[subj.slot] = np.stack(views)
        ref_step = _render_audio_step(timbre, subj.ref_content_code, bases, cfg)
        wave = np.tile(ref_step, cfg.ref_audio_steps)[:, None]
        ref_waves[subj.slot] = wave + rng.normal(0.0, cfg.render_noise, wave.shape)
    video += rng.normal(0.0, cfg.render_noise, video.shape)
    audio += rng.normal(0.0, cfg.render_noise, audio.shape)
    return Scene(spec=spec, video=video, audio=audio, ref_images=ref_images, ref_waves=ref_waves)


# --- decoding ------------------------------------------------------------------------


def decode_appearance(video: np.ndarray, region: tuple[int, int], bases: RenderBases, cfg: WorldConfig) -> np.ndarray:
    """Matched filter: average the region over time, project onto the basis."""
    r0, c0 = region
    rs = cfg.region_size
    patch = video[:, r0 : r0 + rs, c0 : c0 + rs].mean(axis=0).ravel()
    return (bases.appearance.T @ patch) / cfg.appearance_gain


def audio_step_matrix(audio: np.ndarray, step: int, bases: RenderBases, cfg: WorldConfig, hop: int) -> np.ndarray:
    chunk = audio[step * hop : (step + 1) * hop, 0]
    return (bases.audio.T @ chunk).reshape(cfg.d_timbre, cfg.d_content) / cfg.audio_gain


def decode_timbre_matrix(
    audio: np.ndarray, intervals: list[tuple[int, int]], bases: RenderBases, cfg: WorldConfig, hop: int
) -> Optional[np.ndarray]:
    steps = [s for s0, s1 in intervals for s in range(s0, s1)]
    if not steps:
        return None
    return np.mean([audio_step_matrix(audio, s, bases, cfg, hop) for s in steps], axis=0)


def appearance_match(estimate: np.ndarray, registry: IdentityRegistry) -> int:
    return int(np.argmax(registry.appearance @ estimate))


def timbre_match(matrix: np.ndarray, registry: IdentityRegistry) -> int:
    # |t_i^T M| collapses the unknown content factor (and its sign)
    return int(np.argmax(np.linalg.norm(registry.timbre @ matrix, axis=1)))


def activity_trace(video: np.ndarray, region: tuple[int, int], bases: RenderBases, cfg: WorldConfig) -> np.ndarray:
    r0, c0 = region
    rs = cfg.region_size
    patches = video[:, r0 : r0 + rs, c0 : c0 + rs].reshape(video.shape[0], -1)
    return (patches @ bases.activity) / cfg.activity_gain


@dataclass
class SlotBinding:
    slot: int
    intended_id: int
    appearance_id: int
    timbre_id: Optional[int]  # None when the slot never speaks
    scored: bool

    @property
    def appearance_ok(self) -> bool:
        return self.appearance_id == self.intended_id

    @property
    def timbre_ok(self) -> bool:
        return self.scored and self.timbre_id == self.intended_id

    @property
    def bound(self) -> bool:
        return self.scored and self.appearance_ok and self.timbre_ok


@dataclass
class BindingReport:
    slots: list[SlotBinding]

    @property
    def scored(self) -> list[SlotBinding]:
        return [s for s in self.slots if s.scored]

    @property
    def appearance_accuracy(self) -> float:
        return float(np.mean([s.appearance_ok for s in self.slots]))

    @property
    def timbre_accuracy(self) -> Optional[float]:
        scored = self.scored
        return float(np.mean([s.timbre_ok for s in scored])) if scored else None

    @property
    def joint_accuracy(self) -> Optional[float]:
        scored = self.scored
        return float(np.mean([s.bound for s in scored])) if scored else None


def decode_binding(
    video: np.ndarray,
    audio: np.ndarray,
    spec: SceneSpec,
    registry: IdentityRegistry,
    bases: RenderBases,
    cfg: WorldConfig,
    hop: int,
) -> BindingReport:
    """Per-slot face/voice identification against the registry.

    A slot is bound when both the appearance decoded from its region and the
    timbre decoded over its speaking intervals match the intended identity.
    Slots without speaking intervals are unscored.
    """
    slots = []
    for subj in spec.subjects:
        est = decode_appearance(video, subj.region, bases, cfg)
        app_id = appearance_match(est, registry)
        matrix = decode_timbre_matrix(audio, subj.intervals, bases, cfg, hop)
        timbre_id = timbre_match(matrix, registry) if matrix is not None else None
        slots.append(
            SlotBinding(
                slot=subj.slot,
                intended_id=subj.identity_id,
                appearance_id=app_id,
                timbre_id=timbre_id,
                scored=matrix is not None,
            )
        )
    return BindingReport(slots=slots)


def alignment_score(
    video: np.ndarray,
    audio: np.ndarray,
    spec: SceneSpec,
    registry: IdentityRegistry,
    bases: RenderBases,
    cfg: WorldConfig,
    hop: int,
) -> Optional[float]:
    """Turn-taking agreement between the modalities of a generated clip.

    Per slot: the frames where its region shows speaking activity vs the
    frames where the audio carries its timbre; score is the mean IoU.
    """
    scale = cfg.latent_frames / cfg.audio_steps
    scores = []
    for subj in spec.subjects:
        if not subj.intervals:
            continue
        video_mask = activity_trace(video, subj.region, bases, cfg) > 0.5
        audio_mask = np.zeros(cfg.latent_frames, dtype=bool)
        timbre = registry.timbre[subj.identity_id]
        for s in range(cfg.audio_steps):
            m = audio_step_matrix(audio, s, bases, cfg, hop)
            if np.linalg.norm(m) > 0.5 and np.linalg.norm(timbre @ m) > 0.5 * np.linalg.norm(m):
                frame = min(cfg.latent_frames - 1, int(s * scale))
                audio_mask[frame] = True
        union = np.logical_or(video_mask, audio_mask).sum()
        if union:
            scores.append(np.logical_and(video_mask, audio_mask).sum() / union)
    return float(np.mean(scores)) if scores else None


# --- condition tokens -----------------------------------------------------------------


def condition_features(spec: SceneSpec, cfg: Config, anchors_enabled: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject condition tokens and their 3D coordinates.

    Features: [slot one-hot | coarse appearance summary | content code |
    normalized interval]. With anchors disabled the slot one-hot is zeroed, so
    content descriptions are pooled without subject tags. Each token sits at
    (interval center on the video timeline, region center patch coords).
    """
    w = cfg.world
    k_max = cfg.model.k_max
    scale = w.latent_frames / w.audio_steps
    feats = np.zeros((spec.k, cfg.cond_feature_dim))
    pos = np.zeros((spec.k, 3), dtype=np.int64)
    for i, subj in enumerate(sorted(spec.subjects, key=lambda s: s.slot)):
        col = 0
        if anchors_enabled:
            feats[i, subj.slot - 1] = 1.0
        col += k_max
        feats[i, col : col + 2] = subj.summary_signs
        col += 2
        feats[i, col : col + w.d_content] = subj.content_code
        col += w.d_content
        if subj.intervals:
            s0, s1 = subj.intervals[0]
            feats[i, col : col + 2] = (s0 / w.audio_steps, s1 / w.audio_steps)
            t_center = int(np.rint(0.5 * (s0 + s1) * scale))
        else:
            t_center = 0
        r0, c0 = subj.region
        patch = cfg.codec.patch_size
        pos[i] = (t_center, (r0 + w.region_size // 2) // patch, (c0 + w.region_size // 2) // patch)
    return feats, pos


# --- datasets ----------------------------------------------------------------------------


def _subject_to_dict(s: SubjectSpec) -> dict:
    return {
        "identity_id": s.identity_id,
        "slot": s.slot,
        "region": list(s.region),
        "intervals": [list(iv) for iv in s.intervals],
        "content_code": s.content_code.tolist(),
        "ref_content_code": s.ref_content_code.tolist(),
        "pose_angles_deg": s.pose_angles_deg,
        "summary_signs": s.summary_signs.tolist(),
    }


def _subject_from_dict(d: dict) -> SubjectSpec:
    return SubjectSpec(
        identity_id=int(d["identity_id"]),
        slot=int(d["slot"]),
        region=tuple(d["region"]),
        intervals=[tuple(iv) for iv in d["intervals"]],
        content_code=np.asarray(d["content_code"], dtype=np.float64),
        ref_content_code=np.asarray(d["ref_content_code"], dtype=np.float64),
        pose_angles_deg=[float(a) for a in d["pose_angles_deg"]],
        summary_signs=np.asarray(d["summary_signs"], dtype=np.float64),
    )


def spec_to_dict(spec: SceneSpec) -> dict:
    return {"scene_id": spec.scene_id, "mix": spec.mix, "subjects": [_subject_to_dict(s) for s in spec.subjects]}


def spec_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        scene_id=int(d["scene_id"]), mix=d["mix"], subjects=[_subject_from_dict(s) for s in d["subjects"]]
    )


DEFAULT_MIX_SHARES = {"unimodal_audio": 0.40, "unimodal_video": 0.30, "paired": 0.25, "multiview": 0.05}


def _mix_plan(n_scenes: int, mix: str) -> list[str]:
    if mix in MIXES:
        return [mix] * n_scenes
    if mix != "default":
        raise ValueError(f"unknown mix {mix!r}; expected one of {MIXES + ('default',)}")
    # audio-only most abundant, multiview scarcest
    counts = {name: int(share * n_scenes) for name, share in DEFAULT_MIX_SHARES.items()}
    counts["unimodal_audio"] += n_scenes - sum(counts.values())
    plan = [name for name in MIXES for _ in range(counts[name])]
    return plan


def build_dataset(
    out_dir: str | Path,
    n_scenes: int,
    mix: str,
    seed: int,
    cfg: Config,
    pose_range_deg: Optional[tuple[float, float]] = None,
) -> Path:
    """Generate scenes and a line-delimited manifest; returns the manifest path.

    Scene rendering is keyed by (seed, scene index) so regeneration with the
    same seed is byte-identical.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    w = cfg.world
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    registry = build_registry(w)
    bases = build_bases(w, cfg.codec.audio_latent_dim)
    plan = _mix_plan(n_scenes, mix)
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for scene_id, scene_mix in enumerate(plan):
            rng = derived_rng(seed, 100 + scene_id)
            k = 1 if scene_mix == "unimodal_audio" else int(rng.integers(1, 3))
            views = w.n_views_multiview if scene_mix == "multiview" else 1
            if pose_range_deg is not None:
                pose = pose_range_deg
            else:
                pose = (0.0, w.pose_multiview_deg) if scene_mix == "multiview" else (0.0, w.pose_train_deg)
            spec = sample_scene_spec(rng, w, registry, scene_id, k, views, pose, mix=scene_mix)
            scene = generate_scene(spec, registry, bases, w, rng, cfg.codec.hop)
            files = _write_scene_arrays(out / "scenes", scene, scene_mix)
            row = spec_to_dict(spec)
            row["files"] = files
            row["k"] = spec.k
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    header = {
        "n_scenes": n_scenes,
        "mix": mix,
        "seed": seed,
        "registry_seed": w.registry_seed,
        "architecture_hash": cfg.architecture_hash(),
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
    return manifest_path


def _write_scene_arrays(scene_dir: Path, scene: Scene, mix: str) -> dict:
    sid = scene.spec.scene_id
    files: dict[str, str] = {}

    def put(tag: str, arr: np.ndarray) -> None:
        name = f"s{sid:05d}_{tag}.iapl"
        tensorio.save_tensor(scene_dir / name, arr)
        files[tag] = f"scenes/{name}"

    if mix != "unimodal_audio":
        put("video", scene.video)
        for slot, images in scene.ref_images.items():
            put(f"ref_images_{slot}", images)
    if mix != "unimodal_video":
        put("audio", scene.audio)
        for slot, wave in scene.ref_waves.items():
            put(f"ref_wave_{slot}", wave)
    return files


def load_manifest(manifest_path: str | Path) -> list[dict]:
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_scene_row(row: dict, root: Path) -> Scene:
    spec = spec_from_dict(row)
    files = row["files"]
    video = tensorio.load_tensor(root / files["video"]).astype(np.float64) if "video" in files else None
    audio = tensorio.load_tensor(root / files["audio"]).astype(np.float64) if "audio" in files else None
    ref_images = {}
    ref_waves = {}
    for subj in spec.subjects:
        img_key, wav_key = f"ref_images_{subj.slot}", f"ref_wave_{subj.slot}"
        if img_key in files:
            ref_images[subj.slot] = tensorio.load_tensor(root / files[img_key]).astype(np.float64)
        if wav_key in files:
            ref_waves[subj.slot] = tensorio.load_tensor(root / files[wav_key]).astype(np.float64)
    return Scene(spec=spec, video=video, audio=audio, ref_images=ref_images, ref_waves=ref_waves)
