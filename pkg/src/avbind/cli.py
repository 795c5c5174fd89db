"""Command-line surface: data generation, staged training, sampling, evaluation,
ablations, corpus curation, and positional-scheme inspection.

Config precedence is CLI flag > config file > built-in default. ``--seed``
(falling back to the IAP_SEED environment variable, then 0) controls all
randomness. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import difflib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensorio
from .binding import ROLE_REF, TokenLayout, assign_positions
from .config import STAGE_PRESETS, AblationFlags, Config, load_config, make_stage_config
from .curation import ClipRecord, curate
from .latents import AudioLatent, Codecs, VideoLatent


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="INI config file ([codec]/[world]/[model]/[flow] sections)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (default: $IAP_SEED or 0)")


def build_parser() -> _Parser:
    parser = _Parser(prog="avbind", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parser_class=_Parser, help="generate a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--mix", default="paired",
                   choices=["unimodal_audio", "unimodal_video", "paired", "multiview", "default"])
    p.add_argument("--pose-min", type=float, default=None, help="min |pose angle| in degrees")
    p.add_argument("--pose-max", type=float, default=None, help="max |pose angle| in degrees")

    p = sub.add_parser("train", parser_class=_Parser, help="run one training stage")
    _add_common(p)
    p.add_argument("--stage", required=True, choices=sorted(STAGE_PRESETS))
    p.add_argument("--data", required=True, help="dataset manifest (manifest.jsonl)")
    p.add_argument("--out", required=True, help="run directory for checkpoint + logs")
    p.add_argument("--init", default=None, help="initial checkpoint")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--disable", action="append", default=[], choices=["subject-anchors", "identity-embeddings"],
                   help="ablate a binding component (repeatable)")

    p = sub.add_parser("sample", parser_class=_Parser, help="sample scenes from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest providing refs/conditions")
    p.add_argument("--scene-id", type=int, action="append", default=None, help="scene id (repeatable; default: all)")
    p.add_argument("--steps", type=int, default=None, help="integration steps (default from config)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parser_class=_Parser, help="binding metrics on held-out scenes")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default=None, help="write JSON report (plus .jsonl per-scene records)")

    p = sub.add_parser("ablate", parser_class=_Parser, help="full schedule + eval with components disabled")
    _add_common(p)
    p.add_argument("--disable", action="append", default=[], choices=["subject-anchors", "identity-embeddings"])
    p.add_argument("--data-root", required=True,
                   help="directory with <mix>/manifest.jsonl for unimodal_audio, unimodal_video, paired, multiview, eval")
    p.add_argument("--out", required=True)
    p.add_argument("--steps-scale", type=float, default=1.0, help="scale every stage's step budget")
    p.add_argument("--one-stage", action="store_true", help="replace the staged schedule with single joint training")
    p.add_argument("--skip-stage3", action="store_true")
    p.add_argument("--batch", type=int, default=None)

    p = sub.add_parser("curate", parser_class=_Parser, help="group clips by identity and emit training pairs")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="clip manifest (JSONL)")
    p.add_argument("--out-groups", required=True)
    p.add_argument("--out-pairs", required=True)
    p.add_argument("--tau-face", type=float, default=0.6)
    p.add_argument("--tau-voice", type=float, default=0.7)
    p.add_argument("--max-overlap", type=float, default=0.2)

    p = sub.add_parser("inspect-positions", parser_class=_Parser, help="dump per-token coordinates for a layout")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=2)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--audio-ref-steps", type=int, default=None, help="native reference steps (default from config)")
    p.add_argument("--out", default=None, help="write to file instead of stdout")

    return parser


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("IAP_SEED")
    return int(env) if env else 0


def _resolve_config(args) -> Config:
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return load_config(args.config, overrides)


def _flags(disable: list[str]) -> AblationFlags:
    return AblationFlags(
        subject_anchors="subject-anchors" not in disable,
        identity_embeddings="identity-embeddings" not in disable,
    )


# --- commands -----------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    from .world import build_dataset

    cfg = _resolve_config(args)
    pose = None
    if (args.pose_min is None) != (args.pose_max is None):
        raise UsageError("--pose-min and --pose-max must be given together")
    if args.pose_min is not None:
        pose = (args.pose_min, args.pose_max)
    manifest = build_dataset(args.out, args.scenes, args.mix, _resolve_seed(args), cfg, pose_range_deg=pose)
    print(f"wrote {args.scenes} scenes -> {manifest}")
    return 0


def _cmd_train(args) -> int:
    from .training import train_stage

    cfg = _resolve_config(args)
    stage_kw = {}
    for src, dst in [("steps", "steps"), ("lr", "lr"), ("batch", "batch_size"),
                     ("weight_decay", "weight_decay"), ("grad_clip", "grad_clip")]:
        value = getattr(args, src)
        if value is not None:
            stage_kw[dst] = value
    stage = make_stage_config(args.stage, **stage_kw)
    ckpt = train_stage(
        cfg, stage, args.data, _resolve_seed(args), args.out, init_ckpt=args.init, flags=_flags(args.disable)
    )
    print(f"checkpoint -> {ckpt}")
    return 0


def _cmd_sample(args) -> int:
    from .assembly import Assembler, load_prepared_dataset, sample_scenes
    from .training import load_model_checkpoint

    cfg = _resolve_config(args)
    seed = _resolve_seed(args)
    model, meta, _ = load_model_checkpoint(args.ckpt, cfg)
    scenes = load_prepared_dataset(args.data, cfg, anchors_enabled=model.flags.subject_anchors)
    if args.scene_id:
        wanted = set(args.scene_id)
        scenes = [ps for ps in scenes if ps.scene_id in wanted]
        if not scenes:
            raise UsageError(f"scene ids {sorted(wanted)} not present in {args.data}")
    assembler = Assembler(cfg, anchors_enabled=model.flags.subject_anchors)
    steps = args.steps or cfg.flow.sample_steps
    codecs = assembler.codecs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list] = {}
    for ps in scenes:
        groups.setdefault(ps.group_key, []).append(ps)
    for key in sorted(groups, key=repr):
        chunk = groups[key]
        lat_v, lat_a = sample_scenes(model, assembler, chunk, steps, seed)
        for i, ps in enumerate(chunk):
            sid = ps.scene_id
            if lat_v is not None:
                tensorio.save_tensor(out / f"sample_s{sid:05d}_video_latent.iapl", lat_v[i])
                video = codecs.decode_video(VideoLatent(lat_v[i].astype(np.float64), cfg.world.fps_latent))
                tensorio.save_tensor(out / f"sample_s{sid:05d}_video.iapl", video)
            if lat_a is not None:
                tensorio.save_tensor(out / f"sample_s{sid:05d}_audio_latent.iapl", lat_a[i])
                audio = codecs.decode_audio(AudioLatent(lat_a[i].astype(np.float64), cfg.world.tokens_per_second))
                tensorio.save_tensor(out / f"sample_s{sid:05d}_audio.iapl", audio)
    print(f"sampled {len(scenes)} scenes @ {steps} steps -> {out}")
    return 0


def _cmd_eval(args) -> int:
    from .assembly import load_prepared_dataset
    from .evaluation import evaluate_model
    from .training import load_model_checkpoint

    cfg = _resolve_config(args)
    model, meta, _ = load_model_checkpoint(args.ckpt, cfg)
    scenes = load_prepared_dataset(args.data, cfg, anchors_enabled=model.flags.subject_anchors)
    report = evaluate_model(model, scenes, cfg, _resolve_seed(args), sample_steps=args.steps)
    print(report.format_table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = report.as_dict()
        payload["checkpoint"] = str(args.ckpt)
        payload["stage"] = meta.get("stage")
        payload["flags"] = meta.get("flags")
        out.write_text(json.dumps(payload, sort_keys=True, indent=1))
        with open(out.with_suffix(".jsonl"), "w") as fh:
            for rec in report.scene_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"report -> {out}")
    return 0


def _cmd_ablate(args) -> int:
    from .training import run_schedule

    cfg = _resolve_config(args)
    seed = _resolve_seed(args)
    flags = _flags(args.disable)
    root = Path(args.data_root)
    manifests = {}
    for mix in ("unimodal_audio", "unimodal_video", "paired", "multiview", "eval"):
        manifest = root / mix / "manifest.jsonl"
        if not manifest.exists():
            raise UsageError(f"missing dataset manifest {manifest}")
        manifests[mix] = manifest
    result = run_schedule(
        cfg,
        manifests,
        seed,
        args.out,
        flags=flags,
        steps_scale=args.steps_scale,
        one_stage=args.one_stage,
        include_stage3=not args.skip_stage3,
        batch_size=args.batch,
    )
    print(json.dumps(result["report"], sort_keys=True, indent=1))
    print(f"tagged report -> {result['report_path']}")
    return 0


def _cmd_curate(args) -> int:
    root = Path(args.manifest).parent
    clips = []
    with open(args.manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            face = tensorio.load_tensor(root / row["face_embedding"]).astype(np.float64)
            voice = tensorio.load_tensor(root / row["speaker_embedding"]).astype(np.float64)
            clips.append(ClipRecord(row["clip_id"], face, voice, frozenset(row.get("transcript_tokens", []))))
    groups, pairs = curate(clips, args.tau_face, args.tau_voice, args.max_overlap)
    with open(args.out_groups, "w") as fh:
        for g in groups:
            fh.write(json.dumps({"group_id": g.group_id, "members": g.members, "provenance": g.provenance}) + "\n")
    with open(args.out_pairs, "w") as fh:
        for ref, tgt in pairs:
            fh.write(json.dumps({"reference": ref, "target": tgt}) + "\n")
    print(f"{len(clips)} clips -> {len(groups)} groups, {len(pairs)} pairs")
    return 0


def _cmd_inspect_positions(args) -> int:
    cfg = _resolve_config(args)
    w, m = cfg.world, cfg.model
    if not 1 <= args.subjects <= m.k_max:
        raise UsageError(f"--subjects must be in 1..{m.k_max}")
    from .binding import grid_shape

    rows, cols = grid_shape(args.views)
    patches = w.ref_image_size // cfg.codec.patch_size
    ref_steps = args.audio_ref_steps or w.ref_audio_steps
    layout = TokenLayout(
        t_video_max=w.latent_frames,
        t_audio_max=w.audio_steps,
        audio_scale=w.fps_latent / w.tokens_per_second,
        audio_ref_window=m.audio_ref_window,
        k_max=m.k_max,
        video_grid=(w.latent_frames, w.frame_h // cfg.codec.patch_size, w.frame_w // cfg.codec.patch_size),
        audio_steps=w.audio_steps,
        visual_refs=[(k, rows * patches, cols * patches) for k in range(1, args.subjects + 1)],
        audio_refs=[(k, ref_steps) for k in range(1, args.subjects + 1)],
    )
    video, audio = assign_positions(layout)
    lines = []
    for tower, seq in (("video", video), ("audio", audio)):
        lines.append(f"# tower={tower}")
        for i in range(len(seq)):
            role = "reference" if seq.roles[i] == ROLE_REF else "noisy"
            slot = int(seq.slots[i])
            t, h, wq = (int(v) for v in seq.positions[i])
            lines.append(f"{i} {role} {slot} {t} {h} {wq}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"positions -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "curate": _cmd_curate,
    "inspect-positions": _cmd_inspect_positions,
}


def _suggest(message: str, parser: _Parser) -> str:
    if "unrecognized arguments:" in message:
        bad = message.split("unrecognized arguments:")[1].strip().split()[0]
        options = set()
        for action in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
            for act in action._actions:  # noqa: SLF001
                options.update(act.option_strings)
        close = difflib.get_close_matches(bad, sorted(options), n=1)
        if close:
            return f"{message} (did you mean {close[0]}?)"
    if "invalid choice:" in message and "command" in message:
        bad = message.split("invalid choice:")[1].strip().split()[0].strip("'\"")
        close = difflib.get_close_matches(bad, list(_COMMANDS), n=1)
        if close:
            return f"{message} (did you mean {close[0]}?)"
    return message


def run_cli(argv: list[str]) -> int:
    """Dispatch a command line; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        import torch

        torch.set_num_threads(1)  # single-core box; also keeps runs reproducible
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {_suggest(str(exc), parser)}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, BrokenPipeError):
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
