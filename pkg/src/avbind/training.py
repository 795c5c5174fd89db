"""Multi-stage trainer: unimodal towers first, joint fusion next, multi-view last.

Each stage trains a selected parameter subset on one dataset mix with the
fusion gate it mandates. Batching, interpolation times, and noise are all
keyed by (seed, step), so a run can be stopped, checkpointed, and resumed
with bit-identical losses.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .assembly import Assembler, PreparedScene, forward_towers, load_prepared_dataset
from .config import STAGE_PRESETS, AblationFlags, Config, StageConfig

STAGE_DEFAULT_STEPS = {name: preset["steps"] for name, preset in STAGE_PRESETS.items()}
from .flow import joint_loss
from .seeding import derived_rng, derived_seed
from .tensorio import load_checkpoint, save_checkpoint
from .towers import DualTowerModel

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class CheckpointMismatchError(ValueError):
    """Raised when a checkpoint's architecture does not match the config."""

    def __init__(self, diffs: list[str]) -> None:
        self.diffs = diffs
        super().__init__("checkpoint/config mismatch: " + "; ".join(diffs))


@dataclass
class RunRecord:
    step: int
    loss_v: float
    loss_a: float
    total: float
    wall: float
    seed: int
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "loss_v": self.loss_v,
                "loss_a": self.loss_a,
                "total": self.total,
                "wall": self.wall,
                "seed": self.seed,
                "config_hash": self.config_hash,
            },
            sort_keys=True,
        )


def trainable_parameters(model: DualTowerModel, selector: str) -> list[tuple[str, torch.nn.Parameter]]:
    """Named parameters a stage may update.

    Unimodal stages touch only their tower (plus its condition encoder and
    head); shared pieces (timestep embedder, identity table, fusion) stay
    frozen so two unimodal runs merge cleanly into one checkpoint.
    """
    if selector == "all":
        return list(model.named_parameters())
    if selector not in ("audio", "video"):
        raise ValueError(f"unknown trainable selector {selector!r}")
    prefixes = {
        "audio": ("audio_blocks.", "cond_proj_a.", "head_a."),
        "video": ("video_blocks.", "cond_proj_v.", "head_v."),
    }[selector]
    return [(n, p) for n, p in model.named_parameters() if n.startswith(prefixes)]


def make_optimizer(params: Sequence[torch.nn.Parameter], lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=weight_decay, foreach=True)


# --- checkpoints ------------------------------------------------------------------


def diff_architectures(current: dict, stored: dict, prefix: str = "") -> list[str]:
    diffs = []
    for key in sorted(set(current) | set(stored)):
        path = f"{prefix}{key}"
        a, b = current.get(key, "<missing>"), stored.get(key, "<missing>")
        if isinstance(a, dict) and isinstance(b, dict):
            diffs.extend(diff_architectures(a, b, prefix=path + "."))
            continue
        if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
            a, b = list(a), list(b)
        if a != b:
            diffs.append(f"{path}: {b!r} (checkpoint) vs {a!r} (config)")
    return diffs


def save_model_checkpoint(
    path: str | Path,
    model: DualTowerModel,
    cfg: Config,
    stage: str,
    step: int,
    seed: int,
    flags: AblationFlags,
    optimizer: Optional[torch.optim.AdamW] = None,
    trainable: Optional[list[tuple[str, torch.nn.Parameter]]] = None,
) -> None:
    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None and trainable is not None:
        for name, param in trainable:
            state = optimizer.state.get(param)
            if not state:
                continue
            tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].cpu().numpy()
            tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy()
            tensors[f"opt.{name}.step"] = np.asarray(float(state["step"]), dtype=np.float32)
    meta = {
        "format": "model-checkpoint",
        "stage": stage,
        "step": step,
        "seed": seed,
        "config_hash": cfg.architecture_hash(),
        "architecture": cfg.architecture_dict(),
        "flags": {"subject_anchors": flags.subject_anchors, "identity_embeddings": flags.identity_embeddings},
    }
    save_checkpoint(path, meta, tensors)


def load_model_checkpoint(path: str | Path, cfg: Config) -> tuple[DualTowerModel, dict, dict]:
    """Rebuild the model from a checkpoint, verifying architecture compatibility."""
    meta, tensors = load_checkpoint(path)
    if meta.get("config_hash") != cfg.architecture_hash():
        raise CheckpointMismatchError(diff_architectures(cfg.architecture_dict(), meta.get("architecture", {})))
    flags = AblationFlags(**meta.get("flags", {}))
    model = DualTowerModel(cfg, flags)
    state = {k[len("model.") :]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    opt_state = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    return model, meta, opt_state


def restore_optimizer_state(
    optimizer: torch.optim.AdamW, trainable: list[tuple[str, torch.nn.Parameter]], opt_state: dict
) -> None:
    for name, param in trainable:
        key = f"opt.{name}.exp_avg"
        if key not in opt_state:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(opt_state[f"opt.{name}.step"])),
            "exp_avg": torch.from_numpy(opt_state[key].copy()),
            "exp_avg_sq": torch.from_numpy(opt_state[f"opt.{name}.exp_avg_sq"].copy()),
        }


# --- data batching --------------------------------------------------------------------


class SceneSampler:
    """Deterministic per-step batch composition over layout-compatible groups."""

    def __init__(self, scenes: Sequence[PreparedScene], batch_size: int, seed: int) -> None:
        if not scenes:
            raise ValueError("dataset is empty")
        self.scenes = list(scenes)
        self.batch_size = batch_size
        self.seed = seed
        self.groups: dict[tuple, list[int]] = {}
        for i, ps in enumerate(self.scenes):
            self.groups.setdefault(ps.group_key, []).append(i)
        self.keys = sorted(self.groups.keys(), key=repr)
        self.weights = np.array([len(self.groups[k]) for k in self.keys], dtype=np.float64)
        self.weights /= self.weights.sum()

    def batch(self, step: int) -> list[PreparedScene]:
        rng = derived_rng(self.seed, 2, step)
        key = self.keys[int(rng.choice(len(self.keys), p=self.weights))]
        pool = self.groups[key]
        idx = rng.choice(len(pool), size=self.batch_size, replace=len(pool) < self.batch_size)
        return [self.scenes[pool[i]] for i in idx]


# --- the stage loop ----------------------------------------------------------------------


def filter_mix(scenes: Sequence[PreparedScene], mix: str) -> list[PreparedScene]:
    subset = [ps for ps in scenes if ps.mix == mix]
    return subset if subset else list(scenes)


def train_stage(
    cfg: Config,
    stage: StageConfig,
    manifest: str | Path,
    seed: int,
    out_dir: str | Path,
    init_ckpt: Optional[str | Path] = None,
    flags: Optional[AblationFlags] = None,
    log_name: Optional[str] = None,
) -> Path:
    """Run one training stage and write its checkpoint; returns the path.

    With a same-stage init checkpoint whose step is below the budget, training
    resumes mid-run and reproduces an uninterrupted run bit for bit.
    """
    flags = flags or AblationFlags()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lam = cfg.flow.lambda_audio

    start_step = 0
    if init_ckpt is not None:
        model, meta, opt_state = load_model_checkpoint(init_ckpt, cfg)
        model.flags = flags
        if meta["stage"] == stage.stage and meta["step"] < stage.steps:
            start_step = meta["step"]
    else:
        torch.manual_seed(derived_seed(seed, 0))
        model = DualTowerModel(cfg, flags)
        opt_state = {}

    trainable = trainable_parameters(model, stage.trainable)
    optimizer = make_optimizer([p for _, p in trainable], stage.lr, stage.weight_decay)
    if start_step:
        restore_optimizer_state(optimizer, trainable, opt_state)

    assembler = Assembler(cfg, anchors_enabled=flags.subject_anchors)
    scenes = filter_mix(load_prepared_dataset(manifest, cfg), stage.mix)
    sampler = SceneSampler(scenes, stage.batch_size, seed)

    log_path = out / (log_name or f"{stage.stage}_run.jsonl")
    config_hash = cfg.architecture_hash()
    t0 = time.monotonic()
    model.train()
    with open(log_path, "a" if start_step else "w") as log:
        for step in range(start_step, stage.steps):
            for group in optimizer.param_groups:
                group["lr"] = stage_lr(stage, step)
            batch = assembler.flow_batch(sampler.batch(step), seed, step)
            u_v, u_a = forward_towers(model, assembler, batch, stage.fusion_gate)
            total, report = joint_loss(u_v, u_a, batch.target_v, batch.target_a, lam=lam)
            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_([p for _, p in trainable], stage.grad_clip)
            optimizer.step()
            record = RunRecord(
                step=step + 1,
                loss_v=report.loss_v,
                loss_a=report.loss_a,
                total=report.total,
                wall=time.monotonic() - t0,
                seed=seed,
                config_hash=config_hash,
            )
            log.write(record.to_json() + "\n")

    ckpt_path = out / f"ckpt_{stage.stage}.iapc"
    save_model_checkpoint(
        ckpt_path, model, cfg, stage.stage, stage.steps, seed, flags, optimizer=optimizer, trainable=trainable
    )
    return ckpt_path


def read_run_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_schedule(
    cfg: Config,
    manifests: dict[str, str | Path],
    seed: int,
    out_dir: str | Path,
    flags: Optional[AblationFlags] = None,
    steps_scale: float = 1.0,
    one_stage: bool = False,
    include_stage3: bool = True,
    batch_size: Optional[int] = None,
    eval_steps: Optional[int] = None,
) -> dict:
    """Full training pipeline plus held-out evaluation, tagged by ablation flags.

    Staged: audio tower, then video tower (fusion masked), then joint training
    with fusion active, then optional multi-view fine-tuning. With
    ``one_stage`` the same total step budget is spent on joint paired
    training from scratch instead.
    """
    from .config import make_stage_config
    from .evaluation import evaluate_model

    flags = flags or AblationFlags()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def stage_of(name: str) -> StageConfig:
        kw = {"steps": max(1, int(round(STAGE_DEFAULT_STEPS[name] * steps_scale)))}
        if batch_size is not None:
            kw["batch_size"] = batch_size
        return make_stage_config(name, **kw)

    checkpoints: dict[str, Path] = {}
    if one_stage:
        total = sum(
            max(1, int(round(STAGE_DEFAULT_STEPS[s] * steps_scale)))
            for s in ("stage1_audio", "stage1_video", "stage2_joint")
        )
        kw = {"steps": total}
        if batch_size is not None:
            kw["batch_size"] = batch_size
        stage = make_stage_config("one_stage", **kw)
        final = train_stage(cfg, stage, manifests["paired"], seed, out, flags=flags)
        checkpoints["one_stage"] = final
    else:
        ck_a = train_stage(cfg, stage_of("stage1_audio"), manifests["unimodal_audio"], seed, out, flags=flags)
        checkpoints["stage1_audio"] = ck_a
        ck_v = train_stage(
            cfg, stage_of("stage1_video"), manifests["unimodal_video"], seed, out, init_ckpt=ck_a, flags=flags
        )
        checkpoints["stage1_video"] = ck_v
        ck_2 = train_stage(
            cfg, stage_of("stage2_joint"), manifests["paired"], seed, out, init_ckpt=ck_v, flags=flags
        )
        checkpoints["stage2_joint"] = ck_2
        final = ck_2
        if include_stage3:
            final = train_stage(
                cfg, stage_of("stage3_multiview"), manifests["multiview"], seed, out, init_ckpt=ck_2, flags=flags
            )
            checkpoints["stage3_multiview"] = final

    from .assembly import load_prepared_dataset

    model, _, _ = load_model_checkpoint(final, cfg)
    eval_scenes = load_prepared_dataset(manifests["eval"], cfg, anchors_enabled=flags.subject_anchors)
    report = evaluate_model(model, eval_scenes, cfg, seed, sample_steps=eval_steps)
    payload = report.as_dict()
    payload["flags"] = flags.tag()
    payload["seed"] = seed
    payload["checkpoints"] = {k: str(v) for k, v in checkpoints.items()}
    report_path = out / f"report_{flags.tag()}_seed{seed}.json"
    report_path.write_text(json.dumps(payload, sort_keys=True, indent=1))
    return {"checkpoints": checkpoints, "report": payload, "report_path": report_path, "final": final}


