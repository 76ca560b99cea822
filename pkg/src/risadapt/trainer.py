"""Adapter + head training loop, checkpoints and deterministic resume.

Checkpoint layout (a directory)::

    params.bin      raw little-endian tensor bytes, concatenated
    manifest.json   {"step", "epoch", "config_hash", "config", "sha256",
                     "tensors": {name: {"shape", "dtype", "offset", "nbytes"}},
                     "param_groups": [...]}

Only trainable tensors, Adam state and the torch RNG state are stored; frozen
backbones are rebuilt from the config's init seed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ProjectConfig, TrainConfig
from .dataio.batching import EncodedDataset, epoch_batches, steps_per_epoch
from .errors import ChecksumError, ConfigError, TrainingDiverged
from .model import RISModel, build_model, loss_targets
from .objective import batch_iou, contrastive_loss
from .ris_head import predict_mask

log = logging.getLogger(__name__)

FORMAT = "risadapt-checkpoint/1"


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    optimizer: dict
    step: int
    config: dict
    config_hash: str
    rng_state: torch.Tensor
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Hard step: base_lr before decay_epoch, base_lr * decay_factor from it on (epochs 0-indexed)."""
    return cfg.base_lr if epoch < cfg.decay_epoch else cfg.base_lr * cfg.decay_factor


def make_optimizer(model: RISModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.trainable_parameters(), lr=cfg.base_lr, betas=tuple(cfg.betas),
                            eps=cfg.eps, weight_decay=cfg.weight_decay)


# Serialisation ---------------------------------------------------------------

def _flatten(ckpt: Checkpoint):
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    for idx, state in ckpt.optimizer["state"].items():
        for key, value in state.items():
            tensors[f"optim/{idx}/{key}"] = torch.as_tensor(value)
    tensors["rng/torch"] = ckpt.rng_state
    return tensors


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Atomic write: build in a temp dir next to ``path`` and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    entries = {}
    offset = 0
    digest = hashlib.sha256()
    with open(tmp / "params.bin", "wb") as fh:
        for name, t in _flatten(ckpt).items():
            arr = t.detach().cpu().contiguous().numpy()
            blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(blob)
            digest.update(blob)
            entries[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset,
                             "nbytes": len(blob)}
            offset += len(blob)
        fh.flush()
        os.fsync(fh.fileno())
    manifest = {
        "format": FORMAT,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "sha256": digest.hexdigest(),
        "tensors": entries,
        "param_groups": ckpt.optimizer["param_groups"],
        "extra": ckpt.extra,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if path.exists():
        old = path.with_name(f".{path.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"unreadable checkpoint manifest: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise ChecksumError(f"unknown checkpoint format {manifest.get('format')!r}")
    data = (path / "params.bin").read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"checksum mismatch in {path / 'params.bin'}")
    tensors = {}
    for name, e in manifest["tensors"].items():
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    state: dict = {}
    for k, v in tensors.items():
        if k.startswith("optim/"):
            _, idx, key = k.split("/", 2)
            state.setdefault(int(idx), {})[key] = v
    optimizer = {"state": state, "param_groups": manifest["param_groups"]}
    return Checkpoint(params, optimizer, manifest["step"], manifest["config"], manifest["config_hash"],
                      tensors["rng/torch"], manifest.get("epoch", 0), manifest.get("extra", {}))


def snapshot(model: RISModel, opt, step: int, epoch: int, cfg: ProjectConfig, **extra) -> Checkpoint:
    params = {n: p.detach().clone() for n, p in model.named_trainable_parameters()}
    state = opt.state_dict()
    optimizer = {
        "state": {i: {k: (v.clone() if torch.is_tensor(v) else torch.tensor(v)) for k, v in s.items()}
                  for i, s in state["state"].items()},
        "param_groups": json.loads(json.dumps(state["param_groups"])),
    }
    return Checkpoint(params, optimizer, step, cfg.to_dict(), cfg.hash(), torch.get_rng_state(), epoch, extra)


def apply_checkpoint(model: RISModel, ckpt: Checkpoint, opt=None) -> None:
    named = dict(model.named_trainable_parameters())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise ConfigError(f"checkpoint tensors do not match the model's trainable set: {missing[:5]}")
    with torch.no_grad():
        for name, p in named.items():
            src = ckpt.params[name]
            if tuple(src.shape) != tuple(p.shape):
                raise ConfigError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
    if opt is not None:
        opt.load_state_dict(ckpt.optimizer)


def model_from_checkpoint(path) -> tuple[RISModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg = ProjectConfig.from_dict(ckpt.config)
    if cfg.hash() != ckpt.config_hash:
        raise ChecksumError("stored config does not match its hash")
    model = build_model(cfg)
    apply_checkpoint(model, ckpt)
    return model, ckpt


# Training --------------------------------------------------------------------

def _project_config(model: RISModel, cfg: TrainConfig | None) -> ProjectConfig:
    if cfg is None:
        return model.cfg
    project = model.cfg.replace(train=cfg).validate()
    for flag, stack, layers in (("use_DA", model.dense_aligners, project.dense_aligner.placement_layers),
                                ("use_TA", model.text_adapters, project.text_adapter.placement_layers)):
        if layers and getattr(cfg, flag) != (stack is not None):
            raise ConfigError(f"train.{flag}={getattr(cfg, flag)} does not match the model; rebuild with ablate()")
    return project


def train(model: RISModel, dataset: EncodedDataset, cfg: TrainConfig | None = None, out_dir=None,
          max_steps: int | None = None, checkpoint: Checkpoint | None = None, on_step=None,
          extra: dict | None = None):
    """Train adapters and head with Adam.

    Returns ``(checkpoint, metric_log)``.  With ``out_dir`` set, metric lines
    are appended to ``metrics.jsonl`` and the final state is written to
    ``checkpoint/``.  A non-finite loss writes ``last_good/`` (when ``out_dir``
    is set) and raises :class:`TrainingDiverged`.  ``extra`` (JSON-able) is
    stored in the checkpoint manifest and carried over on resume.
    """
    project = _project_config(model, cfg)
    tcfg = project.train
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    frozen = [p for p in model.parameters() if not p.requires_grad]
    if not frozen:
        raise RuntimeError("backbones are not frozen")
    spe = steps_per_epoch(n, tcfg.batch_size)
    end = tcfg.epochs * spe if max_steps is None else min(tcfg.epochs * spe, max_steps)

    opt = make_optimizer(model, tcfg)
    step = 0
    extra = dict(checkpoint.extra if checkpoint is not None else {}, **(extra or {}))
    if checkpoint is not None:
        if checkpoint.config_hash != project.hash():
            raise ConfigError("checkpoint config hash does not match the training config")
        apply_checkpoint(model, checkpoint, opt)
        torch.set_rng_state(checkpoint.rng_state)
        step = checkpoint.step

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a" if checkpoint is not None else "w")

    records = []
    model.train()
    try:
        while step < end:
            epoch, k = divmod(step, spe)
            idx = epoch_batches(n, tcfg.batch_size, tcfg.seed, epoch)[k]
            lr = lr_at_epoch(tcfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            images, ids, masks = dataset.batch(idx)
            dtype = next(model.head.parameters()).dtype
            out = model(images.to(dtype), ids)
            logits, target = loss_targets(out.logits, masks, tcfg.loss_resolution)
            loss = contrastive_loss(logits, target)
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(snapshot(model, opt, step, epoch, project, **extra), out_dir / "last_good")
                raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step} (epoch {epoch})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tcfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), tcfg.grad_clip)
            opt.step()
            step += 1
            with torch.no_grad():
                pred = predict_mask(out.pair, masks.shape[-2:], 0.5, project.head.resize_mode)
                batch_miou = float(np.mean(batch_iou(pred.mask[:, 0], masks)))
            rec = {"step": step, "epoch": epoch, "loss": float(loss.item()), "miou": batch_miou, "lr": lr}
            records.append(rec)
            if metrics_fh is not None and (step % tcfg.log_every == 0 or step == end):
                metrics_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        model.eval()

    final_epoch = step // spe
    ckpt = snapshot(model, opt, step, final_epoch, project, **extra)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint")
    return ckpt, records


def resume(checkpoint, dataset: EncodedDataset, cfg: ProjectConfig | None = None, out_dir=None,
           max_steps: int | None = None):
    """Continue a run from a checkpoint (object or directory).

    Refuses when ``cfg`` is given and its hash differs from the checkpoint's.
    Returns ``(model, checkpoint, metric_log)``.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    stored = ProjectConfig.from_dict(ckpt.config)
    if stored.hash() != ckpt.config_hash:
        raise ChecksumError("stored config does not match its hash")
    if cfg is not None and cfg.hash() != ckpt.config_hash:
        raise ConfigError("config hash differs from the checkpoint; refusing to resume")
    model = build_model(stored)
    new_ckpt, records = train(model, dataset, out_dir=out_dir, max_steps=max_steps, checkpoint=ckpt)
    return model, new_ckpt, records


# Evaluation ------------------------------------------------------------------

@torch.no_grad()
def evaluate(model: RISModel, dataset: EncodedDataset, batch_size=16, threshold=0.5) -> dict:
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    model.eval()
    ious = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        images, ids, masks = dataset.batch(idx)
        pred = model.predict(images, ids, threshold=threshold, out_size=masks.shape[-2:])
        ious.extend(batch_iou(pred.mask[:, 0], masks))
    per_sample = [{"sample_id": s, "iou": v} for s, v in zip(dataset.sample_ids, ious)]
    return {"miou": float(sum(ious) / len(ious)), "n": len(ious), "threshold": threshold,
            "per_sample": per_sample}


def total_steps(n: int, cfg: TrainConfig) -> int:
    return cfg.epochs * math.ceil(n / cfg.batch_size)


__all__ = ["Checkpoint", "evaluate", "load_checkpoint", "lr_at_epoch", "model_from_checkpoint", "resume",
           "save_checkpoint", "train"]
