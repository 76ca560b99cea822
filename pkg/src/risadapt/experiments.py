"""Small end-to-end experiments shared by ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import time

import torch

from .config import ProjectConfig, TrainConfig, overfit_config, toy_config
from .dataio import EncodedDataset, synth_generate, synth_vocab
from .model import ABLATION_MATRIX, ablate, build_model
from .trainer import evaluate, train


def synth_dataset(seed: int, n: int, cfg: ProjectConfig) -> EncodedDataset:
    samples = synth_generate(seed, n, image_size=cfg.backbones.vision.image_size)
    return EncodedDataset.from_samples(samples, synth_vocab(), cfg.backbones.text.max_seq_len)


def overfit_run(n_samples=16, seed=0, max_steps=300, on_step=None) -> dict:
    """Memorise a handful of samples; returns loss ratio and training-set mIoU."""
    cfg = overfit_config(n_samples)
    data = synth_dataset(seed, n_samples, cfg)
    model = build_model(cfg)
    t0 = time.perf_counter()
    _, records = train(model, data, max_steps=max_steps, on_step=on_step)
    elapsed = time.perf_counter() - t0
    report = evaluate(model, data)
    return {"steps": len(records), "initial_loss": records[0]["loss"], "final_loss": records[-1]["loss"],
            "loss_ratio": records[-1]["loss"] / records[0]["loss"], "train_miou": report["miou"],
            "seconds": elapsed, "records": records}


def ablation_config(epochs=20, decay_epoch=15, base_lr=5e-4, batch_size=16, seed=0) -> ProjectConfig:
    cfg = toy_config()
    train_cfg = TrainConfig(epochs=epochs, decay_epoch=decay_epoch, base_lr=base_lr, batch_size=batch_size,
                            seed=seed)
    return cfg.replace(train=train_cfg).validate()


def run_ablation(cfg: ProjectConfig | None = None, n_train=512, n_val=128, data_seed=0, val_seed=1,
                 max_steps=None, log=print) -> dict:
    """Train the four DA/TA cells on identical data and report validation mIoU per cell."""
    cfg = cfg or ablation_config()
    train_set = synth_dataset(data_seed, n_train, cfg)
    val_set = synth_dataset(val_seed, n_val, cfg)
    results = {}
    for (use_da, use_ta), name in ABLATION_MATRIX.items():
        variant = ablate(cfg, use_da, use_ta)
        model = build_model(variant)
        t0 = time.perf_counter()
        _, records = train(model, train_set, max_steps=max_steps)
        val = evaluate(model, val_set, variant.eval.batch_size, variant.eval.threshold)
        trainable = sum(p.numel() for p in model.trainable_parameters())
        results[name] = {"use_DA": use_da, "use_TA": use_ta, "val_miou": val["miou"],
                         "final_loss": records[-1]["loss"], "trainable": trainable,
                         "seconds": time.perf_counter() - t0}
        if log:
            log(f"{name:<9} DA={int(use_da)} TA={int(use_ta)} val mIoU {val['miou']:.4f} "
                f"loss {records[-1]['loss']:.4f} ({results[name]['seconds']:.0f}s)")
    return results


def ablation_ordering(results: dict, tol=0.02) -> dict:
    full = results["full"]["val_miou"]
    base = results["baseline"]["val_miou"]
    singles = {k: results[k]["val_miou"] for k in ("da-only", "ta-only")}
    checks = {f"full >= {k} - {tol}": full >= v - tol for k, v in singles.items()}
    checks.update({f"{k} >= baseline - {tol}": v >= base - tol for k, v in singles.items()})
    strict = full >= max(singles.values()) and min(singles.values()) >= base
    return {"checks": checks, "pass": all(checks.values()), "strict_order": strict}


def dim_sweep(dims=((64, 64), (128, 64), (128, 128), (256, 64))) -> list[dict]:
    """Adapter census across (visual, text) adapter widths on the ViT-B shaped backbones."""
    from .config import dino_b_config
    from .objective import param_report

    rows = []
    for da, ta in dims:
        cfg = dino_b_config(da_dim=da, ta_dim=ta)
        with torch.device("meta"):
            report = param_report(build_model(cfg))
        rows.append({"da_dim": da, "ta_dim": ta, "adapters": report.adapter_trainable,
                     "dense_aligners": report.group("dense_aligners").trainable_count,
                     "text_adapters": report.group("text_adapters").trainable_count,
                     "vision_fraction": report.vision_fraction, "backbone_fraction": report.backbone_fraction})
    return rows


__all__ = ["ablation_config", "ablation_ordering", "dim_sweep", "overfit_run", "run_ablation", "synth_dataset"]
