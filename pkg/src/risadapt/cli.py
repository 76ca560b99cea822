"""Command line entry point: ``risadapt {synth,train,eval,predict,params}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import PRESET_TARGETS, PRESETS, ProjectConfig, load_config, save_config
from .dataio import EncodedDataset, Vocab, load_refcoco_format, synth_generate, synth_vocab, tokenize, write_dataset
from .dataio.refcoco import read_image, resize_pair
from .errors import ChecksumError, ConfigError, GeometryError, TrainingDiverged
from .model import ablate, build_model
from .objective import param_report
from .trainer import evaluate, load_checkpoint, model_from_checkpoint, resume, train

log = logging.getLogger("risadapt")

ABLATIONS = {"none": (True, True), "no-da": (False, True), "no-ta": (True, False), "no-adapters": (False, False)}
BUDGET_TOLERANCE = 0.15


class UsageError(Exception):
    pass


def _threads():
    n = os.environ.get("RIS_NUM_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"RIS_NUM_THREADS must be an integer, got {n!r}") from None


def _config(args) -> ProjectConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    preset = getattr(args, "preset", None) or "toy"
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset]()


def _load_data(data_dir, image_size):
    data_dir = Path(data_dir)
    ann = data_dir / "annotations.json"
    if not ann.is_file():
        raise UsageError(f"no annotations.json in {data_dir}")
    result = load_refcoco_format(ann, data_dir, image_size)
    for bad in result.malformed:
        log.warning("skipping entry %d: %s", bad.index, bad.reason)
    return result.samples


def _vocab_for(data_dir, samples):
    path = Path(data_dir) / "vocab.txt"
    return Vocab.load(path) if path.is_file() else Vocab.build(s.expression for s in samples)


def write_tensor(path, tensor: torch.Tensor) -> None:
    """Raw little-endian float32 blob plus a ``.json`` sidecar with shape and checksum."""
    path = Path(path)
    arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
    blob = arr.tobytes()
    path.write_bytes(blob)
    meta = {"shape": list(arr.shape), "dtype": "float32", "byteorder": "little",
            "sha256": hashlib.sha256(blob).hexdigest()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def read_tensor(path) -> torch.Tensor:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise ChecksumError(f"checksum mismatch in {path}")
    return torch.from_numpy(np.frombuffer(blob, dtype="<f4").reshape(meta["shape"]).copy())


# Commands ----------------------------------------------------------------------

def cmd_synth(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out / "images", ignore_errors=True)
    samples = synth_generate(args.seed, args.n, image_size=args.size)
    write_dataset(samples, out, synth_vocab())
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args):
    if args.resume:
        ckpt = load_checkpoint(_checkpoint_dir(args.resume))
        cfg = ProjectConfig.from_dict(ckpt.config)
        if args.config and load_config(args.config).hash() != ckpt.config_hash:
            raise UsageError("--config differs from the checkpoint's config; refusing to resume")
    else:
        cfg = _config(args)
        cfg = ablate(cfg, *ABLATIONS[args.ablate])
    samples = _load_data(args.data, cfg.backbones.vision.image_size)
    if not samples:
        raise UsageError("training set is empty")
    vocab = _vocab_for(args.data, samples)
    if len(vocab) > cfg.backbones.text.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens but backbones.text.vocab_size is "
                          f"{cfg.backbones.text.vocab_size}")
    dataset = EncodedDataset.from_samples(samples, vocab, cfg.backbones.text.max_seq_len)
    train_set, val_set = dataset.split(cfg.data.val_fraction, cfg.data.split_seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    vocab.save(out / "vocab.txt")
    extra = {"vocab": vocab.tokens, "train_ids": train_set.sample_ids}
    if args.resume:
        _, ckpt, records = resume(ckpt, train_set, out_dir=out, max_steps=args.max_steps)
    else:
        model = build_model(cfg)
        ckpt, records = train(model, train_set, out_dir=out, max_steps=args.max_steps, extra=extra)
    summary = {"steps": ckpt.step, "final_loss": records[-1]["loss"] if records else None,
               "checkpoint": str(out / "checkpoint")}
    if len(val_set):
        model, _ = model_from_checkpoint(out / "checkpoint")
        summary["val_miou"] = evaluate(model, val_set, cfg.eval.batch_size, cfg.eval.threshold)["miou"]
    print(json.dumps(summary))
    return 0


def _checkpoint_dir(path):
    path = Path(path)
    if (path / "checkpoint" / "manifest.json").is_file():
        return path / "checkpoint"
    return path


def cmd_eval(args):
    model, ckpt = model_from_checkpoint(_checkpoint_dir(args.checkpoint))
    cfg = model.cfg
    samples = _load_data(args.data, cfg.backbones.vision.image_size)
    if not samples:
        raise UsageError("evaluation set is empty")
    vocab = Vocab(ckpt.extra["vocab"]) if "vocab" in ckpt.extra else _vocab_for(args.data, samples)
    dataset = EncodedDataset.from_samples(samples, vocab, cfg.backbones.text.max_seq_len)
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    report = evaluate(model, dataset, cfg.eval.batch_size, threshold)
    report["checkpoint_step"] = ckpt.step
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def overlay(image: np.ndarray, mask: np.ndarray, alpha=0.5) -> np.ndarray:
    out = image.astype(np.float32)
    tint = np.array([255.0, 0.0, 0.0])
    out[mask] = (1 - alpha) * out[mask] + alpha * tint
    return out.round().clip(0, 255).astype(np.uint8)


def cmd_predict(args):
    image_path = Path(args.image)
    if not image_path.is_file():
        raise UsageError(f"image not found: {image_path}")
    model, ckpt = model_from_checkpoint(_checkpoint_dir(args.checkpoint))
    cfg = model.cfg
    vocab = Vocab(ckpt.extra["vocab"]) if "vocab" in ckpt.extra else synth_vocab()
    image = read_image(image_path)
    h, w = image.shape[-2:]
    size = cfg.backbones.vision.image_size
    resized, _ = resize_pair(image, torch.zeros(h, w, dtype=torch.bool), size)
    ids, _ = tokenize(args.expression, vocab, cfg.backbones.text.max_seq_len)
    threshold = cfg.head.threshold if args.threshold is None else args.threshold
    pred = model.predict(resized[None], ids[None], threshold=threshold, out_size=(h, w))
    mask = pred.mask[0, 0].numpy()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / "mask.png")
    rgb = (image.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(overlay(rgb, mask)).save(out / "overlay.png")
    write_tensor(out / "logits.bin", pred.logits[0, 0])
    print(json.dumps({"mask": str(out / "mask.png"), "foreground_pixels": int(mask.sum()),
                      "threshold": threshold}))
    return 0


def budget_check(total: int, target: float, tol: float = BUDGET_TOLERANCE) -> dict:
    rel = total / target - 1.0
    return {"target": target, "relative_error": rel, "tolerance": tol, "pass": abs(total - target) <= tol * target}


def cmd_params(args):
    cfg = _config(args)
    with torch.device("meta"):
        model = build_model(cfg)
    report = param_report(model)
    target = args.target
    if target is None and not args.config:
        target = PRESET_TARGETS.get(args.preset or "toy")
    check = budget_check(report.adapter_trainable, target) if target else None
    if args.json:
        payload = report.to_dict()
        payload["budget"] = check
        print(json.dumps(payload, indent=1))
    else:
        print(report.to_table())
        if check:
            verdict = "PASS" if check["pass"] else "FAIL"
            print(f"adapter total {report.adapter_trainable:,} vs target {target / 1e6:.2f}M: "
                  f"{100 * check['relative_error']:+.1f}% ({verdict} at +/-{100 * check['tolerance']:.0f}%)")
    return 0


# Parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="risadapt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic referring-shapes dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train adapters and head")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", choices=sorted(ABLATIONS), default="none")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mIoU of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one image for one expression")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--expression", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threshold", type=float)
    r.set_defaults(func=cmd_predict)

    m = sub.add_parser("params", help="parameter census and budget check")
    m.add_argument("--config")
    m.add_argument("--preset", choices=sorted(PRESETS))
    m.add_argument("--target", type=float, help="adapter budget to compare against")
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ChecksumError, GeometryError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
