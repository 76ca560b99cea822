"""Train the four Dense Aligner / Text Adapter cells on one synthetic split.

    python scripts/run_ablation.py --epochs 20 --out ablation.json
"""
import argparse
import json

from risadapt.experiments import ablation_config, ablation_ordering, run_ablation


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-val", type=int, default=128)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--decay-epoch", type=int, default=15)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    args = p.parse_args()

    cfg = ablation_config(args.epochs, args.decay_epoch, args.lr, args.batch_size, args.seed)
    results = run_ablation(cfg, n_train=args.n_train, n_val=args.n_val, data_seed=args.seed, val_seed=args.seed + 1)
    order = ablation_ordering(results)
    for name, ok in order["checks"].items():
        print(f"{'ok ' if ok else 'BAD'} {name}")
    print("strict ordering:", order["strict_order"])
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": cfg.to_dict(), "results": results, "ordering": order}, fh, indent=1)


if __name__ == "__main__":
    main()
