"""Adapter parameter counts across adapter widths on ViT-B shaped encoders."""
import argparse
import json

from risadapt.experiments import dim_sweep


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--json", action="store_true")
    args = p.parse_args()
    rows = dim_sweep(((32, 32), (64, 64), (128, 64), (128, 128), (256, 64), (256, 128)))
    if args.json:
        print(json.dumps(rows, indent=1))
        return
    print(f"{'DA':>5} {'TA':>5} {'aligners':>12} {'text':>10} {'total':>12} {'% vision':>9} {'% both':>8}")
    for r in rows:
        print(f"{r['da_dim']:>5} {r['ta_dim']:>5} {r['dense_aligners']:>12,} {r['text_adapters']:>10,} "
              f"{r['adapters']:>12,} {100 * r['vision_fraction']:>8.2f}% {100 * r['backbone_fraction']:>7.2f}%")


if __name__ == "__main__":
    main()
