"""Memorise 16 synthetic samples with the toy model and report loss and mIoU."""
import argparse

from risadapt.experiments import overfit_run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    args = p.parse_args()

    def show(rec):
        if rec["step"] % 25 == 0:
            print(f"step {rec['step']:4d}  loss {rec['loss']:.4f}  batch mIoU {rec['miou']:.3f}  lr {rec['lr']:.1e}",
                  flush=True)

    res = overfit_run(args.n, args.seed, args.steps, on_step=show)
    print(f"loss {res['initial_loss']:.4f} -> {res['final_loss']:.4f} (ratio {res['loss_ratio']:.4f})")
    print(f"train mIoU {res['train_miou']:.4f} in {res['seconds']:.0f}s")


if __name__ == "__main__":
    main()
