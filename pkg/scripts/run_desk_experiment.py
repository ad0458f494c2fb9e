"""Run the desk-scale synthetic experiment and print the comparison tables.

    python3 scripts/run_desk_experiment.py --out runs/desk
    python3 scripts/run_desk_experiment.py --out runs/quick --epochs 5 --ablation-epochs 2 --n-train 8 --n-test 2

Re-running with the same --out resumes: finished runs are not retrained.
"""
import argparse
import logging

from octcoherent.experiment import ABLATIONS, ExperimentConfig, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--ablation-epochs", type=int, default=10)
    p.add_argument("--n-train", type=int, default=32)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", nargs="*", help="subset of: proposed no_smooth " + " ".join(ABLATIONS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig(n_train=args.n_train, n_test=args.n_test, epochs=args.epochs,
                           ablation_epochs=args.ablation_epochs, seed=args.seed)
    reports = run_experiment(args.out, cfg, tuple(args.runs) if args.runs else None)
    for name, r in reports.items():
        print(f"{name:10s} MAD px {[round(x, 3) for x in r.seg_mad_px]}  "
              f"disp MAD {r.displacement_mad_px:.3f}  |adj| {r.mean_abs_adjacent_diff:.3f}  "
              f"central {r.central_bin_mass:.3f}")
    print(open(f"{args.out}/comparison.md").read())


if __name__ == "__main__":
    main()
