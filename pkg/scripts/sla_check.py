"""Single-loss OpVaR against crude and conditional Monte Carlo compound quantiles."""
import argparse

from robopvar.gpd_model import ExceedanceSummary, GpdParams
from robopvar.oprisk import FrequencyModel, compound_mc_quantile, conditional_mc_quantile, opvar_single_loss


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--xi", type=float, default=0.7)
    ap.add_argument("--lam", type=float, default=10.0)
    ap.add_argument("--alpha", type=float, nargs="+", default=[0.99, 0.999, 0.9999])
    ap.add_argument("--reps", type=int, default=10**6)
    ap.add_argument("--seed", type=int, default=20261015)
    args = ap.parse_args()
    p, freq = GpdParams(0.0, args.xi, 1.0), FrequencyModel(args.lam)
    for a in args.alpha:
        sla = opvar_single_loss(p, ExceedanceSummary(1, 1, 0.0), freq, a).value
        crude = compound_mc_quantile(p, freq, a, args.reps, seed=args.seed).value
        cond = conditional_mc_quantile(p, freq, a, args.reps, seed=args.seed).value
        print(f"alpha={a}: single-loss {sla:.2f}  crude MC {crude:.2f} ({sla / crude - 1:+.2%})  "
              f"conditional MC {cond:.2f} ({sla / cond - 1:+.2%})")


if __name__ == "__main__":
    main()
