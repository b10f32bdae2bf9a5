"""Error and AUROC of every checkpoint of a run, as a CSV table (alpha trade-off curve).

    python3 scripts/sweep_alpha.py runs/run-<hash>
"""
import argparse
import sys

from csnn.experiment import SWEEP, sweep_csv, sweep_run

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("run", help="run directory written by `csnn train`")
args = p.parse_args()

rows = sweep_run(args.run)
sys.stdout.write(sweep_csv(rows))
first, last = rows[0], rows[-1]
print(f"# wrote {args.run}/{SWEEP}; auroc {first['auroc']:.3f} at alpha {first['alpha']:.2f} "
      f"-> {last['auroc']:.3f} at alpha {last['alpha']:.2f}", file=sys.stderr)
