# Render a sweep.csv written by `mrmae evaluate --sweep` as accuracy curves.
# usage: python plot_sweep.py RUN_DIR/sweep.csv [out.png]
import csv
import sys
from collections import defaultdict

import numpy as np

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:  # plotting is an optional extra
    plt = None

path = sys.argv[1]
out = sys.argv[2] if len(sys.argv) > 2 else "sweep.png"

curves = defaultdict(list)
with open(path, newline="") as fh:
    for row in csv.DictReader(fh):
        curves[row["model"]].append((float(row["fraction"]), float(row["mean_acc"]), float(row["std_acc"])))

for name, pts in curves.items():
    pts.sort()
    print(name, " ".join(f"{f:.0%}:{a:.1f}" for f, a, _ in pts))

if plt is None:
    print("matplotlib not installed; printed the table only")
    sys.exit(0)

for name, pts in curves.items():
    f, a, s = np.array(pts).T
    plt.errorbar(100 * f, a, yerr=s, marker="o", capsize=3, label=name)
plt.xlabel("input masking (%)")
plt.ylabel("accuracy")
plt.legend()
plt.savefig(out, dpi=120)
print("wrote", out)
