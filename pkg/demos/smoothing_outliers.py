"""Show how the sigma grid search tames activation outlier channels.

Run: python3 demos/smoothing_outliers.py
"""

import numpy as np

from qqq.quantize import QuantSpec
from qqq.smoothing import channel_maxima, search_sigma, smoothing_objective

rng = np.random.default_rng(0)
spec = QuantSpec("per-channel")

tokens, k, n = 64, 16, 8
x = rng.standard_normal((tokens, k))
x[:, 3] *= 100.0  # one dominant channel ruins per-token INT8 scaling
x[:, 11] *= 40.0
w = rng.standard_normal((k, n)) / np.sqrt(k)

m = channel_maxima(x)
print("channel |x| maxima (two injected outliers):")
print("  " + " ".join(f"{v:6.1f}" for v in m))

base = smoothing_objective(x, w, np.ones(k), spec)
print(f"\nquantized-product error without smoothing: {base:.4f}")

plan = search_sigma(x, w, spec, grid_points=20)
print(f"\ngrid search picked sigma = {plan.sigma:.3f}")
print(f"smoothed channels: {plan.selected}")
print("smoothing vector s (selected channels are divided down to sigma):")
print("  " + " ".join(f"{v:6.2f}" for v in plan.s))
print(f"\nerror with the chosen plan: {plan.objective:.4f}")
print(f"improvement factor: {base / plan.objective:.1f}x")

print("\nerror across the whole sigma grid (the search scans all of these):")
xmax = float(np.abs(x).max())
for i in (1, 2, 4, 8, 12, 16, 20):
    sigma = (i / 20) * xmax
    sel = tuple(int(t) for t in np.nonzero(m >= sigma)[0])
    s = np.ones(k)
    for t in sel:
        s[t] = m[t] / sigma
    err = smoothing_objective(x, w, s, spec)
    mark = "  <- chosen" if np.isclose(sigma, plan.sigma) else ""
    print(f"  sigma {sigma:7.2f}  ({len(sel):2d} channels smoothed)  error {err:9.4f}{mark}")
