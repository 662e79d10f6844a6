"""Backbone curves of the two-mass oscillator from simulated data.

Fits a cubic foliation of the first mode together with a linear
foliation of the second, extracts the invariant manifold in polar form
and compares frequency and damping with the same normal form computed
directly from the equations of motion. Takes about half a minute.

Run: python demos/shaw_pierre_backbone.py [out_dir]
"""

import json
import sys
import tempfile

from folrom.normalform import read_backbone
from folrom.pipeline import preset, run_pipeline

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="folrom-sp-")
run_pipeline(preset("shaw-pierre", out=out))

entry = json.loads(open(f"{out}/manifold.json").read())["backbones"][0]
fit = read_backbone(f"{out}/backbone_1.csv")
ref = read_backbone(f"{out}/backbone_oracle_1.csv")
print(f"{'rho':>6} {'omega fit':>10} {'omega ODE':>10} {'zeta fit':>9} {'zeta ODE':>9}")
for k in range(0, len(fit.rho), 20):
    print(f"{fit.rho[k]:6.3f} {fit.omega[k]:10.5f} {ref.omega[k]:10.5f} {fit.zeta[k]:9.5f} {ref.zeta[k]:9.5f}")
o = entry["oracle"]
print(f"max relative deviation: omega {o['omega_rel']:.2e}, zeta {o['zeta_rel']:.2e}")
print("results in", out)
