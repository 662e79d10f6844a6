"""Linear analysis of the optimal-velocity ring road.

Prints the Jacobian spectrum at the uniform-flow equilibrium, the
invariant-bundle eigenvalues of the time-0.5 flow map converted back to
continuous time and the spectral quotients that decide how smooth a
foliation of each bundle set can be.

Run: python demos/car_following_spectrum.py
"""

import numpy as np

from folrom.linid import check_nonresonance, spectral_quotient
from folrom.oracle import benchmark, equation_bundles, linear_spectrum

sys = benchmark("car-following")
print("equilibrium velocity", sys.equilibrium()[0])
print("Jacobian eigenvalues")
for lam in linear_spectrum(sys):
    print(f"  {lam.real:+.4f} {lam.imag:+.4f}i")

dt = 0.5
B = equation_bundles(sys, 1, dt)
print("bundle eigenvalues (continuous time)", np.round(B.continuous(dt), 4))
for I in ([0], [1, 2, 3, 4]):
    rep = check_nonresonance(B, I)
    print(f"index set {I}: quotient {spectral_quotient(B, I):.4f}, "
          f"resonances checked to order {rep.max_order}, found {len(rep.external) + len(rep.internal)}")
