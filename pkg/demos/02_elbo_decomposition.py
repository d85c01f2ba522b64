"""The ELBO terms on the toy mixture without any training.

With the oracle score the gap G vanishes and the prior-mismatch KL is the only
penalty, so the ELBO climbs towards E log p_data as T grows. A zero score
instead pays a gap that grows with T. The two effects pull in opposite
directions, which is why a trained score has a best diffusion time.
"""
import numpy as np

from difftime import DiffusionSpec, ZeroScore, elbo_report, oracle_score, pnoise, prop1_residual, toy_mixture

gm = toy_mixture()
spec = DiffusionSpec.ve_toy()
grid = [0.2, 0.4, 0.8, 1.2, 1.6]

print("oracle score, p_noise init")
print("    T      G        KL       ELBO")
for T in grid:
    r = elbo_report(spec, gm, oracle_score(gm, spec), pnoise(spec, T), T, n_mc=4096, n_time=32)
    print(f"  {T:.1f}  {r.G.value:7.4f}  {r.kl.value:7.4f}  {r.elbo.value:7.4f}")
print(f"  E log p_data = {r.entropy_data.value:.4f}")

print("\nzero score, p_noise init")
for T in grid:
    r = elbo_report(spec, gm, ZeroScore(1), pnoise(spec, T), T, n_mc=4096, n_time=32)
    print(f"  T={T:.1f}  G={r.G.value:8.3f}+-{r.G.se:.3f}  ELBO={r.elbo.value:8.3f}")

print("\nidentity check: E log p_T - K + R - E log p_data should be zero")
for T in (0.25, 1.0):
    res = prop1_residual(spec, gm, T, n_mc=8192)
    print(f"  T={T}: {res.value:+.4f} +- {res.se:.4f}")
