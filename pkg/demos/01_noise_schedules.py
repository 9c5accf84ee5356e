"""
Noise schedules and the DDPM step
=================================

Time runs from t = 0 (pure noise) to t = 1 (data).  Each step mixes the
current state and the predicted clean sample with coefficients c1, c2 and
adds noise of scale sigma.
"""
import numpy as np

from treeg.schedules import build_schedule

# two schedules on the same grid
for kind in ("linear-alphabar", "cosine"):
    s = build_schedule(kind, 10)
    print(kind)
    print("  alpha_bar:", np.round(s.alpha_bar, 4))

# the step coefficients carry the mean exactly: c1 sqrt(ab_t) + c2 = sqrt(ab_next)
s = build_schedule("linear-alphabar", 1000)
err = 0.0
for i in range(s.T):
    c = s.step_coeffs(i)
    err = max(err, abs(c.c1 * np.sqrt(s.alpha_bar[i]) + c.c2 - np.sqrt(s.alpha_bar[i + 1])))
print("max mean-consistency error over 1000 steps: %.2e" % err)

# step noise shrinks as the state approaches the data end
print("sigma at the first and last steps: %.4f %.4f" % (s.step_coeffs(0).sigma, s.step_coeffs(s.T - 1).sigma))
