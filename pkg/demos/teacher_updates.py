"""
Three ways to update the teacher
================================

The teacher tracks the student by exponential moving average. The single
source form follows one head, the averaged form follows the mean of the
refinement heads and the R-CNN classifier, and the weighted form gives the
R-CNN classifier half of the student share. This script shows the update
weights and how fast each variant forgets a stale teacher.
"""

import numpy as np

from cbl.wet import aema_update, ema_update, wema_coefficients, wema_update

alpha, k = 0.999, 3
a_t, a_cls, a_oic = wema_coefficients(alpha, k)
print(f"alpha={alpha}, K={k}")
print(f"  weighted: teacher {a_t}, R-CNN cls {a_cls:.6f}, each refinement head {a_oic:.6f}")
print(f"  averaged: teacher {alpha}, every student head {(1 - alpha) / (k + 1):.6f}")

# students that disagree: which one does each teacher end up closest to?
heads = [np.array([1.0]), np.array([2.0]), np.array([3.0])]
cls = np.array([10.0])
t_single = t_avg = t_weighted = np.array([0.0])
for _ in range(20_000):
    t_single = ema_update(t_single, heads[-1], alpha)
    t_avg = aema_update(t_avg, heads + [cls], alpha)
    t_weighted = wema_update(t_weighted, heads, cls, alpha)
print("\nfixed points with heads (1, 2, 3) and cls 10:")
print(f"  last head {t_single[0]:.3f}   averaged {t_avg[0]:.3f}   weighted {t_weighted[0]:.3f}")

# with identical students all three collapse to the same recurrence, and the
# distance to the student shrinks by exactly alpha per step
s = np.array([1.0])
for a in (0.99, 0.995, 0.999):
    t = np.array([5.0])
    for n in range(1, 1001):
        t = wema_update(t, [s] * k, s, a)
    print(f"alpha={a}: gap after 1000 steps {abs(t - s)[0]:.3e}  (alpha^1000 * 4 = {4 * a ** 1000:.3e})")
