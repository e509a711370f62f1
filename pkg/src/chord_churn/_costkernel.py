"""Compiled inner loop for the lookup-cost recursion.

Both convolution sums in the recursion weight C geometrically, so one
running accumulator ``E[n] = sum_{j<n} rho**j * C[n-j]`` serves all of
them: a window of width s is ``E[n] - rho**s * E[n-s]``.  That keeps the
whole table at O(K * M).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def cost_table(K, rho, f, h, c1):
    C = np.zeros(K)
    E = np.zeros(K)
    if K < 2:
        return C
    C[1] = c1
    E[1] = c1
    xi = 1
    k = 1
    for t in range(2, K):
        if t - 1 >= 2 * xi:
            xi *= 2
            k += 1
        m = t - xi
        rm = rho**m
        am = 1.0 - rm
        fk = f[k - 1]

        term1 = C[xi] * rm
        term2 = (1.0 - fk) * (am + (1.0 - rho) * E[m])

        inner = 0.0
        for i in range(1, k):
            s = xi >> i
            n = xi - s + m
            rs = rho**s
            window = E[n] - rs * E[n - s]
            if rs < 1.0:
                inner += h[k - 1, i - 1] * (1.0 + (1.0 - rho) / (1.0 - rs) * window)
            else:
                inner += h[k - 1, i - 1] * (1.0 + C[n])
        term3 = fk * am * (1.0 + inner + 2.0 * h[k - 1, k - 1])

        C[t] = term1 + term2 + term3
        E[t] = C[t] + rho * E[t - 1]
    return C
