"""Geopotential coefficients.

Fully normalized EGM96 coefficients through degree and order 8. The desk
scale high-fidelity and truth models stop here; the zonal J2 low-fidelity
model only uses C20.
"""
from math import factorial, sqrt

import numpy as np

# (n, m): (C_bar, S_bar)
EGM96_NORMALIZED = {
    (2, 0): (-4.84165371736e-04, 0.0),
    (2, 1): (-1.86987635955e-10, 1.19528012031e-09),
    (2, 2): (2.43914352398e-06, -1.40016683654e-06),
    (3, 0): (9.57254173792e-07, 0.0),
    (3, 1): (2.02998882184e-06, 2.48513158716e-07),
    (3, 2): (9.04627768605e-07, -6.19025944205e-07),
    (3, 3): (7.21072657057e-07, 1.41435626958e-06),
    (4, 0): (5.39873863789e-07, 0.0),
    (4, 1): (-5.36321616971e-07, -4.73440265853e-07),
    (4, 2): (3.50694105785e-07, 6.62671572540e-07),
    (4, 3): (9.90771803829e-07, -2.00928369177e-07),
    (4, 4): (-1.88560802735e-07, 3.08853169333e-07),
    (5, 0): (6.86702913736e-08, 0.0),
    (5, 1): (-6.29211923042e-08, -9.43698073395e-08),
    (5, 2): (6.52078043176e-07, -3.23353192540e-07),
    (5, 3): (-4.51847152328e-07, -2.14955408306e-07),
    (5, 4): (-2.95328761175e-07, 4.98070550102e-08),
    (5, 5): (1.74811795496e-07, -6.69379935180e-07),
    (6, 0): (-1.49957994714e-07, 0.0),
    (6, 1): (-7.59525240001e-08, 2.65122789580e-08),
    (6, 2): (4.86532883840e-08, -3.73789676000e-07),
    (6, 3): (5.72451611175e-08, 8.95201974986e-09),
    (6, 4): (-8.60237937191e-08, -4.71408263467e-07),
    (6, 5): (-2.67166423703e-07, -5.36488432483e-07),
    (6, 6): (9.47068125387e-09, -2.37382953863e-07),
    (7, 0): (9.05120844521e-08, 0.0),
    (7, 1): (2.80887555709e-07, 9.51259135356e-08),
    (7, 2): (3.30407492986e-07, 9.29969026160e-08),
    (7, 3): (2.50458286809e-07, -2.17086954043e-07),
    (7, 4): (-2.74986670429e-07, -1.24152043172e-07),
    (7, 5): (1.92372463142e-09, 1.79463713366e-08),
    (7, 6): (-3.58843134233e-07, 1.51753355809e-07),
    (7, 7): (1.37811180563e-09, 2.41129571311e-08),
    (8, 0): (4.94756003005e-08, 0.0),
    (8, 1): (2.31607991536e-08, 5.88974540576e-08),
    (8, 2): (8.00143863894e-08, 6.52805077562e-08),
    (8, 3): (-1.93745136569e-08, -8.59639339125e-08),
    (8, 4): (-2.44360657774e-07, 6.98072478434e-08),
    (8, 5): (-2.55788168896e-08, 8.91839843928e-08),
    (8, 6): (-6.59958446142e-08, 3.08934446006e-07),
    (8, 7): (6.72610910025e-08, 7.48244469376e-08),
    (8, 8): (-1.24025212175e-07, 1.20532783291e-07),
}

MAX_DEGREE = 8


def normalization(n: int, m: int) -> float:
    """Factor N_nm such that C_nm = N_nm * C_bar_nm."""
    delta = 1.0 if m == 0 else 0.0
    return sqrt((2.0 - delta) * (2 * n + 1) * factorial(n - m) / factorial(n + m))


def unnormalized_coefficients(degree: int, order: int, zonal_only_j2: bool = False):
    """Return (C, S) unnormalized arrays of shape (degree+1, degree+1).

    C[0, 0] = 1 carries the central term. ``zonal_only_j2`` keeps only C20.
    """
    if degree < 0 or order < 0:
        raise ValueError("gravity degree/order must be non-negative")
    if degree > MAX_DEGREE:
        raise ValueError(f"gravity degree {degree} exceeds tabulated maximum {MAX_DEGREE}")
    order = min(order, degree)
    C = np.zeros((degree + 1, degree + 1))
    S = np.zeros((degree + 1, degree + 1))
    C[0, 0] = 1.0
    for (n, m), (cb, sb) in EGM96_NORMALIZED.items():
        if n > degree or m > order:
            continue
        if zonal_only_j2 and (n, m) != (2, 0):
            continue
        f = normalization(n, m)
        C[n, m] = f * cb
        S[n, m] = f * sb
    return C, S


def j2_value() -> float:
    """Unnormalized J2 = -C20."""
    return -EGM96_NORMALIZED[(2, 0)][0] * normalization(2, 0)
