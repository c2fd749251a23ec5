"""Brute-force metric oracles shared by the unit and acceptance tests."""

import numpy as np


def sweep(tar, non):
    """(P_miss, P_fa) for every candidate threshold, from accept-all to reject-all, by direct counting."""
    thresholds = sorted(set(np.concatenate([tar, non]).tolist())) + [np.inf]
    pm, pf = [], []
    for th in thresholds:
        pm.append(sum(1 for s in tar if s < th) / len(tar))
        pf.append(sum(1 for s in non if s >= th) / len(non))
    return pm, pf


def brute_eer(tar, non):
    pm, pf = sweep(tar, non)
    for i in range(len(pm)):
        if pm[i] >= pf[i]:
            if pm[i] == pf[i] or i == 0:
                return pm[i]
            # straight line between points i-1 and i, solved for P_miss == P_fa
            a0, b0, a1, b1 = pm[i - 1], pf[i - 1], pm[i], pf[i]
            t = (b0 - a0) / ((a1 - a0) - (b1 - b0))
            return a0 + t * (a1 - a0)
    raise AssertionError("sweep never crossed")


def brute_min_cprimary(tar, non, priors=(0.01, 0.005)):
    pm, pf = sweep(tar, non)
    costs = []
    for p in priors:
        beta = (1 - p) / p
        costs.append(min(m + beta * f for m, f in zip(pm, pf)))
    return sum(costs) / len(costs)
