"""Reconstruction quality under the batch permutation ambiguity."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

MAX_MATCH_BATCH = 128


@dataclass
class MatchReport:
    assignment: np.ndarray  # assignment[i] = ground-truth index of reconstruction i
    pair_l1: np.ndarray  # mean per-pixel L1 of each matched pair, indexed by reconstruction
    mean_l1: float

    @property
    def worst_l1(self):
        return float(self.pair_l1.max())

    @property
    def best_l1(self):
        return float(self.pair_l1.min())


def mean_l1(a, b):
    return float(np.mean(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def l1_cost_matrix(x_hat, x):
    a = np.asarray(x_hat, dtype=float).reshape(len(x_hat), -1)
    b = np.asarray(x, dtype=float).reshape(len(x), -1)
    return np.abs(a[:, None, :] - b[None, :, :]).mean(axis=2)


def match_batch(x_hat, x):
    """Pair reconstructions with ground truth by minimum total mean-L1."""
    x_hat = np.asarray(x_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_hat.shape[0] != x.shape[0]:
        raise ValueError(f"batch sizes differ: {x_hat.shape[0]} reconstructions vs {x.shape[0]} inputs")
    if x_hat[0].size != x[0].size:
        raise ValueError(f"instance sizes differ: {x_hat.shape[1:]} vs {x.shape[1:]}")
    if x.shape[0] > MAX_MATCH_BATCH:
        raise ValueError(f"batch of {x.shape[0]} exceeds the matching limit of {MAX_MATCH_BATCH}")
    cost = l1_cost_matrix(x_hat, x)
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(len(rows), dtype=int)
    assignment[rows] = cols
    pair = cost[rows, cols][np.argsort(rows)]
    return MatchReport(assignment=assignment, pair_l1=pair, mean_l1=float(pair.mean()))
