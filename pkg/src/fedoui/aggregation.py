"""Client weighting strategies and the server-side weighted update."""

from dataclasses import dataclass

import numpy as np

from .beta import DEGENERATE, score_round
from .exceptions import InputError
from .nn import ModelParams

METHODS = ("fedavg", "fedprox", "grad-align", "fedoui")

FEDOUI_EPS = 1e-3
GRADALIGN_EPS = 1e-3


@dataclass
class ClientReport:
    """What a client sends back after local training."""

    client_id: int
    delta: ModelParams
    n_k: int
    oui: float
    train_loss: float = float("nan")

    def __post_init__(self):
        if self.n_k < 1:
            raise InputError(f"client {self.client_id}: sample count must be >= 1")
        if not 0.0 <= self.oui <= 1.0:
            raise InputError(f"client {self.client_id}: OUI {self.oui} outside [0, 1]")


def _sizes(reports):
    if not reports:
        raise InputError("no client reports")
    return np.array([r.n_k for r in reports], dtype=np.float64)


def _normalize(raw):
    return raw / raw.sum()


def fedavg_weights(reports):
    """Weights proportional to client sample counts."""
    return _normalize(_sizes(reports))


def fedoui_weights(reports, eps=FEDOUI_EPS):
    """OUI-guided weights ``w_k ~ n_k (eps + s_k)``.

    ``s_k`` is the bilateral score of client k's OUI under the Beta law fitted
    to this round's OUI values.  Returns ``(weights, fit, scores)``.  When the
    fit is degenerate or all scores coincide the result is exactly
    :func:`fedavg_weights`.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    n = _sizes(reports)
    fit, scores = score_round([r.oui for r in reports])
    if fit is DEGENERATE or np.all(scores == scores[0]):
        return fedavg_weights(reports), fit, scores
    return _normalize(n * (eps + scores)), fit, scores


def cosine_to_mean(reports):
    """Cosine similarity of every delta with the unweighted mean delta.

    Zero-norm vectors give cosine 0.
    """
    vecs = np.stack([r.delta.ravel() for r in reports])
    mean = vecs.mean(axis=0)
    mean_norm = np.linalg.norm(mean)
    out = np.zeros(len(reports))
    for i, v in enumerate(vecs):
        denom = np.linalg.norm(v) * mean_norm
        if denom > 0.0:
            out[i] = float(v @ mean) / denom
    return out


def gradalign_weights(reports, eps=GRADALIGN_EPS):
    """Gradient-alignment surrogate: ``w_k ~ n_k (max(0, cos(delta_k, mean)) + eps)``.

    Not the published FedAlign procedure; it only rewards updates that point
    along the round's consensus direction.
    """
    n = _sizes(reports)
    cos = np.clip(cosine_to_mean(reports), 0.0, None)
    return _normalize(n * (cos + eps))


def compute_weights(method, reports, eps=FEDOUI_EPS):
    """Weights for ``method`` plus the round's Beta diagnostics.

    The Beta fit and scores are computed for every method so that OUI
    statistics are available in all logs; only ``fedoui`` uses them.
    Returns ``(weights, fit, scores)``.
    """
    if method == "fedoui":
        return fedoui_weights(reports, eps)
    fit, scores = score_round([r.oui for r in reports])
    if method in ("fedavg", "fedprox"):
        return fedavg_weights(reports), fit, scores
    if method == "grad-align":
        return gradalign_weights(reports), fit, scores
    raise InputError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def aggregate(global_params, reports, weights):
    """``global + sum_k w_k delta_k``."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or len(weights) != len(reports):
        raise InputError(f"{len(weights)} weights for {len(reports)} reports")
    update = {k: np.zeros_like(v) for k, v in global_params.items()}
    for w, r in zip(weights, reports):
        global_params._check_compatible(r.delta)
        for k in update:
            update[k] += w * r.delta[k]
    return ModelParams({k: v + update[k] for k, v in global_params.items()})
