"""Hard-attention alignment of reference features to degraded features.

For every degraded time step the reference step with the highest similarity
score is selected; no monotonicity or locality prior is imposed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, ShapeError, StateError

L1 = "l1"
DOT = "dot"


@dataclass(eq=False)
class AlignmentResult:
    scores: np.ndarray  # (N, M)
    path: np.ndarray  # (N,) int indices into the reference
    method: str
    n_ref: int = 0

    def __post_init__(self):
        if not self.n_ref:
            self.n_ref = self.scores.shape[1]


def _as_features(x):
    return getattr(x, "features", x)


def _check_pair(s, h):
    s = np.asarray(s)
    h = np.asarray(h)
    if s.shape != h.shape or s.ndim != 1:
        raise ShapeError(f"score inputs must be equal-length vectors, got {s.shape} and {h.shape}")
    return s, h


def score_l1(s, h) -> float:
    """Negated mean absolute difference; 0 for identical vectors, else < 0."""
    s, h = _check_pair(s, h)
    return -float(np.mean(np.abs(s - h)))


def score_dot(s, h) -> float:
    s, h = _check_pair(s, h)
    return float(s @ h)


def score_matrix(deg, ref, method=L1) -> np.ndarray:
    """(N, M) matrix of scores between every degraded and every reference step."""
    deg = np.asarray(_as_features(deg))
    ref = np.asarray(_as_features(ref))
    if deg.ndim != 2 or ref.ndim != 2 or deg.shape[1] != ref.shape[1]:
        raise ShapeError(f"feature shapes {deg.shape} and {ref.shape} are incompatible")
    if method == L1:
        out = np.empty((deg.shape[0], ref.shape[0]), dtype=np.result_type(deg, ref))
        # row blocks keep the (N, M, H) temporary small
        step = max(1, 2 ** 20 // max(1, ref.size))
        for i in range(0, deg.shape[0], step):
            out[i:i + step] = -np.abs(deg[i:i + step, None, :] - ref[None, :, :]).mean(axis=2)
        return out
    if method == DOT:
        return deg @ ref.T
    raise ValueError(f"unknown score method {method!r}")


def align_hard(deg, ref, method=L1):
    """Select the best reference step for each degraded step.

    Returns ``(AlignmentResult, aligned_ref)`` with ``aligned_ref[i] =
    ref[path[i]]``.  Ties go to the smallest reference index.
    """
    deg_f = np.asarray(_as_features(deg))
    ref_f = np.asarray(_as_features(ref))
    if deg_f.size == 0 or ref_f.size == 0 or deg_f.shape[0] == 0 or ref_f.shape[0] == 0:
        raise EmptyInput("alignment needs non-empty feature sequences")
    scores = score_matrix(deg_f, ref_f, method)
    path = np.argmax(scores, axis=1)
    return AlignmentResult(scores, path, method), ref_f[path]


def gather(ref, path) -> np.ndarray:
    """Aligned reference rows for a given (possibly frozen) path."""
    return np.asarray(_as_features(ref))[np.asarray(path)]


def alignment_backward(grad_aligned_ref, result: AlignmentResult, n_ref=None) -> np.ndarray:
    """Scatter-add aligned-reference gradients back onto reference steps.

    The selection is treated as a constant, so no gradient reaches the
    score computation.
    """
    grad = np.asarray(grad_aligned_ref)
    n_ref = result.n_ref if n_ref is None else n_ref
    if grad.shape[0] != result.path.shape[0]:
        raise StateError("gradient rows do not match the alignment path")
    if result.path.size and result.path.max() >= n_ref:
        raise StateError("alignment path refers past the reference length")
    out = np.zeros((n_ref, grad.shape[1]), dtype=grad.dtype)
    np.add.at(out, result.path, grad)
    return out
