"""The contrastive alignment loss and its exact gradients.

For a batch of brain embeddings U and audio feature vectors V (both N x d),
the loss is the mean over rows of a temperature-scaled softmax
cross-entropy on the cosine-similarity matrix:

    L = -(1/N) sum_i log[ exp(t * S_ii) / sum_j exp(t * S_ij) ],
    S_ij = cos_sim(U_i, V_j),  t = exp(t_prime),

with t_prime a learnable scalar. Rows index the brain side; the retrieval
set during training is the batch itself. A symmetric variant that adds the
column-wise (audio-anchored) term is available behind a flag but off by
default.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError

NORM_FLOOR = 1e-12
T_PRIME_CLAMP = 5.0  # |t_prime| bound applied after each optimizer step


@dataclass
class SimilarityMatrix:
    values: np.ndarray          # (N, N), rows anchor U, columns anchor V
    temperature: float = 1.0


def _safe_norms(X: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms < NORM_FLOOR):
        warnings.warn(f"zero-norm row(s) in {name}; norm floored at {NORM_FLOOR}",
                      RuntimeWarning, stacklevel=3)
    return np.maximum(norms, NORM_FLOOR)


def cosine_similarity(U: np.ndarray, V: np.ndarray) -> SimilarityMatrix:
    """S[i, j] = <U_i, V_j> / (|U_i| |V_j|), with zero norms floored."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
        raise InvalidSpecError(f"bad embedding shapes {U.shape} vs {V.shape}")
    Un = U / _safe_norms(U, "U")[:, None]
    Vn = V / _safe_norms(V, "V")[:, None]
    return SimilarityMatrix(values=Un @ Vn.T)


def _row_softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stable softmax over rows; also returns log-sum-exp per row."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    return e / z, (np.log(z) + m)[:, 0]


def clip_loss(S: SimilarityMatrix, t_prime: float, symmetric: bool = False) -> float:
    """Mean negative log-likelihood of the diagonal under the row softmax."""
    vals = np.asarray(S.values, dtype=np.float64)
    n = vals.shape[0]
    if n == 0:
        raise InvalidSpecError("empty similarity matrix")
    if vals.shape[0] != vals.shape[1]:
        raise InvalidSpecError("similarity matrix must be square")
    t = float(np.exp(t_prime))
    logits = t * vals
    _, lse = _row_softmax(logits)
    loss = float(np.mean(lse - np.diag(logits)))
    if symmetric:
        _, lse_c = _row_softmax(logits.T)
        loss = 0.5 * (loss + float(np.mean(lse_c - np.diag(logits))))
    return loss


def _loss_grad_wrt_similarity(vals: np.ndarray, t_prime: float,
                              symmetric: bool) -> tuple[float, np.ndarray, float]:
    n = vals.shape[0]
    t = float(np.exp(t_prime))
    logits = t * vals
    P, lse = _row_softmax(logits)
    eye = np.eye(n)
    dlogits = (P - eye) / n
    loss = float(np.mean(lse - np.diag(logits)))
    if symmetric:
        Pc, lse_c = _row_softmax(logits.T)
        dlogits = 0.5 * (dlogits + (Pc - eye).T / n)
        loss = 0.5 * (loss + float(np.mean(lse_c - np.diag(logits))))
    dS = t * dlogits
    dt = float(np.sum(dlogits * vals))       # d loss / d t
    dt_prime = t * dt                        # chain through t = exp(t_prime)
    return loss, dS, dt_prime


def clip_loss_grad(S: SimilarityMatrix, t_prime: float, U: np.ndarray, V: np.ndarray,
                   symmetric: bool = False) -> tuple[np.ndarray, np.ndarray, float]:
    """Exact gradients of the loss w.r.t. U, V and t_prime.

    Includes the chain through the cosine normalization: for each row,
    d/dU_i = (I - u u^T) / |U_i| applied to the gradient w.r.t. the unit
    vector u = U_i / |U_i|.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    vals = np.asarray(S.values, dtype=np.float64)
    _, dS, dt_prime = _loss_grad_wrt_similarity(vals, t_prime, symmetric)
    u_norms = _safe_norms(U, "U")
    v_norms = _safe_norms(V, "V")
    Un = U / u_norms[:, None]
    Vn = V / v_norms[:, None]
    dUn = dS @ Vn
    dVn = dS.T @ Un
    dU = (dUn - Un * np.sum(dUn * Un, axis=1, keepdims=True)) / u_norms[:, None]
    dV = (dVn - Vn * np.sum(dVn * Vn, axis=1, keepdims=True)) / v_norms[:, None]
    return dU, dV, dt_prime


def loss_from_embeddings(U: np.ndarray, V: np.ndarray, t_prime: float,
                         symmetric: bool = False) -> float:
    return clip_loss(cosine_similarity(U, V), t_prime, symmetric)


def loss_and_grads_from_embeddings(U: np.ndarray, V: np.ndarray, t_prime: float,
                                   symmetric: bool = False):
    """(loss, dU, dV, dt_prime) in one pass; the trainer's entry point."""
    S = cosine_similarity(U, V)
    loss, dS, dt_prime = _loss_grad_wrt_similarity(
        np.asarray(S.values, dtype=np.float64), t_prime, symmetric)
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    u_norms = _safe_norms(U, "U")
    v_norms = _safe_norms(V, "V")
    Un = U / u_norms[:, None]
    Vn = V / v_norms[:, None]
    dUn = dS @ Vn
    dVn = dS.T @ Un
    dU = (dUn - Un * np.sum(dUn * Un, axis=1, keepdims=True)) / u_norms[:, None]
    dV = (dVn - Vn * np.sum(dVn * Vn, axis=1, keepdims=True)) / v_norms[:, None]
    return loss, dU, dV, dt_prime
