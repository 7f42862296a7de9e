"""
Core Math
Dense double-precision helpers, probability utilities and the
finite-difference oracle used to check every analytic gradient
"""

from typing import Callable
import numpy as np

from .errors import DomainError

# Smallest positive double; keeps softmax outputs strictly inside the simplex
_TINY = np.finfo(np.float64).tiny

METRICS = ('euclidean', 'cosine_dist')


def vec64(values) -> np.ndarray:
    """
    Build a validated 1-d float64 vector

    Args:
        values: Anything numpy can turn into a 1-d array

    Returns:
        Contiguous float64 array
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError(f"expected a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("vector contains NaN or Inf")
    return arr


def mat64(values) -> np.ndarray:
    """
    Build a validated 2-d float64 matrix (rows are samples)

    Args:
        values: Anything numpy can turn into a 2-d array

    Returns:
        Contiguous float64 array of shape (rows, cols)
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DomainError(f"expected a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("matrix contains NaN or Inf")
    return arr


def cosine_sim(a, b) -> float:
    """
    Cosine similarity a·b / (|a||b|)

    Args:
        a: First vector
        b: Second vector, same length

    Returns:
        Similarity in [-1, 1]
    """
    a = vec64(a)
    b = vec64(b)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Scale every row (or the single vector) to unit L2 norm"""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero-norm row")
    return x / norms


def normalize_backward(x: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """
    Pull a gradient taken w.r.t. normalized rows back to the raw rows

    Args:
        x: Raw rows before normalization
        grad_unit: dL/d(x / |x|)

    Returns:
        dL/dx = (g - u (u·g)) / |x|
    """
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    unit = x / norms
    radial = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norms


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax along ``axis``"""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    """
    Max-subtracted softmax; rows of the result are points of the simplex

    Args:
        logits: Finite logits, vector or matrix
        axis: Axis holding the classes

    Returns:
        Probabilities, strictly positive, summing to 1 along ``axis``
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax of non-finite logits")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / np.sum(e, axis=axis, keepdims=True)
    return np.maximum(probs, _TINY)


def is_simplex(probs, atol: float = 1e-12) -> bool:
    """True when every row is strictly positive and sums to one within ``atol``"""
    p = np.asarray(probs, dtype=np.float64)
    return bool(np.all(p > 0.0) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= atol))


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy of every row"""
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(p * np.log(p), axis=-1)


def pairwise_distance(x, metric: str = 'euclidean') -> np.ndarray:
    """
    Full N×N distance matrix between the rows of x

    Args:
        x: Samples as rows
        metric: 'euclidean' or 'cosine_dist' (1 - cosine similarity)

    Returns:
        Symmetric, zero-diagonal, non-negative matrix
    """
    x = mat64(x)
    if x.shape[0] == 0:
        raise DomainError("pairwise distance of an empty matrix")

    if metric == 'euclidean':
        sq = np.sum(x * x, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        dist = np.sqrt(np.maximum(d2, 0.0))
    elif metric == 'cosine_dist':
        unit = l2_normalize(x)
        dist = np.maximum(1.0 - unit @ unit.T, 0.0)
    else:
        raise DomainError(f"unknown metric '{metric}', expected one of {METRICS}")

    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient estimate, coordinate by coordinate

    Args:
        f: Scalar function of an array shaped like x
        x: Evaluation point (any shape)
        h: Step size

    Returns:
        Array shaped like x holding (f(x+h e_i) - f(x-h e_i)) / 2h
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Norm-wise relative error between two gradient estimates"""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
