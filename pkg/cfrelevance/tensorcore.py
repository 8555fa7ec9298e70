#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
Dense numerics used everywhere else. A Tensor is just a float64
numpy array; these wrappers add the shape and finiteness checks and
translate scipy's LinAlgError into the package errors.
"""

import numpy as np
from scipy import linalg

from .errors import DimensionError, InputError, NotPositiveDefiniteError, SingularError

SYMMETRY_TOL = 1e-9


def as_tensor(x, ndim=None):
    t = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and t.ndim != ndim:
        raise DimensionError("expected %d dims, got shape %s" % (ndim, t.shape))
    if t.size == 0 or any(n <= 0 for n in t.shape):
        raise DimensionError("tensor extents must be positive, got %s" % (t.shape,))
    return t


def matmul(a, b):
    """m x k times k x n. Plain numpy product; for a fixed input the
    reduction order does not change between calls."""
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError("inner extents differ: %s x %s" % (a.shape, b.shape))
    return a @ b


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("softmax input has non-finite entries")
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def cholesky_spd(s):
    """
    Lower triangular L with L L^T = s.
    A non-positive pivot means the covariance needs a larger ridge.
    """
    s = as_tensor(s, 2)
    if s.shape[0] != s.shape[1]:
        raise DimensionError("cholesky of non-square %s" % (s.shape,))
    if not np.all(np.isfinite(s)):
        raise InputError("matrix has non-finite entries")
    if np.max(np.abs(s - s.T)) > SYMMETRY_TOL:
        raise InputError("matrix is not symmetric within %g" % SYMMETRY_TOL)
    try:
        return linalg.cholesky(s, lower=True)
    except linalg.LinAlgError as e:
        raise NotPositiveDefiniteError("matrix is not positive definite (%s); increase ridge_lambda" % e)


def forward_substitute(l, b):
    "solves L y = b"
    l = as_tensor(l, 2)
    b = as_tensor(b, 1)
    if l.shape[0] != l.shape[1] or l.shape[0] != b.shape[0]:
        raise DimensionError("factor %s incompatible with rhs %s" % (l.shape, b.shape))
    if np.any(np.diag(l) == 0.0):
        raise SingularError("factor has a zero diagonal element")
    return linalg.solve_triangular(l, b, lower=True)


def solve_spd(l, b):
    """
    x with (L L^T) x = b, forward then backward substitution.
    The inverse is never formed.
    """
    y = forward_substitute(l, b)
    return linalg.solve_triangular(l, y, lower=True, trans='T')
