#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
Deterministic uncertainty from CLS embeddings: class means with one pooled
(shared) covariance, scored by the smallest Mahalanobis distance to any
class mean. Lower distance means higher confidence.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import ClassIndexError, FormatError, InputError, InsufficientDataError, NotPositiveDefiniteError
from .tensorcore import as_tensor, cholesky_spd, forward_substitute
from .tensorfile import read_tensors, write_tensors

logger = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-3


@dataclass(frozen=True)
class GaussianDiscriminant:
    class_means: np.ndarray        # K x d
    shared_covariance: np.ndarray  # d x d
    cholesky_factor: np.ndarray    # d x d, lower
    ridge_lambda: float = 0.0

    @property
    def embed_dim(self):
        return self.class_means.shape[1]

    @property
    def num_classes(self):
        return self.class_means.shape[0]


@dataclass(frozen=True)
class UncertaintyScore:
    sample_id: int
    u: float
    nearest_class: int

    @property
    def confidence(self):
        return -self.u


def pooled_covariance(embeddings, labels, means):
    centered = embeddings - means[labels]
    cov = centered.T @ centered / (len(labels) - len(means))
    return 0.5 * (cov + cov.T)


def fit(embeddings, labels, ridge_lambda=DEFAULT_RIDGE, num_classes=None, sample_ids=None):
    """
    Per-class means and the pooled within-class covariance

        S = 1/(N-K) sum_c sum_{i in c} (z_i - mu_c)(z_i - mu_c)^T
        S <- S + lambda * (trace(S)/d) * I     (lambda * I if trace(S) == 0)

    Samples are accumulated in sample_id order so the result does not
    depend on how the input rows are arranged.
    """
    embeddings = as_tensor(embeddings, 2)
    labels = np.asarray(labels, dtype=np.int64)
    if ridge_lambda < 0:
        raise InputError("ridge_lambda must be >= 0, got %r" % ridge_lambda)
    if labels.shape != (embeddings.shape[0],):
        raise InputError("%d labels for %d embeddings" % (labels.size, embeddings.shape[0]))
    if not np.all(np.isfinite(embeddings)):
        raise InputError("embeddings contain non-finite values")
    if sample_ids is not None:
        order = np.argsort(np.asarray(sample_ids), kind='stable')
        embeddings, labels = embeddings[order], labels[order]

    k = int(num_classes) if num_classes is not None else int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= k:
        raise InputError("labels outside [0, %d)" % k)
    counts = np.bincount(labels, minlength=k)
    if counts.min() < 2:
        raise InsufficientDataError("class %d has %d samples, need at least 2"
                                    % (int(np.argmin(counts)), int(counts.min())))

    d = embeddings.shape[1]
    means = np.stack([embeddings[labels == c].mean(axis=0) for c in range(k)])
    cov = pooled_covariance(embeddings, labels, means)
    if ridge_lambda > 0:
        scale = np.trace(cov) / d
        cov = cov + ridge_lambda * (scale if scale > 0 else 1.0) * np.eye(d)
    try:
        factor = cholesky_spd(cov)
    except NotPositiveDefiniteError:
        raise NotPositiveDefiniteError("shared covariance is singular with ridge_lambda=%g; use a larger lambda"
                                       % ridge_lambda)
    logger.info("fitted %d class means on %d samples (d=%d, lambda=%g)", k, len(labels), d, ridge_lambda)
    return GaussianDiscriminant(means, cov, factor, float(ridge_lambda))


def mahalanobis(gd, z, c):
    "sqrt((z - mu_c)^T S^-1 (z - mu_c)) through the Cholesky factor"
    if not 0 <= c < gd.num_classes:
        raise ClassIndexError("class %d out of range [0, %d)" % (c, gd.num_classes))
    whitened = forward_substitute(gd.cholesky_factor, np.asarray(z, dtype=np.float64) - gd.class_means[c])
    return float(np.sqrt(np.dot(whitened, whitened)))


def uncertainty(gd, z, sample_id=0):
    distances = [mahalanobis(gd, z, c) for c in range(gd.num_classes)]
    nearest = int(np.argmin(distances))  # first minimum: lowest class index wins ties
    return UncertaintyScore(sample_id, distances[nearest], nearest)


def rank_by_confidence(scores):
    "most confident first; equal u ordered by sample_id"
    return sorted(scores, key=lambda s: (s.u, s.sample_id))


def ece(probabilities, labels, num_bins=15):
    """
    Expected calibration error with equal-width bins over (0, 1]:
    sum_b n_b/N |acc_b - conf_b|, max-probability binning.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if num_bins < 1:
        raise InputError("num_bins must be >= 1")
    if probabilities.ndim != 2 or labels.shape != (probabilities.shape[0],) or labels.size == 0:
        raise InputError("need an N x K probability matrix and N labels")
    if (not np.all(np.isfinite(probabilities)) or probabilities.min() < 0
            or np.max(np.abs(probabilities.sum(axis=1) - 1.0)) > 1e-6):
        raise InputError("probability rows must be non-negative and sum to 1")

    confidences = probabilities.max(axis=1)
    correct = (probabilities.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    n = len(labels)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = (confidences > lo) & (confidences <= hi)
        count = int(in_bin.sum())
        if count:
            total += count / n * abs(correct[in_bin].mean() - confidences[in_bin].mean())
    return float(total)


def save_discriminant(path, gd):
    write_tensors(path, {
        'means': gd.class_means,
        'covariance': gd.shared_covariance,
        'factor': gd.cholesky_factor,
        'lambda': np.array([gd.ridge_lambda]),
    })
    with open(path + '.meta', 'w', encoding='utf-8', newline='\n') as fd:
        fd.write("%d,%d,%r\n" % (gd.embed_dim, gd.num_classes, gd.ridge_lambda))


def load_discriminant(path):
    """
    The factor is recomputed from the stored covariance: both are float32
    on disk and the stored factor would no longer match exactly.
    """
    tensors = read_tensors(path)
    ridge = float(tensors['lambda'][0])
    meta = path + '.meta'
    if os.path.exists(meta):
        with open(meta, encoding='utf-8') as fd:
            fields = fd.read().strip().split(',')
        try:
            d, k, ridge = int(fields[0]), int(fields[1]), float(fields[2])
        except (ValueError, IndexError):
            raise FormatError("%s: expected 'embed_dim,num_classes,lambda'" % meta)
        if len(fields) != 3 or (d, k) != (tensors['means'].shape[1], tensors['means'].shape[0]):
            raise FormatError("%s disagrees with %s" % (meta, path))
    cov = tensors['covariance']
    cov = 0.5 * (cov + cov.T)
    return GaussianDiscriminant(tensors['means'], cov, cholesky_spd(cov), ridge)
