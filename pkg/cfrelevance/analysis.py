#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
Confidence-filtered relevance: nested confidence subsets, relevance summed
per land-cover class, per-subset class profiles, their entropy and the
correlation against an external per-class index.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .ddu import rank_by_confidence
from .errors import (DegenerateDistributionError, DimensionError, InputError, ParameterError,
                     UndefinedCorrelationError)

PIXEL = 'pixel'
IMAGE = 'image'


@dataclass(frozen=True)
class ConfidenceSubset:
    threshold: float
    sample_ids: tuple


@dataclass(frozen=True)
class ClassStat:
    total_relevance: float
    total_pixels: int
    mean_relevance: float


@dataclass
class ClassRelevanceProfile:
    threshold: float
    classes: dict = field(default_factory=dict)  # class id -> ClassStat, ascending ids

    @property
    def covered_classes(self):
        return {c for c, stat in self.classes.items() if stat.total_pixels > 0}

    def means(self):
        return {c: self.classes[c].mean_relevance for c in sorted(self.covered_classes)}

    def top_class(self):
        means = self.means()
        return max(means, key=lambda c: (means[c], -c)) if means else None


def check_thresholds(thresholds):
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise InputError("no thresholds given")
    for t in thresholds:
        if not 0 < t <= 100:
            raise InputError("threshold %g outside (0, 100]" % t)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise InputError("thresholds must be strictly increasing: %s" % thresholds)
    return thresholds


def subset_size(threshold, n):
    "ceil(t/100 * n) in exact arithmetic"
    return math.ceil(Fraction(str(threshold)) * n / 100)


def partition(scores, thresholds, scope='dataset'):
    """
    Nested subsets holding the most confident ceil(t/100 N) samples.
    scope='class' applies each percentile within every predicted
    (nearest) class separately and merges the result.
    """
    thresholds = check_thresholds(thresholds)
    ranked = rank_by_confidence(scores)
    if not ranked:
        raise InputError("cannot partition an empty score list")

    subsets = []
    for t in thresholds:
        if scope == 'dataset':
            members = ranked[:subset_size(t, len(ranked))]
        elif scope == 'class':
            keep = set()
            for c in sorted({s.nearest_class for s in ranked}):
                group = [s for s in ranked if s.nearest_class == c]
                keep.update(s.sample_id for s in group[:subset_size(t, len(group))])
            members = [s for s in ranked if s.sample_id in keep]
        else:
            raise ParameterError("partition scope must be 'dataset' or 'class', got %r" % scope)
        subsets.append(ConfidenceSubset(t, tuple(s.sample_id for s in members)))
    return subsets


def aggregate_by_class(relevance_map, labels):
    """
    class id -> (relevance sum, pixel count) for every class present.
    Each sum is the correctly rounded total of its pixels, so it does not
    depend on pixel order.
    """
    values = relevance_map.values if hasattr(relevance_map, 'values') else np.asarray(relevance_map)
    labels = np.asarray(labels, dtype=np.int64)
    if values.shape != labels.shape:
        raise DimensionError("relevance map %s and label raster %s differ" % (values.shape, labels.shape))
    if labels.size and labels.min() < 0:
        raise InputError("negative class id in label raster")
    values, labels = np.asarray(values, dtype=np.float64).ravel(), labels.ravel()
    counts = np.bincount(labels)
    return {int(c): (math.fsum(values[labels == c]), int(counts[c])) for c in np.flatnonzero(counts)}


def profile(subset, aggregates, weighting=PIXEL):
    """
    Class profile of one subset. With the default pixel weighting the mean
    is total relevance over total pixels of the whole subset; 'image'
    averages the per-image class means instead.
    """
    if weighting not in (PIXEL, IMAGE):
        raise ParameterError("weighting must be 'pixel' or 'image', got %r" % weighting)
    totals = {}
    pixels = {}
    image_means = {}
    for sample_id in subset.sample_ids:
        if sample_id not in aggregates:
            raise InputError("no relevance aggregate for sample %s" % (sample_id,))
        for c, (total, count) in sorted(aggregates[sample_id].items()):
            totals[c] = totals.get(c, 0.0) + total
            pixels[c] = pixels.get(c, 0) + count
            if count:
                image_means.setdefault(c, []).append(total / count)

    classes = {}
    for c in sorted(totals):
        if pixels[c] == 0:
            mean = 0.0
        elif weighting == PIXEL:
            mean = totals[c] / pixels[c]
        else:
            mean = math.fsum(image_means[c]) / len(image_means[c])
        classes[c] = ClassStat(totals[c], pixels[c], mean)
    return ClassRelevanceProfile(subset.threshold, classes)


def relevance_entropy(p):
    "Shannon entropy (nats) of the covered class means, normalised to sum 1"
    means = np.array(list(p.means().values()), dtype=np.float64)
    if means.size == 0 or means.sum() <= 0:
        raise DegenerateDistributionError("profile at threshold %g has no positive class relevance" % p.threshold)
    return float(stats.entropy(means / means.sum()))


def pearson(p, idx, rank=False):
    """
    Pearson r between class mean relevance and an external index over the
    classes both cover; rank=True correlates ranks instead.
    """
    means = p.means()
    shared = sorted(set(means) & set(idx.values))
    if len(shared) < 2:
        raise InputError("need at least 2 classes shared with index '%s', got %d" % (idx.name, len(shared)))
    x = np.array([means[c] for c in shared])
    y = np.array([idx.values[c] for c in shared])
    if rank:
        x, y = stats.rankdata(x), stats.rankdata(y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("zero variance, correlation with '%s' undefined" % idx.name)
    return float(stats.pearsonr(x, y)[0])
