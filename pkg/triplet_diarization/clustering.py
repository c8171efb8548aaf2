"""k-means with a known k and x-means estimation of k (never fewer than two clusters)."""
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.spatial.distance import cdist
from singer import get_logger
from sklearn.cluster import kmeans_plusplus

from triplet_diarization.exceptions import ConfigException, DataException

LOGGER = get_logger('triplet_diarization')

DEFAULT_MAX_ITER = 300
DEFAULT_MAX_CLUSTERS = 10


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    estimated_k: int
    inertia_history: List[float] = field(default_factory=list)


def _as_points(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    return points


def inertia_of(points, assignments, centroids):
    return float(((points - centroids[assignments]) ** 2).sum())


def _repair_empty_clusters(points, assignments, centroids):
    """Give every empty cluster the point lying farthest from its own centroid"""
    k = centroids.shape[0]
    for cluster in range(k):
        if np.any(assignments == cluster):
            continue
        counts = np.bincount(assignments, minlength=k)
        distances = ((points - centroids[assignments]) ** 2).sum(axis=1)
        distances[counts[assignments] < 2] = -1.0
        farthest = int(np.argmax(distances))
        assignments[farthest] = cluster
        centroids[cluster] = points[farthest]
    return assignments


def lloyd(points, centroids, max_iter=DEFAULT_MAX_ITER):
    """Lloyd iterations from the given centroids until the assignment stops changing"""
    centroids = np.array(centroids, dtype=np.float64)
    k = centroids.shape[0]
    assignments = None
    history = []
    for _ in range(max_iter):
        updated = np.argmin(cdist(points, centroids, 'sqeuclidean'), axis=1)
        if assignments is not None and np.array_equal(updated, assignments):
            break
        assignments = _repair_empty_clusters(points, updated, centroids)
        centroids = np.array([points[assignments == cluster].mean(axis=0) for cluster in range(k)])
        history.append(inertia_of(points, assignments, centroids))

    if assignments is None:
        assignments = np.argmin(cdist(points, centroids, 'sqeuclidean'), axis=1)
    return ClusterResult(assignments=assignments, centroids=centroids,
                         inertia=inertia_of(points, assignments, centroids),
                         estimated_k=k, inertia_history=history)


def kmeans(points, k, seed=0, max_iter=DEFAULT_MAX_ITER, init=None) -> ClusterResult:
    """k-means++ seeding, then Lloyd iterations

    Seeding runs on the rows in lexicographic order, so the result does not depend
    on the order the points come in.
    """
    points = _as_points(points)
    n = points.shape[0]
    if k < 1 or n < k:
        raise DataException("kmeans needs 1 <= k <= n, got k={} for n={}".format(k, n))

    if init is None:
        order = np.lexsort(points.T[::-1])
        init, _ = kmeans_plusplus(points[order], n_clusters=k, random_state=int(seed) % 2 ** 32)
    return lloyd(points, init, max_iter=max_iter)


def bic_score(points, assignments, centroids):
    """Bayesian Information Criterion of an identical-spherical-Gaussian mixture

    Free parameters: k * D centroid coordinates, k mixing weights and the shared variance.
    Higher is better.
    """
    points = _as_points(points)
    n, dim = points.shape
    k = centroids.shape[0]
    if n <= k:
        return -math.inf
    sse = inertia_of(points, assignments, centroids)
    if sse <= 0.0:
        return math.inf

    variance = sse / (dim * (n - k))
    counts = np.bincount(assignments, minlength=k)
    counts = counts[counts > 0]
    log_likelihood = (float((counts * np.log(counts / n)).sum())
                      - n * dim / 2.0 * math.log(2.0 * math.pi * variance)
                      - sse / (2.0 * variance))
    free_parameters = k * dim + k + 1
    return log_likelihood - free_parameters / 2.0 * math.log(n)


def xmeans(points, k_min=2, k_max=DEFAULT_MAX_CLUSTERS, seed=0, max_iter=DEFAULT_MAX_ITER) -> ClusterResult:
    """Estimate the number of clusters by BIC-scored 2-way splits, starting from k_min centroids"""
    points = _as_points(points)
    n = points.shape[0]
    if k_min < 2:
        raise ConfigException("xmeans starts from at least 2 centroids, got k_min={}".format(k_min))
    if k_max < k_min:
        raise ConfigException("k_max ({}) must be >= k_min ({})".format(k_max, k_min))
    if n < k_max:
        raise DataException("xmeans needs at least k_max={} points, got {}".format(k_max, n))

    result = kmeans(points, k_min, seed=seed, max_iter=max_iter)
    while result.estimated_k < k_max:
        centroids = []
        accepted = 0
        for cluster in range(result.estimated_k):
            members = points[result.assignments == cluster]
            parent = result.centroids[cluster]
            can_split = result.estimated_k + accepted < k_max and members.shape[0] > 2
            if can_split:
                children = kmeans(members, 2, seed=seed, max_iter=max_iter)
                parent_bic = bic_score(members, np.zeros(members.shape[0], dtype=np.intp), parent[np.newaxis])
                child_bic = bic_score(members, children.assignments, children.centroids)
                LOGGER.debug("x-means cluster {} ({} points): parent BIC {} vs split BIC {}".format(
                    cluster, members.shape[0], parent_bic, child_bic))
                if child_bic > parent_bic:
                    centroids.extend(children.centroids)
                    accepted += 1
                    continue
            centroids.append(parent)

        if accepted == 0:
            break
        result = lloyd(points, np.array(centroids), max_iter=max_iter)

    LOGGER.info("x-means estimated {} clusters".format(result.estimated_k))
    # final k-means at the estimated k, started from the x-means centroids
    return lloyd(points, result.centroids, max_iter=max_iter)
