"""Greedy merge/discard of overlapping top-firing image clusters."""
from dataclasses import dataclass, field

import numpy as np

N_PERCLUSTER = 10
T_MERGE = 3
T_DISCARD = 1


@dataclass
class ClusterSet:
    clusters: list
    params: dict = field(default_factory=lambda: {
        "n_percluster": N_PERCLUSTER, "t_merge": T_MERGE, "t_discard": T_DISCARD})


def top_firing(scores, n_per=N_PERCLUSTER):
    """Per detector row, the ids of its ``n_per`` highest-scoring images (ties to lower id)."""
    scores = np.asarray(scores, dtype=np.float64)
    if n_per > scores.shape[1]:
        raise ValueError("n_per exceeds the number of images")
    order = np.argsort(-scores, axis=1, kind="stable")
    return [set(int(i) for i in row[:n_per]) for row in order]


def greedy_merge_discard(initial, t_merge=T_MERGE, t_discard=T_DISCARD):
    """Repeatedly resolve the most overlapping pair of clusters.

    Overlap above ``t_merge`` merges the pair (the union takes the lower
    index's place); overlap in (t_discard, t_merge] drops the smaller cluster
    (the higher-index one on equal size).  Ties between pairs go to the
    lexicographically smallest index pair.  Stops once no pair overlaps by
    more than ``t_discard``.
    """
    if t_discard > t_merge:
        raise ValueError("t_discard must not exceed t_merge")
    clusters = [set(c) for c in initial]
    if any(i < 0 for c in clusters for i in c):
        raise ValueError("image ids must be non-negative")
    while len(clusters) > 1:
        best, pair = -1, None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                ov = len(clusters[i] & clusters[j])
                if ov > best:
                    best, pair = ov, (i, j)
        if best <= t_discard:
            break
        i, j = pair
        if best > t_merge:
            clusters[i] = clusters[i] | clusters[j]
            del clusters[j]
        else:
            drop = i if len(clusters[i]) < len(clusters[j]) else j
            del clusters[drop]
    return ClusterSet(clusters, {"n_percluster": N_PERCLUSTER, "t_merge": t_merge,
                                 "t_discard": t_discard})


def write_clusters(path, clusters):
    with open(path, "w") as fh:
        for c in clusters:
            fh.write(" ".join(str(i) for i in sorted(c)) + "\n")


def read_clusters(path):
    with open(path) as fh:
        return [set(int(t) for t in line.split()) for line in fh if line.strip()]


def read_scores_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)
