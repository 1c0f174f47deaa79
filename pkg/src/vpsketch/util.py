"""Shared helpers: seeded RNG, entropy, a small deterministic k-means."""
from __future__ import annotations

import numpy as np


def get_rng(seed=None):
    """Return a numpy Generator. Pass through if already a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed, n):
    """Derive n independent child generators from one seed."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def entropy(p):
    """Shannon entropy in nats; zero-mass bins contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def softmax(neg_energy):
    """Normalized exp(neg_energy), stabilized by max subtraction."""
    z = np.asarray(neg_energy, dtype=np.float64)
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def kmeans(points, k, rng, n_iter=60):
    """Plain Lloyd k-means with seeded init.

    points: (n, d) array. Returns (labels (n,), centers (k, d)).
    Empty clusters are reseeded to the point farthest from its center,
    so all k clusters are populated when n >= k.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    k = min(k, n)
    idx = rng.choice(n, size=k, replace=False)
    centers = pts[idx].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for j in range(k):
            member = new_labels == j
            if member.any():
                centers[j] = pts[member].mean(axis=0)
            else:
                worst = d2[np.arange(n), new_labels].argmax()
                centers[j] = pts[worst]
                new_labels[worst] = j
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return labels, centers
