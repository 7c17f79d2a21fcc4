"""Synthetic interaction data with known (planted) preference structure."""

from __future__ import annotations

import numpy as np

from .data import InteractionDataset, RawInteraction, build_dataset


def planted_clusters(
    n_users: int = 50,
    n_items: int = 40,
    n_clusters: int = 2,
    min_interactions: int = 12,
    max_interactions: int = 16,
    seed: int = 0,
) -> tuple[InteractionDataset, np.ndarray, np.ndarray]:
    """Users in ``n_clusters`` groups, each consuming only its own block of items.

    Returns the dataset plus the cluster label of every user and item index.
    Each user interacts with ``min_interactions..max_interactions`` distinct
    items of its block at random times, so after masking seen items only a
    handful of in-cluster candidates remain for the held-out item.
    """
    rng = np.random.default_rng(seed)
    item_cluster_tok = np.arange(n_items) % n_clusters
    blocks = [np.flatnonzero(item_cluster_tok == c) for c in range(n_clusters)]
    if max_interactions > min(len(b) for b in blocks):
        raise ValueError("max_interactions exceeds the size of an item block")

    raw = []
    for u in range(n_users):
        c = u % n_clusters
        k = int(rng.integers(min_interactions, max_interactions + 1))
        chosen = rng.choice(blocks[c], size=k, replace=False)
        times = np.sort(rng.choice(10**6, size=k, replace=False))
        for item, t in zip(chosen, times):
            raw.append(RawInteraction(f"u{u}", f"i{item}", 1.0, int(t)))

    dataset = build_dataset(raw)
    user_labels = np.array([int(tok[1:]) % n_clusters for tok in dataset.user_tokens])
    item_labels = np.array([int(tok[1:]) % n_clusters for tok in dataset.item_tokens])
    return dataset, user_labels, item_labels
