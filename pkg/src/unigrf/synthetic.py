"""Synthetic MovieLens-shaped logs with learnable sequential structure.

Items sit on a ring of topics; each user drifts along the ring, so the next
item is predictable from recent history. Ratings come from a user-item
affinity, so click labels are predictable too. Used for fixtures and smoke
runs when the real ratings file is unavailable.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def generate_ratings(
    num_users: int = 200,
    num_items: int = 300,
    min_len: int = 20,
    max_len: int = 80,
    num_topics: int = 12,
    seed: int = 0,
) -> list[tuple[int, int, int, int]]:
    """Return ``(user, item, rating, timestamp)`` rows, ids starting at 1."""
    rng = np.random.default_rng(seed)
    topic_of = np.sort(rng.integers(0, num_topics, size=num_items))
    by_topic = [np.flatnonzero(topic_of == t) + 1 for t in range(num_topics)]
    by_topic = [ids if len(ids) else np.array([1 + t % num_items]) for t, ids in enumerate(by_topic)]
    item_vec = rng.normal(size=(num_items + 1, 4))
    rows = []
    for u in range(1, num_users + 1):
        taste = rng.normal(size=4)
        topic = int(rng.integers(num_topics))
        length = int(rng.integers(min_len, max_len + 1))
        t0 = 978_300_000 + int(rng.integers(0, 10_000_000))
        seen = set()
        for k in range(length):
            if rng.random() < 0.3:
                topic = (topic + 1) % num_topics
            pool = by_topic[topic]
            item = int(pool[rng.integers(len(pool))])
            if item in seen and rng.random() < 0.8:
                item = int(pool[rng.integers(len(pool))])
            seen.add(item)
            affinity = float(taste @ item_vec[item])
            rating = int(np.clip(np.round(3.2 + 1.2 * affinity + rng.normal(scale=0.5)), 1, 5))
            rows.append((u, item, rating, t0 + 60 * k + int(rng.integers(0, 30))))
    return rows


def write_ratings(path: str | os.PathLike, rows, fmt: str = "dat") -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        if fmt == "csv":
            fh.write("userId,movieId,rating,timestamp\n")
            for u, i, r, t in rows:
                fh.write(f"{u},{i},{r},{t}\n")
        else:
            for u, i, r, t in rows:
                fh.write(f"{u}::{i}::{r}::{t}\n")
    return path
