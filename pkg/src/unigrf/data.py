"""MovieLens-style ingestion, leave-one-out sequences and negative sampling.

Interactions are kept columnar (numpy arrays indexed by record) rather than
as a list of objects; ``Interactions.records()`` yields the row view when
one is needed.
"""

from __future__ import annotations

import csv
import gc
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from unigrf.engine.checkpoint import load_tensors, save_tensors
from unigrf.errors import ContractError, DataError

logger = logging.getLogger(__name__)

PAD = 0
MALFORMED_LIMIT = 0.01
FORMATS = ("dat", "csv")
STORE_FILES = ("manifest.json", "catalog.json", "sequences.bin")


class InteractionRecord(NamedTuple):
    user_id: str
    item_id: str
    rating: float
    timestamp: int
    label: int


def binarize(rating) -> np.ndarray:
    """Click label: 1 for ratings above 3, else 0."""
    return (np.asarray(rating) > 3).astype(np.int8)


def _id_key(raw: str):
    return (0, int(raw), "") if raw.isdigit() else (1, 0, raw)


@dataclass
class Catalog:
    """Dense index maps. Items use 1..|I| (0 is padding); users use 0..|U|-1."""

    item_ids: list[str]
    user_ids: list[str]
    item_index: dict[str, int] = field(init=False, repr=False)
    user_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.item_index = {raw: i + 1 for i, raw in enumerate(self.item_ids)}
        self.user_index = {raw: u for u, raw in enumerate(self.user_ids)}

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @classmethod
    def from_ids(cls, users: Sequence[str], items: Sequence[str]) -> "Catalog":
        return cls(item_ids=sorted(set(items), key=_id_key), user_ids=sorted(set(users), key=_id_key))

    def to_json(self) -> dict:
        return {"item_ids": self.item_ids, "user_ids": self.user_ids}


@dataclass
class Interactions:
    """Parsed log in file order. ``user``/``item`` hold dense catalog indices."""

    catalog: Catalog
    user: np.ndarray
    item: np.ndarray
    rating: np.ndarray
    timestamp: np.ndarray
    malformed: int = 0

    @property
    def label(self) -> np.ndarray:
        return binarize(self.rating)

    def __len__(self) -> int:
        return len(self.user)

    def records(self) -> Iterator[InteractionRecord]:
        cat = self.catalog
        for u, i, r, t in zip(self.user, self.item, self.rating, self.timestamp):
            yield InteractionRecord(cat.user_ids[u], cat.item_ids[i - 1], float(r), int(t), int(r > 3))


def _split_rows(text: str, fmt: str) -> tuple[list[list[str]], int]:
    if fmt == "dat":
        lines = text.splitlines()
        return [line.split("::") for line in lines if line.strip()], 0
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["userId", "movieId", "rating", "timestamp"]:
            raise DataError(f"csv header must start with userId,movieId,rating,timestamp; got {header}")
        return [row for row in reader if row], 1
    raise ContractError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def parse_interactions(path: str | os.PathLike, fmt: str = "dat") -> Interactions:
    """Read a MovieLens ratings file (``UserID::MovieID::Rating::Timestamp`` or csv)."""
    # millions of short-lived row lists make the cyclic collector dominate parse time
    enabled = gc.isenabled()
    gc.disable()
    try:
        return _parse_interactions(path, fmt)
    finally:
        if enabled:
            gc.enable()


def _parse_interactions(path, fmt):
    try:
        text = Path(path).read_text(encoding="latin-1")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows, first_line = _split_rows(text, fmt)

    users: list[str] = []
    items: list[str] = []
    ratings: list[float] = []
    stamps: list[int] = []
    bad: list[tuple[int, str]] = []
    for lineno, row in enumerate(rows, start=1 + first_line):
        try:
            if len(row) != 4:
                raise ValueError("expected 4 fields")
            u, i = row[0].strip(), row[1].strip()
            r = float(row[2])
            t = int(float(row[3]))
            if not u or not i or not (0 < r <= 5):
                raise ValueError("bad id or rating")
            if fmt == "dat" and not (u.isdigit() and i.isdigit()):
                raise ValueError("dat ids must be integers")
        except ValueError:
            bad.append((lineno, ("::" if fmt == "dat" else ",").join(row)))
            continue
        users.append(u)
        items.append(i)
        ratings.append(r)
        stamps.append(t)

    total = len(rows)
    if bad:
        logger.warning("%s: skipped %d malformed rows of %d", path, len(bad), total)
    if total and len(bad) / total > MALFORMED_LIMIT:
        sample = "; ".join(f"line {n}: {line!r}" for n, line in bad[:5])
        raise DataError(f"{path}: {len(bad)}/{total} malformed rows exceeds {MALFORMED_LIMIT:.0%} ({sample})")
    if not users:
        raise DataError(f"{path}: no interactions parsed")

    catalog = Catalog.from_ids(users, items)
    return Interactions(
        catalog=catalog,
        user=np.fromiter((catalog.user_index[u] for u in users), dtype=np.int64, count=len(users)),
        item=np.fromiter((catalog.item_index[i] for i in items), dtype=np.int64, count=len(items)),
        rating=np.asarray(ratings, dtype=np.float64),
        timestamp=np.asarray(stamps, dtype=np.int64),
        malformed=len(bad),
    )


def dataset_statistics(inter: Interactions) -> dict:
    users = len(np.unique(inter.user))
    return {
        "users": users,
        "items": len(np.unique(inter.item)),
        "interactions": len(inter),
        "avg_length": len(inter) / users,
    }


@dataclass
class UserSequence:
    """One user's left-padded training window plus held-out items."""

    user: int
    items: np.ndarray
    behaviors: np.ndarray
    valid_mask: np.ndarray
    valid_item: int
    valid_label: int
    test_item: int
    test_label: int

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def num_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class SequenceSet:
    """All users' sequences as stacked arrays (row u = one user)."""

    items: np.ndarray  # (U, n) int, 0 = padding
    behaviors: np.ndarray  # (U, n) in {0, 1}
    valid_item: np.ndarray
    valid_label: np.ndarray
    test_item: np.ndarray
    test_label: np.ndarray
    user: np.ndarray  # catalog user index per row
    seen_offsets: np.ndarray  # (U+1,) into seen_items
    seen_items: np.ndarray  # sorted unique observed items per user, concatenated

    @property
    def valid_mask(self) -> np.ndarray:
        return self.items != PAD

    @property
    def n(self) -> int:
        return self.items.shape[1]

    def __len__(self) -> int:
        return self.items.shape[0]

    def seen(self, row: int) -> np.ndarray:
        return self.seen_items[self.seen_offsets[row]:self.seen_offsets[row + 1]]

    def __getitem__(self, row: int) -> UserSequence:
        return UserSequence(
            user=int(self.user[row]),
            items=self.items[row].copy(),
            behaviors=self.behaviors[row].copy(),
            valid_mask=self.items[row] != PAD,
            valid_item=int(self.valid_item[row]),
            valid_label=int(self.valid_label[row]),
            test_item=int(self.test_item[row]),
            test_label=int(self.test_label[row]),
        )

    def subset(self, rows) -> "SequenceSet":
        rows = np.asarray(rows)
        seen = [self.seen(int(r)) for r in rows]
        offsets = np.concatenate([[0], np.cumsum([len(s) for s in seen])]).astype(np.int64)
        return SequenceSet(
            items=self.items[rows], behaviors=self.behaviors[rows],
            valid_item=self.valid_item[rows], valid_label=self.valid_label[rows],
            test_item=self.test_item[rows], test_label=self.test_label[rows], user=self.user[rows],
            seen_offsets=offsets,
            seen_items=np.concatenate(seen) if seen else np.zeros(0, dtype=np.int64),
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SequenceSet":
        return cls(**{name: np.asarray(arrays[name]).astype(np.int64) for name in cls.__dataclass_fields__})


def build_sequences(inter: Interactions, n: int) -> SequenceSet:
    """Chronological per-user histories with leave-one-out held-out items.

    The last interaction becomes the test item, the one before it the
    validation item, and the latest ``n`` of the remainder fill the
    left-padded training window. Users with fewer than three interactions
    are dropped.
    """
    if n < 3:
        raise ContractError(f"sequence length n must be >= 3, got {n}")
    order = np.lexsort((inter.timestamp, inter.user))  # stable: ties keep file order
    users = inter.user[order]
    items = inter.item[order]
    labels = inter.label[order]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    ends = np.r_[starts[1:], len(users)]
    keep = (ends - starts) >= 3
    starts, ends = starts[keep], ends[keep]

    U = len(starts)
    out_items = np.zeros((U, n), dtype=np.int64)
    out_beh = np.zeros((U, n), dtype=np.int64)
    seen: list[np.ndarray] = []
    for row, (s, e) in enumerate(zip(starts, ends)):
        train_end = e - 2
        lo = max(s, train_end - n)
        k = train_end - lo
        out_items[row, n - k:] = items[lo:train_end]
        out_beh[row, n - k:] = labels[lo:train_end]
        seen.append(np.unique(items[s:e]))
    offsets = np.concatenate([[0], np.cumsum([len(x) for x in seen])]).astype(np.int64)
    return SequenceSet(
        items=out_items,
        behaviors=out_beh,
        valid_item=items[ends - 2].astype(np.int64),
        valid_label=labels[ends - 2].astype(np.int64),
        test_item=items[ends - 1].astype(np.int64),
        test_label=labels[ends - 1].astype(np.int64),
        user=users[starts].astype(np.int64),
        seen_offsets=offsets,
        seen_items=np.concatenate(seen) if seen else np.zeros(0, dtype=np.int64),
    )


def user_rng(seed: int, user: int, epoch: int = 0) -> np.random.Generator:
    """Per-user stream, independent of how users are sharded across workers."""
    return np.random.default_rng([seed, user, epoch])


def sample_uniform_negatives(num_items, exclude, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` distinct items uniformly from ``1..num_items`` minus ``exclude``."""
    if isinstance(num_items, Catalog):
        num_items = num_items.num_items
    exclude = np.unique(np.asarray(list(exclude) if isinstance(exclude, (set, frozenset)) else exclude, dtype=np.int64))
    pool = np.setdiff1d(np.arange(1, num_items + 1, dtype=np.int64), exclude, assume_unique=True)
    if count < 0 or count > len(pool):
        raise ContractError(f"cannot draw {count} negatives from {len(pool)} eligible items")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(pool, size=count, replace=False)


# ---------------------------------------------------------------------------
# processed store
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_hash(store: str | os.PathLike) -> str:
    return _sha256(Path(store) / "manifest.json")


def save_store(out_dir: str | os.PathLike, seqs: SequenceSet, catalog: Catalog, stats: dict, seed: int = 0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensors(out / "sequences.bin", seqs.to_arrays())
    (out / "catalog.json").write_text(json.dumps(catalog.to_json()))
    manifest = {
        "format_version": 1,
        "num_users": catalog.num_users,
        "num_items": catalog.num_items,
        "interactions": stats["interactions"],
        "avg_length": stats["avg_length"],
        "n": seqs.n,
        "seed": seed,
        "sequence_users": len(seqs),
        "split_counts": {"train": int(seqs.valid_mask.sum()), "valid": len(seqs), "test": len(seqs)},
        "sequences_sha256": _sha256(out / "sequences.bin"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_store(store: str | os.PathLike) -> tuple[SequenceSet, Catalog, dict]:
    store = Path(store)
    try:
        manifest = json.loads((store / "manifest.json").read_text())
        cat = json.loads((store / "catalog.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{store}: not a processed store ({exc})") from exc
    seqs = SequenceSet.from_arrays(load_tensors(store / "sequences.bin"))
    if _sha256(store / "sequences.bin") != manifest["sequences_sha256"]:
        raise DataError(f"{store}: sequences.bin does not match its manifest hash")
    return seqs, Catalog(item_ids=cat["item_ids"], user_ids=cat["user_ids"]), manifest


def prepare_data(raw: str | os.PathLike, fmt: str, n: int, out_dir: str | os.PathLike, seed: int = 0) -> dict:
    """Parse, sequence and persist. A repeat call with identical inputs does nothing.

    Returns the manifest. Source provenance goes to ``provenance.json`` so the
    store itself depends only on the data, not on which encoding it came from.
    """
    out = Path(out_dir)
    source = {"sha256": _sha256(Path(raw)), "format": fmt, "n": n, "seed": seed}
    prov_path = out / "provenance.json"
    if prov_path.exists() and all((out / f).exists() for f in STORE_FILES):
        try:
            if json.loads(prov_path.read_text()) == source:
                logger.info("%s is up to date; skipping", out)
                return json.loads((out / "manifest.json").read_text())
        except ValueError:
            pass
    inter = parse_interactions(raw, fmt)
    seqs = build_sequences(inter, n)
    save_store(out, seqs, inter.catalog, dataset_statistics(inter), seed=seed)
    prov_path.write_text(json.dumps(source, indent=2, sort_keys=True) + "\n")
    return json.loads((out / "manifest.json").read_text())
