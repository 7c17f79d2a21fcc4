"""Interaction loading, leave-last-out splitting and split persistence."""

from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

TRAIN, VALIDATION, TEST = 0, 1, 2

SPLIT_MAGIC = b"TRPLDS1\0"
_SPLIT_PREFIX = b"TRPLDS"
_ROW_DTYPE = np.dtype([("user", "<u4"), ("item", "<u4"), ("timestamp", "<i8")])


class DataError(ValueError):
    """Raised for unreadable, malformed or corrupt dataset files."""


@dataclass(frozen=True, slots=True)
class RawInteraction:
    user_token: str
    item_token: str
    rating: Optional[float]
    timestamp: int


def _read_lines(path) -> list[str]:
    path = Path(path)
    try:
        with open(path, encoding="latin-1", newline="") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _raise_malformed(path, bad: list[int]) -> None:
    if bad:
        raise DataError(
            f"{path}: {len(bad)} malformed line(s); first at line {bad[0]}"
        )


def load_movielens(path) -> list[RawInteraction]:
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines."""
    records, bad = [], []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        try:
            if len(parts) != 4 or not parts[0] or not parts[1]:
                raise ValueError
            ts = int(parts[3])
            if ts < 0:
                raise ValueError
            records.append(RawInteraction(parts[0], parts[1], float(parts[2]), ts))
        except ValueError:
            bad.append(lineno)
    _raise_malformed(path, bad)
    return records


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_amazon_csv(path) -> list[RawInteraction]:
    """Parse ``user,item,rating,timestamp`` rows.

    A first row whose timestamp column is not numeric is taken as a header
    and skipped; any other non-numeric row is malformed.
    """
    records, bad = [], []
    rows = csv.reader(_read_lines(path))
    for lineno, row in enumerate(rows, start=1):
        if not row or not any(f.strip() for f in row):
            continue
        if lineno == 1 and len(row) == 4 and not _is_number(row[3]):
            continue
        try:
            if len(row) != 4 or not row[0] or not row[1]:
                raise ValueError
            ts = int(float(row[3]))
            if ts < 0:
                raise ValueError
            rating = float(row[2]) if row[2].strip() else None
            records.append(RawInteraction(row[0], row[1], rating, ts))
        except ValueError:
            bad.append(lineno)
    _raise_malformed(path, bad)
    return records


@dataclass(eq=False)
class InteractionDataset:
    """Interactions sorted by (user, timestamp) with per-row split tags.

    ``users``/``items``/``timestamps``/``split`` are aligned arrays. Token lists
    map contiguous indices back to the original identifiers.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    split: np.ndarray
    user_tokens: list[str]
    item_tokens: list[str]

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    @property
    def n_interactions(self) -> int:
        return len(self.users)

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.user_tokens)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.item_tokens)}

    @cached_property
    def item_popularity(self) -> np.ndarray:
        """Training-interaction count per item."""
        train = self.split == TRAIN
        return np.bincount(self.items[train], minlength=self.n_items)

    @cached_property
    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        train = self.split == TRAIN
        return self.users[train], self.items[train]

    @cached_property
    def train_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """``(indptr, items)``: each user's training items, sorted ascending."""
        users, items = self.train_pairs
        order = np.lexsort((items, users))
        counts = np.bincount(users, minlength=self.n_users)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr, items[order]

    def train_items(self, user: int) -> np.ndarray:
        indptr, items = self.train_csr
        return items[indptr[user] : indptr[user + 1]]

    def _target(self, tag: int) -> np.ndarray:
        out = np.full(self.n_users, -1, dtype=np.int64)
        rows = self.split == tag
        out[self.users[rows]] = self.items[rows]
        return out

    @cached_property
    def validation_items(self) -> np.ndarray:
        """Held-out validation item per user, ``-1`` when the user has none."""
        return self._target(VALIDATION)

    @cached_property
    def test_items(self) -> np.ndarray:
        """Held-out test item per user, ``-1`` when the user has none."""
        return self._target(TEST)

    def summary(self) -> dict:
        n_train = int(np.sum(self.split == TRAIN))
        return {
            "users": self.n_users,
            "items": self.n_items,
            "actions": self.n_interactions,
            "avg_length": self.n_interactions / self.n_users,
            "avg_train_length": n_train / self.n_users,
            "validation": int(np.sum(self.split == VALIDATION)),
            "test": int(np.sum(self.split == TEST)),
        }

    def equals(self, other: "InteractionDataset") -> bool:
        return (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.split, other.split)
            and self.user_tokens == other.user_tokens
            and self.item_tokens == other.item_tokens
        )


def build_dataset(
    raw: Sequence[RawInteraction], min_rating_threshold: Optional[float] = None
) -> InteractionDataset:
    """De-duplicate, index and split interactions leave-last-out.

    Every interaction is an implicit positive unless ``min_rating_threshold``
    is given. Repeated (user, item) pairs keep their earliest occurrence.
    Per user, the last interaction goes to test and the second-to-last to
    validation when the user has at least three; ties in time keep file order.
    """
    if not raw:
        raise DataError("cannot build a dataset from zero interactions")

    all_users = {r.user_token for r in raw}
    if min_rating_threshold is not None:
        raw = [r for r in raw if r.rating is not None and r.rating >= min_rating_threshold]
    dropped = len(all_users - {r.user_token for r in raw})
    if dropped:
        log.warning("dropped %d user(s) with no interactions after rating filter", dropped)
    if not raw:
        raise DataError("no interactions left after rating filter")

    earliest: dict[tuple[str, str], int] = {}
    for pos, r in enumerate(raw):
        key = (r.user_token, r.item_token)
        prev = earliest.get(key)
        if prev is None or r.timestamp < raw[prev].timestamp:
            earliest[key] = pos
    keep = sorted(earliest.values())

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    n = len(keep)
    users = np.empty(n, dtype=np.int64)
    items = np.empty(n, dtype=np.int64)
    timestamps = np.empty(n, dtype=np.int64)
    for k, pos in enumerate(keep):
        r = raw[pos]
        users[k] = user_index.setdefault(r.user_token, len(user_index))
        items[k] = item_index.setdefault(r.item_token, len(item_index))
        timestamps[k] = r.timestamp

    # keep is in file order, so a stable lexsort breaks timestamp ties by it
    order = np.lexsort((np.arange(n), timestamps, users))
    users, items, timestamps = users[order], items[order], timestamps[order]
    return InteractionDataset(
        users,
        items,
        timestamps,
        _leave_last_out(users),
        list(user_index),
        list(item_index),
    )


def _leave_last_out(users: np.ndarray) -> np.ndarray:
    split = np.full(len(users), TRAIN, dtype=np.int8)
    if len(users) == 0:
        return split
    counts = np.bincount(users)
    ends = np.cumsum(counts)
    eligible = counts >= 3
    split[ends[eligible] - 1] = TEST
    split[ends[eligible] - 2] = VALIDATION
    return split


# ---------------------------------------------------------------------------
# split container


def save_split(dataset: InteractionDataset, path) -> None:
    """Write the dataset to a checksummed little-endian binary container."""
    rows = np.empty(dataset.n_interactions, dtype=_ROW_DTYPE)
    rows["user"] = dataset.users
    rows["item"] = dataset.items
    rows["timestamp"] = dataset.timestamps
    trailer = json.dumps(
        {"user_tokens": dataset.user_tokens, "item_tokens": dataset.item_tokens},
        separators=(",", ":"),
    ).encode("utf-8")
    payload = b"".join(
        [
            SPLIT_MAGIC,
            struct.pack("<III", dataset.n_users, dataset.n_items, dataset.n_interactions),
            rows.tobytes(),
            dataset.split.astype("u1").tobytes(),
            struct.pack("<I", len(trailer)),
            trailer,
        ]
    )
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def load_split(path) -> InteractionDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 24:
        raise DataError(f"{path}: file too short to be a split container")
    if raw[:8] != SPLIT_MAGIC:
        if raw[:6] == _SPLIT_PREFIX:
            raise DataError(f"{path}: unsupported split format version {raw[6:8]!r}")
        raise DataError(f"{path}: not a split container (bad magic)")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise DataError(f"{path}: checksum mismatch, file is corrupt")

    n_users, n_items, n = struct.unpack_from("<III", payload, 8)
    offset = 20
    rows = np.frombuffer(payload, dtype=_ROW_DTYPE, count=n, offset=offset)
    offset += n * _ROW_DTYPE.itemsize
    split = np.frombuffer(payload, dtype="u1", count=n, offset=offset).astype(np.int8)
    offset += n
    (trailer_len,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    tokens = json.loads(payload[offset : offset + trailer_len].decode("utf-8"))
    if len(tokens["user_tokens"]) != n_users or len(tokens["item_tokens"]) != n_items:
        raise DataError(f"{path}: id map sizes disagree with header counts")
    return InteractionDataset(
        rows["user"].astype(np.int64),
        rows["item"].astype(np.int64),
        rows["timestamp"].astype(np.int64),
        split,
        tokens["user_tokens"],
        tokens["item_tokens"],
    )
