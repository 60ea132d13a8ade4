"""MovieLens-1M ingestion: parsing, binarization, and per-user leave-one-out splits.

Raw files are the "::"-delimited ``ratings.dat`` / ``users.dat``. Ratings are
binarized (>= 4 -> 1) and each retained user contributes their most recent
positive as the test instance and the second most recent as validation; the
remaining positives (truncated to a sliding window) form the training history.
"""

from __future__ import annotations

import io
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .manifest import sha256_file, write_manifest

log = logging.getLogger(__name__)

AGE_BUCKETS = (1, 18, 25, 35, 45, 50, 56)
OCCUPATION_COUNT = 21
ATTRIBUTE_NAMES = ("gender", "age", "occupation")
GENDER_CODES = {"F": 0, "M": 1}

MIN_INSTANCES = 10
HISTORY_WINDOW = 100
POSITIVE_THRESHOLD = 4

ARTIFACT_NAME = "dataset.npz"


class MovieLensParseError(ValueError):
    """Raised when a raw MovieLens file cannot be parsed."""


class RawRating(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclass
class AttributeTable:
    """Per-user categorical attribute codes with per-attribute cardinalities."""

    values: np.ndarray  # (num_users, M) int64 codes
    cardinalities: list[int]
    names: list[str]
    user_ids: np.ndarray  # original ids, aligned with rows

    @property
    def num_attributes(self) -> int:
        return int(self.values.shape[1])

    def validate(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != len(self.cardinalities):
            raise ValueError("attribute table shape inconsistent with cardinalities")
        for i, card in enumerate(self.cardinalities):
            col = self.values[:, i]
            if col.min(initial=0) < 0 or col.max(initial=0) >= card:
                raise ValueError(f"attribute {self.names[i]!r} has codes outside [0, {card})")

    def subset(self, rows: np.ndarray) -> "AttributeTable":
        return AttributeTable(
            values=self.values[rows].copy(),
            cardinalities=list(self.cardinalities),
            names=list(self.names),
            user_ids=self.user_ids[rows].copy(),
        )


@dataclass
class Interactions:
    """Columnar binarized interactions (all records, labels kept)."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray


@dataclass
class InteractionDataset:
    """Leave-one-out split dataset over remapped dense user/item indices."""

    num_users: int
    num_items: int
    train_items: list[np.ndarray]  # per-user chronological positive item indices
    valid_items: np.ndarray  # (num_users,)
    test_items: np.ndarray  # (num_users,)
    rated: list[np.ndarray]  # per-user every rated item (any label); negative-pool exclusions
    user_ids: np.ndarray  # dense index -> original user id
    item_ids: np.ndarray  # dense index -> original item id
    attributes: AttributeTable

    def validate(self) -> None:
        if len(self.train_items) != self.num_users or len(self.rated) != self.num_users:
            raise ValueError("per-user lists inconsistent with num_users")
        for u in range(self.num_users):
            held = {int(self.valid_items[u]), int(self.test_items[u])}
            if held & set(self.train_items[u].tolist()):
                raise ValueError(f"user {u}: held-out items leak into training history")
        self.attributes.validate()

    @property
    def split_sizes(self) -> dict:
        return {
            "train": int(sum(len(t) for t in self.train_items)),
            "valid": int(self.num_users),
            "test": int(self.num_users),
        }


def _parse_int(field: str, what: str, path: Path, lineno: int) -> int:
    try:
        return int(field)
    except ValueError:
        raise MovieLensParseError(f"{path}:{lineno}: malformed {what} field {field!r}") from None


def parse_movielens(ratings_path: Path | str, users_path: Path | str) -> tuple[list[RawRating], AttributeTable]:
    """Parse ``ratings.dat`` and ``users.dat``; attribute codes come from the users file.

    Age keeps the dataset's native 7 buckets, occupation its native 21 codes.
    A rating referencing a user absent from the users file is an error.
    """
    ratings_path = Path(ratings_path)
    users_path = Path(users_path)
    for p in (ratings_path, users_path):
        if not p.exists():
            raise FileNotFoundError(f"missing input file: {p}")

    age_to_code = {bucket: i for i, bucket in enumerate(AGE_BUCKETS)}
    user_ids: list[int] = []
    codes: list[tuple[int, int, int]] = []
    with open(users_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) < 4:
                raise MovieLensParseError(f"{users_path}:{lineno}: expected >=4 '::'-delimited fields")
            uid = _parse_int(parts[0], "user id", users_path, lineno)
            gender = parts[1]
            if gender not in GENDER_CODES:
                raise MovieLensParseError(f"{users_path}:{lineno}: unknown gender code {gender!r}")
            age = _parse_int(parts[2], "age", users_path, lineno)
            if age not in age_to_code:
                raise MovieLensParseError(f"{users_path}:{lineno}: age {age} is not a known bucket {AGE_BUCKETS}")
            occupation = _parse_int(parts[3], "occupation", users_path, lineno)
            if not 0 <= occupation < OCCUPATION_COUNT:
                raise MovieLensParseError(f"{users_path}:{lineno}: occupation {occupation} outside [0, {OCCUPATION_COUNT})")
            user_ids.append(uid)
            codes.append((GENDER_CODES[gender], age_to_code[age], occupation))

    known_users = set(user_ids)
    ratings: list[RawRating] = []
    with open(ratings_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise MovieLensParseError(f"{ratings_path}:{lineno}: expected 4 '::'-delimited fields")
            uid = _parse_int(parts[0], "user id", ratings_path, lineno)
            iid = _parse_int(parts[1], "item id", ratings_path, lineno)
            rating = _parse_int(parts[2], "rating", ratings_path, lineno)
            ts = _parse_int(parts[3], "timestamp", ratings_path, lineno)
            if not 1 <= rating <= 5:
                raise MovieLensParseError(f"{ratings_path}:{lineno}: rating {rating} outside [1, 5]")
            if ts < 0:
                raise MovieLensParseError(f"{ratings_path}:{lineno}: negative timestamp {ts}")
            if uid not in known_users:
                raise MovieLensParseError(f"{ratings_path}:{lineno}: rating references unknown user {uid}")
            ratings.append(RawRating(uid, iid, rating, ts))

    order = np.argsort(np.asarray(user_ids), kind="stable")
    table = AttributeTable(
        values=np.asarray(codes, dtype=np.int64).reshape(len(codes), 3)[order],
        cardinalities=[2, len(AGE_BUCKETS), OCCUPATION_COUNT],
        names=list(ATTRIBUTE_NAMES),
        user_ids=np.asarray(user_ids, dtype=np.int64)[order],
    )
    return ratings, table


def binarize(ratings: Sequence[RawRating], threshold: int = POSITIVE_THRESHOLD) -> Interactions:
    """Label each record 1 iff its rating reaches ``threshold``, keeping all records."""
    users = np.fromiter((r.user_id for r in ratings), dtype=np.int64, count=len(ratings))
    items = np.fromiter((r.item_id for r in ratings), dtype=np.int64, count=len(ratings))
    scores = np.fromiter((r.rating for r in ratings), dtype=np.int64, count=len(ratings))
    ts = np.fromiter((r.timestamp for r in ratings), dtype=np.int64, count=len(ratings))
    return Interactions(users=users, items=items, timestamps=ts, labels=(scores >= threshold).astype(np.int8))


def filter_and_split(
    interactions: Interactions,
    attribute_table: AttributeTable,
    min_count: int = MIN_INSTANCES,
    window: int = HISTORY_WINDOW,
) -> InteractionDataset:
    """Drop sparse users and build per-user chronological train/valid/test splits.

    Users with fewer than ``min_count`` rated instances (any label) are removed.
    Per user, records are ordered by (timestamp, item_id); the most recent
    positive becomes the test instance, the second most recent positive the
    validation instance, and the remaining positives (most recent ``window``)
    the training history. Users without enough positives to fill both held-out
    slots are excluded with a logged warning.
    """
    attr_index = {int(uid): row for row, uid in enumerate(attribute_table.user_ids)}

    by_user: dict[int, list[int]] = {}
    for idx, uid in enumerate(interactions.users):
        by_user.setdefault(int(uid), []).append(idx)

    kept: list[int] = []
    train_lists: list[np.ndarray] = []
    valid_list: list[int] = []
    test_list: list[int] = []
    rated_lists: list[np.ndarray] = []

    for uid in sorted(by_user):
        rows = np.asarray(by_user[uid])
        if len(rows) < min_count:
            continue
        if uid not in attr_index:
            raise MovieLensParseError(f"user {uid} has ratings but no attribute record")
        ts = interactions.timestamps[rows]
        items = interactions.items[rows]
        order = np.lexsort((items, ts))  # ties broken by item id for determinism
        rows = rows[order]
        pos_rows = rows[interactions.labels[rows] == 1]
        if len(pos_rows) < 2:
            log.warning("user %d excluded: only %d positive(s) after filtering", uid, len(pos_rows))
            continue
        pos_items = interactions.items[pos_rows]
        test_list.append(int(pos_items[-1]))
        valid_list.append(int(pos_items[-2]))
        history = pos_items[:-2]
        if window and len(history) > window:
            history = history[-window:]
        train_lists.append(history.astype(np.int64))
        rated_lists.append(np.unique(interactions.items[rows]).astype(np.int64))
        kept.append(uid)

        # Split ordering sanity: positives are chronologically sorted already.
        pos_ts = interactions.timestamps[pos_rows]
        assert len(pos_ts) < 3 or pos_ts[:-2].max() <= pos_ts[-2] <= pos_ts[-1]

    if not kept:
        raise ValueError("no users survive filtering")

    kept_arr = np.asarray(kept, dtype=np.int64)
    all_items = np.unique(np.concatenate(rated_lists))
    item_remap = {int(orig): new for new, orig in enumerate(all_items)}

    def remap(arr: np.ndarray) -> np.ndarray:
        return np.asarray([item_remap[int(i)] for i in arr], dtype=np.int64)

    attr_rows = np.asarray([attr_index[uid] for uid in kept], dtype=np.int64)
    dataset = InteractionDataset(
        num_users=len(kept),
        num_items=len(all_items),
        train_items=[remap(t) for t in train_lists],
        valid_items=remap(np.asarray(valid_list)),
        test_items=remap(np.asarray(test_list)),
        rated=[remap(r) for r in rated_lists],
        user_ids=kept_arr,
        item_ids=all_items,
        attributes=attribute_table.subset(attr_rows),
    )
    dataset.validate()
    return dataset


def prepare_dataset(data_dir: Path | str, min_count: int = MIN_INSTANCES, window: int = HISTORY_WINDOW) -> InteractionDataset:
    """End-to-end ingestion from a directory holding ratings.dat / users.dat."""
    data_dir = Path(data_dir)
    ratings, attrs = parse_movielens(data_dir / "ratings.dat", data_dir / "users.dat")
    return filter_and_split(binarize(ratings), attrs, min_count=min_count, window=window)


def _write_npz_deterministic(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # np.savez embeds wall-clock mtimes in the zip; fixed timestamps keep
    # re-runs byte-identical.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def _pack_ragged(lists: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum([len(x) for x in lists], out=offsets[1:])
    flat = np.concatenate(lists) if lists else np.zeros(0, dtype=np.int64)
    return flat.astype(np.int64), offsets


def _unpack_ragged(flat: np.ndarray, offsets: np.ndarray) -> list[np.ndarray]:
    return [flat[offsets[i] : offsets[i + 1]].copy() for i in range(len(offsets) - 1)]


def save_dataset(dataset: InteractionDataset, out_dir: Path | str, extra_manifest: dict | None = None) -> Path:
    """Serialize the dataset to ``dataset.npz`` plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_flat, train_off = _pack_ragged(dataset.train_items)
    rated_flat, rated_off = _pack_ragged(dataset.rated)
    arrays = {
        "num_users": np.asarray([dataset.num_users]),
        "num_items": np.asarray([dataset.num_items]),
        "train_flat": train_flat,
        "train_offsets": train_off,
        "rated_flat": rated_flat,
        "rated_offsets": rated_off,
        "valid_items": dataset.valid_items,
        "test_items": dataset.test_items,
        "user_ids": dataset.user_ids,
        "item_ids": dataset.item_ids,
        "attr_values": dataset.attributes.values,
        "attr_cardinalities": np.asarray(dataset.attributes.cardinalities),
        "attr_user_ids": dataset.attributes.user_ids,
        "attr_names": np.asarray(dataset.attributes.names),
    }
    artifact = out_dir / ARTIFACT_NAME
    _write_npz_deterministic(artifact, arrays)
    manifest = {
        "artifact": ARTIFACT_NAME,
        "sha256": sha256_file(artifact),
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "split_sizes": dataset.split_sizes,
        "attributes": {
            name: card for name, card in zip(dataset.attributes.names, dataset.attributes.cardinalities)
        },
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    write_manifest(out_dir, manifest)
    return artifact


def load_dataset(path: Path | str) -> InteractionDataset:
    """Load a dataset artifact written by :func:`save_dataset`.

    ``path`` may be the artifact file or its containing directory.
    """
    path = Path(path)
    if path.is_dir():
        path = path / ARTIFACT_NAME
    if not path.exists():
        raise FileNotFoundError(f"dataset artifact not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        attrs = AttributeTable(
            values=z["attr_values"],
            cardinalities=[int(c) for c in z["attr_cardinalities"]],
            names=[str(n) for n in z["attr_names"]],
            user_ids=z["attr_user_ids"],
        )
        dataset = InteractionDataset(
            num_users=int(z["num_users"][0]),
            num_items=int(z["num_items"][0]),
            train_items=_unpack_ragged(z["train_flat"], z["train_offsets"]),
            valid_items=z["valid_items"],
            test_items=z["test_items"],
            rated=_unpack_ragged(z["rated_flat"], z["rated_offsets"]),
            user_ids=z["user_ids"],
            item_ids=z["item_ids"],
            attributes=attrs,
        )
    dataset.validate()
    return dataset
