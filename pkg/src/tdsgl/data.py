"""Interaction datasets: parsing, dense id spaces and per-user splits."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"
ID_MAP_NAME = "id_map.json"
SPLIT_FILES = {"train": "train.txt", "validation": "valid.txt", "test": "test.txt"}


class ParseError(ValueError):
    """Malformed interaction file."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


def _pairs(values: np.ndarray | Sequence | None) -> np.ndarray:
    if values is None:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.asarray(values, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return arr.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """User/item index spaces plus train/validation/test (user, item) pairs.

    An unsplit dataset keeps every interaction in ``train``.
    """

    num_users: int
    num_items: int
    train: np.ndarray
    validation: np.ndarray = field(default_factory=lambda: _pairs(None))
    test: np.ndarray = field(default_factory=lambda: _pairs(None))
    user_ids: tuple = ()
    item_ids: tuple = ()

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            arr = _pairs(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_interactions(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)

    @property
    def sparsity(self) -> float:
        return sparsity(self.num_users, self.num_items, self.num_interactions)

    def all_pairs(self) -> np.ndarray:
        return np.concatenate([self.train, self.validation, self.test])

    def validate(self) -> None:
        """Raise ``ValueError`` if an index or disjointness invariant is broken."""
        for name in ("train", "validation", "test"):
            arr = getattr(self, name)
            if len(arr) == 0:
                continue
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= self.num_users:
                raise ValueError(f"{name}: user index out of range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= self.num_items:
                raise ValueError(f"{name}: item index out of range")
        train_keys = set(_keys(self.train, self.num_items).tolist())
        for name in ("validation", "test"):
            keys = _keys(getattr(self, name), self.num_items).tolist()
            if train_keys.intersection(keys):
                raise ValueError(f"train and {name} overlap")
        held_out = np.concatenate([self.validation[:, 0], self.test[:, 0]])
        if len(held_out) and not np.isin(held_out, self.train[:, 0]).all():
            raise ValueError("held-out interactions for a user absent from train")

    def equals(self, other: "InteractionDataset") -> bool:
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("train", "validation", "test")
            )
        )

    def user_item_lists(self, which: str = "train") -> list[list[int]]:
        lists: list[list[int]] = [[] for _ in range(self.num_users)]
        for u, i in getattr(self, which).tolist():
            lists[u].append(i)
        return lists


def _keys(pairs: np.ndarray, num_items: int) -> np.ndarray:
    return pairs[:, 0] * np.int64(num_items) + pairs[:, 1]


def sparsity(num_users: int, num_items: int, num_interactions: int) -> float:
    return 1.0 - num_interactions / (num_users * num_items)


def parse_adjacency_list(
    stream: IO[str] | Iterable[str],
    *,
    reindex: bool = True,
    num_users: int | None = None,
    num_items: int | None = None,
    path: str | None = None,
) -> InteractionDataset:
    """Parse ``user item item ...`` lines into an unsplit dataset.

    With ``reindex`` raw ids are mapped densely from 0 in first-seen order.
    Without it the ids are taken as indices already (our own serialized
    files), and ``num_users``/``num_items`` may widen the index spaces.
    Duplicate (user, item) pairs collapse to one interaction.
    """
    user_index: dict[int, int] = {}
    item_index: dict[int, int] = {}
    seen: dict[tuple[int, int], None] = {}
    saw_line = False
    max_user = max_item = -1
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        saw_line = True
        try:
            ids = [int(t) for t in tokens]
        except ValueError:
            bad = next(t for t in tokens if not _is_int(t))
            raise ParseError(f"non-integer token {bad!r}", line=lineno, path=path) from None
        if reindex:
            u = user_index.setdefault(ids[0], len(user_index))
            items = [item_index.setdefault(i, len(item_index)) for i in ids[1:]]
        else:
            if min(ids) < 0:
                raise ParseError("negative index", line=lineno, path=path)
            u, items = ids[0], ids[1:]
            max_user = max(max_user, u)
            if items:
                max_item = max(max_item, max(items))
        for i in items:
            seen[(u, i)] = None
    if not saw_line:
        raise ParseError("empty interaction file", path=path)
    pairs = np.array(list(seen), dtype=np.int64).reshape(-1, 2)
    if reindex:
        return InteractionDataset(
            num_users=len(user_index),
            num_items=len(item_index),
            train=pairs,
            user_ids=tuple(user_index),
            item_ids=tuple(item_index),
        )
    n_u = max(max_user + 1, num_users or 0)
    n_i = max(max_item + 1, num_items or 0)
    return InteractionDataset(num_users=n_u, num_items=n_i, train=pairs)


def parse_edge_list(
    stream: IO[str] | Iterable[str], *, path: str | None = None
) -> InteractionDataset:
    """Parse ``user item [extra columns]`` lines, e.g. HetRec ``user_artists.dat``.

    A non-numeric first line is treated as a header; extra columns
    (weights, timestamps) are ignored.
    """
    user_index: dict[int, int] = {}
    item_index: dict[int, int] = {}
    seen: dict[tuple[int, int], None] = {}
    first = True
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if first and not all(_is_int(t) for t in tokens[:2]):
            first = False
            continue
        first = False
        if len(tokens) < 2 or not (_is_int(tokens[0]) and _is_int(tokens[1])):
            raise ParseError("expected 'user item' integer columns", line=lineno, path=path)
        u = user_index.setdefault(int(tokens[0]), len(user_index))
        i = item_index.setdefault(int(tokens[1]), len(item_index))
        seen[(u, i)] = None
    if not seen and not user_index:
        raise ParseError("empty interaction file", path=path)
    return InteractionDataset(
        num_users=len(user_index),
        num_items=len(item_index),
        train=np.array(list(seen), dtype=np.int64).reshape(-1, 2),
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
    )


def _is_int(token: str) -> bool:
    try:
        int(token)
    except ValueError:
        return False
    return True


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, validation, test)")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    return float(ratios[0]), float(ratios[1]), float(ratios[2])


def _held_out_count(n: int, ratio: float) -> int:
    if ratio <= 0:
        return 0
    return max(1, math.floor(n * ratio + 0.5))


def split_dataset(
    dataset: InteractionDataset,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> InteractionDataset:
    """Per-user random split; users with fewer than 3 interactions stay train-only.

    Every user with at least 3 interactions gets at least one held-out
    item in each split whose ratio is non-zero.
    """
    _, r_val, r_test = _check_ratios(ratios)
    rng = np.random.default_rng(seed)
    pairs = dataset.all_pairs()
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(dataset.num_users + 1))
    parts: dict[str, list[np.ndarray]] = {"train": [], "validation": [], "test": []}
    for u in range(dataset.num_users):
        items = pairs[bounds[u] : bounds[u + 1], 1]
        n = len(items)
        if n == 0:
            continue
        if n < 3:
            parts["train"].append(np.column_stack([np.full(n, u), items]))
            continue
        perm = items[rng.permutation(n)]
        n_test = _held_out_count(n, r_test)
        n_val = _held_out_count(n, r_val)
        while n_test + n_val > n - 1:
            if n_val > (1 if r_val > 0 else 0):
                n_val -= 1
            else:
                n_test -= 1
        sizes = {"test": perm[:n_test], "validation": perm[n_test : n_test + n_val], "train": perm[n_test + n_val :]}
        for name, chunk in sizes.items():
            if len(chunk):
                parts[name].append(np.column_stack([np.full(len(chunk), u), np.sort(chunk)]))

    def stack(chunks):
        return np.concatenate(chunks).astype(np.int64) if chunks else _pairs(None)

    return InteractionDataset(
        num_users=dataset.num_users,
        num_items=dataset.num_items,
        train=stack(parts["train"]),
        validation=stack(parts["validation"]),
        test=stack(parts["test"]),
        user_ids=dataset.user_ids,
        item_ids=dataset.item_ids,
    )


# -- serialization -----------------------------------------------------------


def format_adjacency_list(pairs: np.ndarray, num_users: int, *, all_users: bool = False) -> str:
    """Adjacency-list text in index space; ``all_users`` emits bare lines for empty users."""
    lists: list[list[int]] = [[] for _ in range(num_users)]
    for u, i in pairs.tolist():
        lists[u].append(i)
    lines = []
    for u, items in enumerate(lists):
        if items or all_users:
            lines.append(" ".join(str(x) for x in [u, *items]))
    return "\n".join(lines) + ("\n" if lines else "")


def read_interactions(path: str, fmt: str = "auto") -> InteractionDataset:
    """Read a raw dataset: one file, or a directory of train.txt/test.txt style files."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset path not found: {path}")
    if os.path.isdir(path):
        names = [n for n in ("train.txt", "valid.txt", "val.txt", "test.txt") if os.path.exists(os.path.join(path, n))]
        if not names:
            raise FileNotFoundError(f"no train.txt/test.txt files under {path}")
        files = [os.path.join(path, n) for n in names]
    else:
        files = [path]
    if fmt == "auto":
        fmt = "edges" if files[0].endswith((".dat", ".tsv", ".csv")) else "adj"
    if fmt not in ("adj", "edges"):
        raise ValueError(f"unknown format {fmt!r}")

    def lines():
        for f in files:
            with open(f, encoding="utf-8") as fh:
                yield from fh

    label = files[0] if len(files) == 1 else path
    if fmt == "edges":
        return parse_edge_list(lines(), path=label)
    return parse_adjacency_list(lines(), path=label)


def file_digest(paths: Iterable[str]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_dataset(dataset: InteractionDataset, directory: str, **extra) -> dict:
    """Write splits, the id map and a JSON manifest; returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        text = format_adjacency_list(
            getattr(dataset, name), dataset.num_users, all_users=(name == "train")
        )
        with open(os.path.join(directory, fname), "w", encoding="utf-8") as fh:
            fh.write(text)
    id_map_path = os.path.join(directory, ID_MAP_NAME)
    with open(id_map_path, "w", encoding="utf-8") as fh:
        json.dump({"users": list(dataset.user_ids), "items": list(dataset.item_ids)}, fh)
    manifest = {
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_interactions": dataset.num_interactions,
        "counts": {n: int(len(getattr(dataset, n))) for n in SPLIT_FILES},
        "sparsity": dataset.sparsity,
        "id_map": ID_MAP_NAME,
        **extra,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_manifest(directory: str) -> dict:
    with open(os.path.join(directory, MANIFEST_NAME), encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(directory: str) -> InteractionDataset:
    """Load a directory produced by :func:`write_dataset`."""
    manifest = read_manifest(directory)
    n_u, n_i = manifest["num_users"], manifest["num_items"]
    parts = {}
    for name, fname in SPLIT_FILES.items():
        p = os.path.join(directory, fname)
        with open(p, encoding="utf-8") as fh:
            text = fh.read()
        if text.strip():
            parts[name] = parse_adjacency_list(
                text.splitlines(), reindex=False, num_users=n_u, num_items=n_i, path=p
            ).train
        else:
            parts[name] = _pairs(None)
    ids = {"users": [], "items": []}
    id_path = os.path.join(directory, manifest.get("id_map", ID_MAP_NAME))
    if os.path.exists(id_path):
        with open(id_path, encoding="utf-8") as fh:
            ids = json.load(fh)
    ds = InteractionDataset(
        num_users=n_u,
        num_items=n_i,
        user_ids=tuple(ids["users"]),
        item_ids=tuple(ids["items"]),
        **parts,
    )
    return ds


def manifest_hash(directory: str) -> str:
    with open(os.path.join(directory, MANIFEST_NAME), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
