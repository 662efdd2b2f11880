"""Dataset ingestion, chronological splitting, evaluation instances and synthetic data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import MIN_TAG_ITEMS, clean_item_tags

_log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.10


class DataError(ValueError):
    """Unrecoverable problem with an input dataset."""


@dataclass
class FormatConfig:
    delimiter: str = "\t"
    header: bool = False
    # rows with a 4th rating column below this are not positives; None keeps all rows
    min_rating: float | None = None
    min_tag_items: int = MIN_TAG_ITEMS


@dataclass
class InteractionLog:
    """Interned, deduplicated, timestamp-sorted implicit-feedback rows.

    ``rows`` is an ``(n, 3)`` int64 array of ``(user, item, timestamp)``.
    """

    users: list[str]
    items: list[str]
    tags: list[str]
    rows: np.ndarray
    item_tag_pairs: list[tuple[int, int]]
    report: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    def item_tag_map(self) -> dict[int, frozenset[int]]:
        out: dict[int, set[int]] = {}
        for i, t in self.item_tag_pairs:
            out.setdefault(i, set()).add(t)
        return {i: frozenset(ts) for i, ts in out.items()}


def _read_rows(path: Path, fmt: FormatConfig) -> list[list[str]]:
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter=fmt.delimiter) if r and any(c.strip() for c in r)]
    return rows[1:] if fmt.header else rows


def ingest(interactions_path, item_tags_path, fmt: FormatConfig | None = None) -> InteractionLog:
    """Parse the generic TSV pair of files into an :class:`InteractionLog`."""
    fmt = fmt or FormatConfig()
    raw = _read_rows(Path(interactions_path), fmt)
    if not raw:
        raise DataError("no interactions")

    parsed = []
    malformed = below_threshold = 0
    for r in raw:
        if len(r) not in (3, 4):
            malformed += 1
            continue
        user, item, ts = r[0].strip(), r[1].strip(), r[2].strip()
        try:
            ts_val = int(ts)
            rating = float(r[3]) if len(r) == 4 else None
        except ValueError:
            malformed += 1
            continue
        if not user or not item:
            malformed += 1
            continue
        if fmt.min_rating is not None and rating is not None and rating < fmt.min_rating:
            below_threshold += 1
            continue
        parsed.append((user, item, ts_val))
    if malformed > MAX_MALFORMED_FRACTION * len(raw):
        raise DataError(f"{malformed} of {len(raw)} interaction rows malformed")
    if not parsed:
        raise DataError("no interactions")

    seen = set()
    unique = []
    for row in parsed:
        if row not in seen:
            seen.add(row)
            unique.append(row)
    duplicates = len(parsed) - len(unique)
    unique.sort(key=lambda r: r[2])  # stable

    tag_raw = _read_rows(Path(item_tags_path), fmt)
    tag_pairs = []
    tag_malformed = 0
    for r in tag_raw:
        if len(r) != 2 or not r[0].strip():
            tag_malformed += 1
            continue
        tag_pairs.append((r[0].strip(), r[1]))
    kept_pairs, tag_report = clean_item_tags(tag_pairs, fmt.min_tag_items)

    users = sorted({u for u, _, _ in unique})
    items = sorted({i for _, i, _ in unique} | {i for i, _ in kept_pairs})
    tags = sorted({t for _, t in kept_pairs})
    uid = {u: n for n, u in enumerate(users)}
    iid = {i: n for n, i in enumerate(items)}
    tid = {t: n for n, t in enumerate(tags)}
    rows = np.array([(uid[u], iid[i], ts) for u, i, ts in unique], dtype=np.int64).reshape(-1, 3)
    pairs = sorted((iid[i], tid[t]) for i, t in kept_pairs)

    density = len(rows) / (len(users) * len(items)) if users and items else 0.0
    report = {
        "rows_read": len(raw),
        "malformed": malformed,
        "below_rating_threshold": below_threshold,
        "duplicates_dropped": duplicates,
        "interactions": int(len(rows)),
        "users": len(users),
        "items": len(items),
        "tags": len(tags),
        "density_pct": 100.0 * density,
        "item_tag_rows_malformed": tag_malformed,
        "tag_cleaning": tag_report,
    }
    _log.info("ingested %d interactions (%d users, %d items, %d tags)",
              len(rows), len(users), len(items), len(tags))
    return InteractionLog(users, items, tags, rows, pairs, report)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or abs(self.train + self.val + self.test - 1) > 1e-9:
            raise ValueError("split fractions must be nonnegative and sum to 1")


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    report: dict = field(default_factory=dict)

    def all_items_by_user(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for part in (self.train, self.val, self.test):
            for u, i, _ in part.tolist():
                out.setdefault(u, set()).add(i)
        return out

    def train_items_by_user(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for u, i, _ in self.train.tolist():
            out.setdefault(u, set()).add(i)
        return out


def chronological_split(log: InteractionLog, spec: SplitSpec = SplitSpec()) -> Splits:
    """Global timestamp cut of the sorted log into train/val/test row ranges.

    Val/test rows of users absent from train are dropped and counted.
    """
    rows = log.rows
    n = len(rows)
    a = math.floor(n * spec.train + 1e-9)
    b = math.floor(n * (spec.train + spec.val) + 1e-9)
    train, val, test = rows[:a], rows[a:b], rows[b:]
    train_users = set(train[:, 0].tolist())
    keep_val = np.array([u in train_users for u in val[:, 0].tolist()], dtype=bool)
    keep_test = np.array([u in train_users for u in test[:, 0].tolist()], dtype=bool)
    report = {
        "ranges": {"train": [0, a], "val": [a, b], "test": [b, n]},
        "cold_dropped": {"val": int((~keep_val).sum()), "test": int((~keep_test).sum())},
        "fractions": [spec.train, spec.val, spec.test],
    }
    return Splits(train, val[keep_val] if len(val) else val,
                  test[keep_test] if len(test) else test, report)


@dataclass
class EvalInstance:
    user: int
    positive: int
    negatives: list[int]
    short: bool = False

    @property
    def candidates(self) -> list[int]:
        return [self.positive] + self.negatives


def build_eval_instances(split_rows: np.ndarray, interacted: dict[int, set[int]], n_items: int,
                         n_neg: int = 100, seed: int = 0) -> list[EvalInstance]:
    """One instance per held-out interaction with ``n_neg`` sampled negatives.

    Negatives never include an item the user interacted with in any split.
    Each user draws from its own stream seeded by ``(seed, user)``.
    """
    if len(split_rows) == 0:
        raise DataError("evaluation split is empty")
    streams: dict[int, np.random.Generator] = {}
    out = []
    for u, i, _ in split_rows.tolist():
        rng = streams.get(u)
        if rng is None:
            rng = streams[u] = np.random.default_rng([seed, u])
        seen = interacted.get(u, set()) | {i}
        eligible = np.array([j for j in range(n_items) if j not in seen], dtype=np.int64)
        if len(eligible) <= n_neg:
            negs = eligible.tolist()
            short = len(eligible) < n_neg
        else:
            negs = sorted(rng.choice(eligible, size=n_neg, replace=False).tolist())
            short = False
        out.append(EvalInstance(u, i, negs, short))
    return out


# --- synthetic hierarchy ---------------------------------------------------

@dataclass
class SynthDataset:
    interactions: list[tuple[str, str, int]]
    item_tags: list[tuple[str, str]]
    user_subtree: dict[str, str]
    levels: dict[str, int]
    parent: dict[str, str | None]

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ip, tp = out / "interactions.tsv", out / "item_tags.tsv"
        ip.write_text("".join(f"{u}\t{i}\t{t}\n" for u, i, t in self.interactions), encoding="utf-8")
        tp.write_text("".join(f"{i}\t{t}\n" for i, t in self.item_tags), encoding="utf-8")
        return ip, tp


def tag_tree(n_tags: int, depth: int) -> tuple[list[str], dict[str, str | None], dict[str, int]]:
    """Balanced tag tree with ``depth`` levels below an implicit root.

    The branching factor is the smallest that yields at least ``n_tags`` nodes;
    nodes are created breadth-first and the last level is truncated to fit.
    """
    if depth < 2:
        raise ValueError("depth must be >= 2")
    branching = 2
    while sum(branching ** lvl for lvl in range(1, depth + 1)) < n_tags:
        branching += 1
    names: list[str] = []
    parent: dict[str, str | None] = {}
    level: dict[str, int] = {}
    frontier: list[str | None] = [None]
    for lvl in range(1, depth + 1):
        nxt = []
        for p in frontier:
            for _ in range(branching):
                if len(names) == n_tags:
                    break
                name = f"tag_l{lvl}_{len(nxt):03d}"
                names.append(name)
                parent[name] = p
                level[name] = lvl
                nxt.append(name)
        frontier = nxt
    return names, parent, level


def synth_hierarchy(n_users: int, n_items: int, n_tags: int, depth: int, noise: float,
                    seed: int, interactions_per_user: int = 20) -> SynthDataset:
    """Generate users with a preferred top-level subtree of a tag hierarchy.

    Items attach to one leaf tag and carry every tag on the leaf's ancestor
    chain. With probability ``1 - noise`` a user's interaction is drawn from its
    subtree, otherwise uniformly from the catalog.
    """
    rng = np.random.default_rng(seed)
    names, parent, level = tag_tree(n_tags, depth)
    has_child = {p for p in parent.values() if p is not None}
    leaves = [t for t in names if t not in has_child]
    roots = [t for t in names if level[t] == 1]

    def chain(t):
        out = []
        while t is not None:
            out.append(t)
            t = parent[t]
        return out

    item_names = [f"item_{j:05d}" for j in range(n_items)]
    # every leaf gets items before any leaf gets a second round
    leaf_of = [leaves[j % len(leaves)] for j in rng.permutation(n_items)]
    item_tags = [(item_names[j], t) for j in range(n_items) for t in sorted(chain(leaf_of[j]))]
    root_of_item = [chain(leaf_of[j])[-1] for j in range(n_items)]
    by_root = {r: [j for j in range(n_items) if root_of_item[j] == r] for r in roots}

    interactions = []
    user_subtree = {}
    for u in range(n_users):
        uname = f"user_{u:05d}"
        root = roots[u % len(roots)]
        user_subtree[uname] = root
        pool = by_root[root]
        for _ in range(interactions_per_user):
            if rng.random() < noise or not pool:
                j = int(rng.integers(n_items))
            else:
                j = pool[int(rng.integers(len(pool)))]
            interactions.append((uname, item_names[j], int(rng.integers(0, 10**9))))
    return SynthDataset(interactions, item_tags, user_subtree, level, parent)


def file_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def json_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
