"""Interaction-log ingestion, filtering, chronological splitting, batching,
and the synthetic corpus generator.

Pipeline order matters: parse the TSV, keep positive feedback (rating
strictly above 3), iterate the min-5-actions filter to a fixed point,
re-index users/items densely (item 0 is reserved for padding), then split
each user's chronological sequence into train / valid (second most recent)
/ test (most recent).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DataFormatError, SamplingError

log = logging.getLogger(__name__)

PAD_ID = 0
PAD_TOKEN = "[pad]"
MIN_ACTIONS = 5
POSITIVE_THRESHOLD = 3.0  # keep ratings strictly above this


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: float
    timestamp: int


@dataclass
class Batch:
    """Left-padded id grid with mask, one next-item label per row."""

    ids: np.ndarray          # (B, T) int64, pad id 0
    mask: np.ndarray         # (B, T) float32, 1 on real positions
    labels: np.ndarray       # (B,) int64
    user_indices: np.ndarray  # (B,) int64
    lengths: np.ndarray | None = None  # (B,) untruncated history length


@dataclass
class SplitDataset:
    """Per-user train/valid/test views over dense indices.

    Item indices run 1..n_items; index 0 is padding and never appears in a
    sequence. ``item_ids[0]`` holds the pad sentinel so ``item_ids[i]`` maps
    any dense index back to its original string id.
    """

    n_items: int
    user_ids: list[str]
    item_ids: list[str]
    train: list[list[int]]
    valid: list[int]
    test: list[int]
    _interacted: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def interacted(self, user: int) -> np.ndarray:
        """Sorted dense indices of every item the user touched in any view."""
        if not self._interacted:
            self._interacted = [
                np.unique(np.asarray(t + [v, w], dtype=np.int64))
                for t, v, w in zip(self.train, self.valid, self.test)
            ]
        return self._interacted[user]

    def stats(self) -> dict:
        n_inter = sum(len(t) + 2 for t in self.train)
        density = n_inter / (self.n_users * self.n_items) if self.n_users else 0.0
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n_inter,
            "density": density,
        }


# -- loading ----------------------------------------------------------------


def _parse_row(fields: list[str]) -> InteractionRecord:
    if len(fields) != 4:
        raise ValueError("expected 4 tab-separated fields")
    user, item, rating, ts = fields
    rec = InteractionRecord(user, item, float(rating), int(ts))
    if rec.timestamp < 0:
        raise ValueError("negative timestamp")
    return rec


def load_interactions(path: str | Path, max_malformed_frac: float = 0.01) -> list[InteractionRecord]:
    """Parse a `user \\t item \\t rating \\t timestamp` TSV.

    A header line is auto-detected (its rating/timestamp fields do not
    parse). Malformed rows are counted and reported; more than
    ``max_malformed_frac`` of them is a format error.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read interaction log {path}: {exc}") from exc

    records: list[InteractionRecord] = []
    malformed = 0
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(_parse_row(line.split("\t")))
        except (ValueError, IndexError):
            if i == 0:
                log.info("treating first line of %s as a header", path)
            else:
                malformed += 1

    total = len(records) + malformed
    if malformed:
        log.warning("%d malformed rows in %s (%d parsed)", malformed, path, len(records))
        if malformed > max_malformed_frac * total:
            raise DataFormatError(
                f"{malformed}/{total} malformed rows in {path} exceeds "
                f"{max_malformed_frac:.0%} tolerance"
            )
    if not records:
        log.warning("no interaction records parsed from %s", path)
    return records


def keep_positive(records: list[InteractionRecord]) -> list[InteractionRecord]:
    """Keep interactions whose rating is strictly above the positive threshold."""
    return [r for r in records if r.rating > POSITIVE_THRESHOLD]


def filter_min_actions(
    records: list[InteractionRecord], min_actions: int = MIN_ACTIONS
) -> list[InteractionRecord]:
    """Iteratively drop users and items with fewer than ``min_actions``
    interactions until the counts reach a fixed point."""
    current = records
    sweeps = 0
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for r in current:
            user_counts[r.user_id] = user_counts.get(r.user_id, 0) + 1
            item_counts[r.item_id] = item_counts.get(r.item_id, 0) + 1
        kept = [
            r
            for r in current
            if user_counts[r.user_id] >= min_actions and item_counts[r.item_id] >= min_actions
        ]
        sweeps += 1
        if len(kept) == len(current):
            break
        current = kept
    log.info("min-action filter converged after %d sweep(s), %d records kept", sweeps, len(current))
    return current


def build_dataset(records: list[InteractionRecord], min_actions: int = MIN_ACTIONS) -> SplitDataset:
    """Positive filter, fixed-point density filter, dense re-indexing, and
    the leave-one-out chronological split, in one pass."""
    positive = keep_positive(records)
    filtered = filter_min_actions(positive, min_actions=min_actions)
    sequences = _group_sequences(filtered)
    return chronological_split(sequences)


def _group_sequences(records: list[InteractionRecord]) -> dict[str, list[str]]:
    """Per-user item-id lists in chronological order.

    Timestamp ties keep the input file order (stable sort), which pins the
    split deterministically.
    """
    per_user: dict[str, list[tuple[int, str]]] = {}
    for r in records:
        per_user.setdefault(r.user_id, []).append((r.timestamp, r.item_id))
    out: dict[str, list[str]] = {}
    for user, events in per_user.items():
        events.sort(key=lambda e: e[0])
        out[user] = [item for _, item in events]
    return out


def chronological_split(sequences: dict[str, list[str]]) -> SplitDataset:
    """Most recent interaction -> test, second most recent -> valid, the
    rest -> train. Users with fewer than 3 interactions are excluded."""
    usable = {}
    for user, items in sorted(sequences.items()):
        if len(items) < 3:
            log.warning("user %s has %d < 3 interactions; excluded from split", user, len(items))
            continue
        usable[user] = items

    item_vocab = sorted({item for items in usable.values() for item in items})
    item_index = {item: i + 1 for i, item in enumerate(item_vocab)}

    user_ids, train, valid, test = [], [], [], []
    for user, items in usable.items():
        dense = [item_index[i] for i in items]
        user_ids.append(user)
        train.append(dense[:-2])
        valid.append(dense[-2])
        test.append(dense[-1])

    return SplitDataset(
        n_items=len(item_vocab),
        user_ids=user_ids,
        item_ids=[PAD_TOKEN] + item_vocab,
        train=train,
        valid=valid,
        test=test,
    )


# -- batching ----------------------------------------------------------------


def build_sequence(history: list[int], seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``seq_len`` most recent items, left-padded with id 0."""
    if seq_len < 1:
        raise DataError(f"sequence length must be >= 1, got {seq_len}")
    if not history:
        raise DataError("cannot build an all-pad row from an empty history")
    kept = history[-seq_len:]
    ids = np.zeros(seq_len, dtype=np.int64)
    mask = np.zeros(seq_len, dtype=np.float32)
    ids[seq_len - len(kept):] = kept
    mask[seq_len - len(kept):] = 1.0
    return ids, mask


def _eval_rows(split: SplitDataset, which: str) -> list[tuple[int, list[int], int]]:
    rows = []
    for u in range(split.n_users):
        if which == "valid":
            history, label = split.train[u], split.valid[u]
        else:
            history, label = split.train[u] + [split.valid[u]], split.test[u]
        if history:
            rows.append((u, history, label))
    return rows


def train_cuts(split: SplitDataset, user: int) -> range:
    """Valid prefix cut points for a user's train view: history=train[:c],
    label=train[c]."""
    return range(1, len(split.train[user]))


def make_batches(
    split: SplitDataset,
    seq_len: int,
    batch_size: int,
    shuffle_seed: int | None = None,
    which: str = "train",
):
    """Yield Batch objects for one pass over the requested view: one row per
    user, next-item labels, final partial batch emitted.

    Train rows predict a train item from the items before it. With a
    ``shuffle_seed`` the prefix cut is drawn per user per pass (so
    successive epochs cover every position of the train view) and the row
    order is shuffled; both draws are functions of the seed alone. Without
    a seed each row deterministically uses the full train prefix. Valid
    and test rows predict the held-out item from all preceding history.
    """
    if which == "train":
        rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
        rows = []
        for u in range(split.n_users):
            t = split.train[u]
            if len(t) < 2:
                continue
            cut = int(rng.integers(1, len(t))) if rng is not None else len(t) - 1
            rows.append((u, t[:cut], t[cut]))
    elif which in ("valid", "test"):
        rng = None
        rows = _eval_rows(split, which)
    else:
        raise DataError(f"unknown batch view {which!r}")
    if not rows:
        raise DataError(f"no usable rows in the {which} view")

    order = np.arange(len(rows))
    if rng is not None:
        rng.shuffle(order)

    for start in range(0, len(rows), batch_size):
        chunk = [rows[i] for i in order[start:start + batch_size]]
        ids = np.zeros((len(chunk), seq_len), dtype=np.int64)
        mask = np.zeros((len(chunk), seq_len), dtype=np.float32)
        labels = np.zeros(len(chunk), dtype=np.int64)
        users = np.zeros(len(chunk), dtype=np.int64)
        lengths = np.zeros(len(chunk), dtype=np.int64)
        for j, (u, history, label) in enumerate(chunk):
            ids[j], mask[j] = build_sequence(history, seq_len)
            labels[j] = label
            users[j] = u
            lengths[j] = len(history)
        yield Batch(ids=ids, mask=mask, labels=labels, user_indices=users,
                    lengths=lengths)


def sample_negatives(split: SplitDataset, user: int, positive: int, k: int = 999,
                     seed: int = 0) -> np.ndarray:
    """Candidate list: the positive first, then ``k`` distinct sampled items
    the user never interacted with. Deterministic in (seed, user)."""
    interacted = split.interacted(user)
    pool = np.setdiff1d(np.arange(1, split.n_items + 1, dtype=np.int64), interacted)
    if pool.size < k:
        raise SamplingError(
            f"user {user} has only {pool.size} non-interacted items; need {k}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, user]))
    negatives = rng.choice(pool, size=k, replace=False)
    return np.concatenate(([positive], negatives))


# -- synthetic corpus ---------------------------------------------------------


def generate_synthetic(
    n_users: int = 2000,
    n_items: int = 500,
    seed: int = 7,
    min_len: int = 8,
    max_len: int = 30,
    n_factors: int = 8,
    sharpness: float = 6.0,
    drift: float = 0.55,
    noise_frac: float = 0.08,
) -> list[InteractionRecord]:
    """Latent-factor corpus with sequential structure.

    Each user walks a preference state: the next item is drawn from a
    softmax over item-factor affinities, and the state drifts toward the
    chosen item's factors. Recent history is therefore predictive of the
    next item. A ``noise_frac`` share of extra low-rating events is mixed
    in to exercise the positive-feedback filter.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    factors = rng.normal(size=(n_items, n_factors))
    factors /= np.linalg.norm(factors, axis=1, keepdims=True)
    popularity = rng.normal(scale=0.4, size=n_items)

    records: list[InteractionRecord] = []
    for u in range(n_users):
        # without-replacement sampling cannot exceed the catalog
        length = min(int(rng.integers(min_len, max_len + 1)), n_items)
        state = rng.normal(size=n_factors)
        state /= np.linalg.norm(state)
        chosen = np.zeros(n_items, dtype=bool)
        ts = int(rng.integers(1_000_000, 2_000_000))
        for t in range(length):
            logits = sharpness * (factors @ state) + popularity
            logits[chosen] = -np.inf
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            item = int(rng.choice(n_items, p=probs))
            chosen[item] = True
            rating = 4.0 + float(rng.integers(0, 2))
            records.append(InteractionRecord(f"u{u:05d}", f"i{item:05d}", rating, ts))
            ts += int(rng.integers(3600, 86400))
            state = (1.0 - drift) * state + drift * factors[item]
            state += rng.normal(scale=0.05, size=n_factors)
            state /= np.linalg.norm(state)
        for _ in range(int(round(noise_frac * length))):
            item = int(rng.integers(0, n_items))
            records.append(
                InteractionRecord(f"u{u:05d}", f"i{item:05d}", float(rng.integers(1, 4)), ts)
            )
            ts += int(rng.integers(3600, 86400))
    return records


def write_interactions_tsv(records: list[InteractionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\trating\ttimestamp\n")
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.rating:g}\t{r.timestamp}\n")


# -- persisted artifacts -------------------------------------------------------


def save_split(split: SplitDataset, out_dir: str | Path) -> None:
    """Write the split manifest plus the two string<->index map TSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = split.stats()
    with open(out / "manifest.tsv", "w", encoding="utf-8") as fh:
        fh.write("# slmrec split manifest\n")
        fh.write(
            "# users={users} items={items} interactions={interactions} "
            "density={density:.6f}\n".format(**stats)
        )
        fh.write("# columns: user_index\ttrain\tvalid\ttest\n")
        for u in range(split.n_users):
            train = ",".join(str(i) for i in split.train[u])
            fh.write(f"{u}\t{train}\t{split.valid[u]}\t{split.test[u]}\n")
    with open(out / "users.tsv", "w", encoding="utf-8") as fh:
        for idx, uid in enumerate(split.user_ids):
            fh.write(f"{uid}\t{idx}\n")
    with open(out / "items.tsv", "w", encoding="utf-8") as fh:
        for idx, iid in enumerate(split.item_ids):
            if idx == 0:
                continue
            fh.write(f"{iid}\t{idx}\n")


def load_split(in_dir: str | Path) -> SplitDataset:
    src = Path(in_dir)
    manifest = src / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no split manifest at {manifest}")

    user_ids = [line.split("\t")[0] for line in _read_lines(src / "users.tsv")]
    item_rows = [line.split("\t") for line in _read_lines(src / "items.tsv")]
    item_ids = [PAD_TOKEN] + [iid for iid, _ in sorted(item_rows, key=lambda r: int(r[1]))]

    train: list[list[int]] = []
    valid: list[int] = []
    test: list[int] = []
    for line in _read_lines(manifest):
        if line.startswith("#"):
            continue
        _, train_s, valid_s, test_s = line.split("\t")
        train.append([int(x) for x in train_s.split(",")] if train_s else [])
        valid.append(int(valid_s))
        test.append(int(test_s))
    if len(train) != len(user_ids):
        raise DataFormatError(
            f"manifest rows ({len(train)}) disagree with user map ({len(user_ids)})"
        )
    return SplitDataset(
        n_items=len(item_ids) - 1,
        user_ids=user_ids,
        item_ids=item_ids,
        train=train,
        valid=valid,
        test=test,
    )


def _read_lines(path: Path) -> list[str]:
    try:
        return [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
