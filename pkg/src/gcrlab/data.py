"""Records for queries, users, items and slates, their line-delimited file
format, and packing into dense arrays for the networks."""
from __future__ import annotations

import contextlib
import gzip
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

LABELS = ("impression", "click", "atc", "pay")
LABEL_CODE = {name: i for i, name in enumerate(LABELS)}
ID_FIELDS = ("item_id", "category_id", "brand_id", "seller_id", "shop_id")
CHANNELS = ("pv_list", "click_list", "atc_list", "pay_list")
FORMAT = "gcrlab/records-v1"


class DatasetError(ValueError):
    pass


class RecordKindError(DatasetError, TypeError):
    pass


@dataclass(frozen=True)
class Schema:
    """Vocabulary sizes and slate geometry. Counts are configuration, not data."""

    n_items: int = 1000
    n_categories: int = 50
    n_brands: int = 100
    n_sellers: int = 200
    n_shops: int = 200
    n_price: int = 10
    n_queries: int = 100
    n_users: int = 500
    n_stats: int = 4
    user_pref_dim: int = 4
    max_session_len: int = 20
    n: int = 50
    k: int = 10

    def id_vocab(self) -> tuple[int, ...]:
        return (self.n_items, self.n_categories, self.n_brands, self.n_sellers, self.n_shops)


@dataclass(frozen=True)
class ItemFeatures:
    item_id: int
    category_id: int
    brand_id: int
    seller_id: int
    shop_id: int
    price_bucket: int
    stats: tuple[float, ...]
    position_hint: int | None = None

    def ids(self) -> tuple[int, ...]:
        return (self.item_id, self.category_id, self.brand_id, self.seller_id, self.shop_id)

    def same_item(self, other: "ItemFeatures") -> bool:
        return self.ids() == other.ids() and self.price_bucket == other.price_bucket \
            and self.stats == other.stats

    def validate(self, schema: Schema) -> None:
        for value, size, name in zip(self.ids(), schema.id_vocab(), ID_FIELDS):
            if not 0 <= value < size:
                raise DatasetError(f"{name}={value} outside vocabulary of size {size}")
        if not 1 <= self.price_bucket <= schema.n_price:
            raise DatasetError(f"price_bucket={self.price_bucket} outside 1..{schema.n_price}")
        if not all(math.isfinite(s) for s in self.stats):
            raise DatasetError("non-finite item stats")


@dataclass(frozen=True)
class SessionBehavior:
    pv_list: tuple[ItemFeatures, ...] = ()
    click_list: tuple[ItemFeatures, ...] = ()
    atc_list: tuple[ItemFeatures, ...] = ()
    pay_list: tuple[ItemFeatures, ...] = ()

    def channels(self) -> tuple[tuple[ItemFeatures, ...], ...]:
        return (self.pv_list, self.click_list, self.atc_list, self.pay_list)


@dataclass(frozen=True)
class QueryContext:
    query_id: int
    user_id: int
    user_pref: tuple[float, ...]
    session: SessionBehavior = field(default_factory=SessionBehavior)


@dataclass(frozen=True)
class CandidateSet:
    """n items sorted by LTR score, descending."""

    context: QueryContext
    items: tuple[ItemFeatures, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.items) != len(self.scores):
            raise DatasetError("one LTR score per candidate required")

    @property
    def n(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class SlateSample:
    """k impressed items with one interaction label each.

    ``candidate_ref``/``slate_indices`` optionally link the slate back to the
    candidate set it was cut from (needed by the n-input baseline and by the
    logged-reward trainer).
    """

    context: QueryContext
    items: tuple[ItemFeatures, ...]
    labels: tuple[str, ...]
    candidate_ref: int | None = None
    slate_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.items) != len(self.labels):
            raise DatasetError("one label per slate item required")
        bad = [lab for lab in self.labels if lab not in LABEL_CODE]
        if bad:
            raise DatasetError(f"unknown labels {bad}")


def binary_labels(sample: SlateSample) -> list[int]:
    """1 for add-to-cart or purchase, 0 otherwise."""
    return [1 if lab in ("atc", "pay") else 0 for lab in sample.labels]


def is_positive(sample: SlateSample) -> bool:
    return any(binary_labels(sample))


def reweight_negatives(samples: Sequence[SlateSample], target_ratio: float,
                       seed: int = 0) -> list[SlateSample]:
    """Subsample negative slates until positives/negatives is about ``target_ratio``.

    Positives are always kept and the original order is preserved.
    """
    if not 0 < target_ratio <= 1:
        raise ValueError("target_ratio must be in (0, 1]")
    pos = [i for i, s in enumerate(samples) if is_positive(s)]
    if not pos:
        raise DatasetError("no positive samples to reweight against")
    neg = [i for i, s in enumerate(samples) if not is_positive(s)]
    keep_neg = int(math.ceil(len(pos) / target_ratio))
    if keep_neg >= len(neg):
        return list(samples)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(np.array(neg), size=keep_neg, replace=False).tolist())
    chosen.update(pos)
    return [s for i, s in enumerate(samples) if i in chosen]


# serialization -------------------------------------------------------------

def _item_to_dict(item: ItemFeatures) -> dict:
    d = asdict(item)
    d["stats"] = list(item.stats)
    return d


def _item_from_dict(d: dict) -> ItemFeatures:
    return ItemFeatures(
        item_id=int(d["item_id"]), category_id=int(d["category_id"]),
        brand_id=int(d["brand_id"]), seller_id=int(d["seller_id"]),
        shop_id=int(d["shop_id"]), price_bucket=int(d["price_bucket"]),
        stats=tuple(float(s) for s in d["stats"]),
        position_hint=None if d.get("position_hint") is None else int(d["position_hint"]))


def _context_to_dict(ctx: QueryContext) -> dict:
    return {
        "query_id": ctx.query_id, "user_id": ctx.user_id, "user_pref": list(ctx.user_pref),
        "session": {ch: [_item_to_dict(it) for it in getattr(ctx.session, ch)] for ch in CHANNELS},
    }


def _context_from_dict(d: dict) -> QueryContext:
    session = SessionBehavior(**{ch: tuple(_item_from_dict(x) for x in d["session"][ch])
                                 for ch in CHANNELS})
    return QueryContext(query_id=int(d["query_id"]), user_id=int(d["user_id"]),
                        user_pref=tuple(float(x) for x in d["user_pref"]), session=session)


def record_to_dict(rec: SlateSample | CandidateSet) -> dict:
    if isinstance(rec, SlateSample):
        return {
            "kind": "slate", "context": _context_to_dict(rec.context),
            "items": [_item_to_dict(it) for it in rec.items], "labels": list(rec.labels),
            "candidate_ref": rec.candidate_ref,
            "slate_indices": None if rec.slate_indices is None else list(rec.slate_indices),
        }
    if isinstance(rec, CandidateSet):
        return {
            "kind": "candidates", "context": _context_to_dict(rec.context),
            "items": [_item_to_dict(it) for it in rec.items], "scores": list(rec.scores),
        }
    raise TypeError(f"cannot serialize {type(rec).__name__}")


def record_from_dict(d: dict) -> SlateSample | CandidateSet:
    kind = d.get("kind")
    if kind not in ("slate", "candidates"):
        raise RecordKindError(f"unknown record kind {kind!r}")
    ctx = _context_from_dict(d["context"])
    items = tuple(_item_from_dict(x) for x in d["items"])
    if kind == "slate":
        idx = d.get("slate_indices")
        return SlateSample(context=ctx, items=items, labels=tuple(d["labels"]),
                           candidate_ref=d.get("candidate_ref"),
                           slate_indices=None if idx is None else tuple(int(i) for i in idx))
    if kind == "candidates":
        return CandidateSet(context=ctx, items=items, scores=tuple(float(s) for s in d["scores"]))
    raise RecordKindError(f"unknown record kind {kind!r}")




@contextlib.contextmanager
def _open(path: Path, mode: str):
    if path.suffix != ".gz":
        with open(path, mode, encoding="utf-8") as fh:
            yield fh
        return
    if mode.startswith("r"):
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            yield fh
        return
    # fixed mtime and empty name keep gzip output byte-identical across runs
    with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz, \
            io.TextIOWrapper(gz, encoding="utf-8") as fh:
        yield fh


def write_dataset(path, records: Iterable[SlateSample | CandidateSet],
                  header: dict | None = None) -> int:
    """Write one JSON object per line; an optional header line comes first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = list(records)
    count = 0
    with _open(path, "wt") as fh:
        if header is not None:
            head = {"kind": "header", "format": FORMAT, **header, "count": len(records)}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), sort_keys=True) + "\n")
            count += 1
    return count


class DatasetReader:
    """Streams records from a dataset file in order.

    ``header`` is filled in once the first line has been read; ``count`` is
    the number of records yielded so far.
    """

    def __init__(self, path, expect: str | None = None):
        self.path = Path(path)
        self.expect = expect
        self.header: dict | None = None
        self.count = 0

    def __iter__(self) -> Iterator[SlateSample | CandidateSet]:
        with _open(self.path, "rt") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{self.path}: line {lineno}: malformed record ({exc.msg})") from None
                if d.get("kind") == "header":
                    if lineno != 1:
                        raise DatasetError(f"{self.path}: line {lineno}: header after records")
                    self.header = d
                    continue
                if self.expect is not None and d.get("kind") != self.expect:
                    raise RecordKindError(
                        f"{self.path}: line {lineno}: expected {self.expect!r} record, got {d.get('kind')!r}")
                try:
                    rec = record_from_dict(d)
                except RecordKindError as exc:
                    raise RecordKindError(f"{self.path}: line {lineno}: {exc}") from None
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{self.path}: line {lineno}: bad record ({exc!r})") from None
                self.count += 1
                yield rec


def load_dataset(path, expect: str | None = None) -> DatasetReader:
    return DatasetReader(path, expect)


def read_all(path, expect: str | None = None) -> tuple[list, dict | None]:
    reader = DatasetReader(path, expect)
    records = list(reader)
    return records, reader.header


# packing -----------------------------------------------------------------

def item_arrays(items: Sequence[ItemFeatures], schema: Schema) -> tuple[np.ndarray, ...]:
    """(ids [L,5] int, price [L] float, stats [L,S] float, rank [L] float).

    rank is position_hint / n, or 0 when the item carries no LTR rank.
    """
    ids = np.array([it.ids() for it in items], dtype=np.int64).reshape(len(items), 5)
    price = np.array([it.price_bucket for it in items], dtype=np.float64)
    stats = np.array([it.stats for it in items], dtype=np.float64).reshape(len(items), schema.n_stats)
    rank = np.array([0.0 if it.position_hint is None else it.position_hint / schema.n for it in items])
    return ids, price, stats, rank


@dataclass
class ItemBlock:
    """Dense per-item arrays with leading batch axes."""

    ids: np.ndarray      # [..., 5] int64
    price: np.ndarray    # [...] float64, bucket value 1..P
    stats: np.ndarray    # [..., S]
    rank: np.ndarray     # [...] float, LTR rank / n (0 if unknown)

    def take(self, idx) -> "ItemBlock":
        return ItemBlock(self.ids[idx], self.price[idx], self.stats[idx], self.rank[idx])

    def gather(self, indices: np.ndarray) -> "ItemBlock":
        """Per-row gather along axis 1: ``indices`` is [B, t]."""
        rows = np.arange(indices.shape[0])[:, None]
        return ItemBlock(self.ids[rows, indices], self.price[rows, indices], self.stats[rows, indices],
                         self.rank[rows, indices])


@dataclass
class ContextBlock:
    query: np.ndarray        # [B] int
    user: np.ndarray         # [B] int
    user_pref: np.ndarray    # [B, U]
    session: ItemBlock       # [B, 4, L, ...]
    session_mask: np.ndarray  # [B, 4, L] bool

    def take(self, idx) -> "ContextBlock":
        return ContextBlock(self.query[idx], self.user[idx], self.user_pref[idx],
                            self.session.take(idx), self.session_mask[idx])


def pack_contexts(contexts: Sequence[QueryContext], schema: Schema) -> ContextBlock:
    B, L, S = len(contexts), schema.max_session_len, schema.n_stats
    ids = np.zeros((B, 4, L, 5), dtype=np.int64)
    price = np.ones((B, 4, L))
    stats = np.zeros((B, 4, L, S))
    rank = np.zeros((B, 4, L))
    mask = np.zeros((B, 4, L), dtype=bool)
    for b, ctx in enumerate(contexts):
        for c, channel in enumerate(ctx.session.channels()):
            channel = channel[-L:]
            if not channel:
                continue
            i, p, s, r = item_arrays(channel, schema)
            m = len(channel)
            ids[b, c, :m], price[b, c, :m], stats[b, c, :m], rank[b, c, :m], mask[b, c, :m] = i, p, s, r, True
    return ContextBlock(
        query=np.array([c.query_id for c in contexts], dtype=np.int64),
        user=np.array([c.user_id for c in contexts], dtype=np.int64),
        user_pref=np.array([c.user_pref for c in contexts], dtype=np.float64).reshape(B, schema.user_pref_dim),
        session=ItemBlock(ids, price, stats, rank), session_mask=mask)


def pack_items(groups: Sequence[Sequence[ItemFeatures]], schema: Schema) -> ItemBlock:
    arrs = [item_arrays(g, schema) for g in groups]
    return ItemBlock(*(np.stack([a[j] for a in arrs]) for j in range(4)))


@dataclass
class SlateBatch:
    context: ContextBlock
    items: ItemBlock           # [B, k, ...]
    labels: np.ndarray         # [B, k] label codes

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "SlateBatch":
        return SlateBatch(self.context.take(idx), self.items.take(idx), self.labels[idx])

    def binary(self) -> np.ndarray:
        return (self.labels >= LABEL_CODE["atc"]).astype(np.float64)


@dataclass
class CandidateBatch:
    context: ContextBlock
    items: ItemBlock           # [B, n, ...]
    scores: np.ndarray         # [B, n] LTR scores

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> "CandidateBatch":
        return CandidateBatch(self.context.take(idx), self.items.take(idx), self.scores[idx])


def pack_slates(samples: Sequence[SlateSample], schema: Schema) -> SlateBatch:
    return SlateBatch(
        context=pack_contexts([s.context for s in samples], schema),
        items=pack_items([s.items for s in samples], schema),
        labels=np.array([[LABEL_CODE[x] for x in s.labels] for s in samples], dtype=np.int64)
        .reshape(len(samples), schema.k))


def pack_candidates(sets: Sequence[CandidateSet], schema: Schema) -> CandidateBatch:
    return CandidateBatch(
        context=pack_contexts([c.context for c in sets], schema),
        items=pack_items([c.items for c in sets], schema),
        scores=np.array([c.scores for c in sets], dtype=np.float64).reshape(len(sets), -1))
