"""Session-log schema, vocabularies, instance assembly, and synthetic logs.

Logs are JSON Lines, one impression record per line. Each record is
self-contained: it carries the user's merged (organic + sponsored)
behavior history up to the impression, the query, the ad, and the click
label. Vocabularies map string tokens to dense ids per id space with
frequency truncation; id 0 is reserved for pad/out-of-vocabulary.

The synthetic generator plants a recoverable structure: items belong to
latent categories, a user session holds one or two interest categories,
and clicks depend on whether the ad's category matches the category the
query was issued from. Query tokens are deliberately ambiguous between
two categories (and some negative ads are drawn from the confusable
category), so resolving the click signal requires attending to the
behaviors that match the query rather than pooling the whole history.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .model import (
    PAD_BEHAVIOR,
    AdItem,
    BehaviorItem,
    ImpressionInstance,
    QueryRequest,
    SPACES,
)


class EmptyCorpusError(ValueError):
    """Vocabulary construction was given no log records."""


class CoverageError(ValueError):
    """A requested split day has no log records."""


# ----------------------------------------------------------------------
# log schema


@dataclass
class BehaviorEvent:
    """One past browse/click event with the query that led to it."""

    timestamp: int
    item_id: str
    shop_id: str
    brand_id: str
    title_terms: list[str]
    query_terms: list[str]


@dataclass
class AdDescriptor:
    """An ad's raw features plus its bid keywords and per-click cost."""

    item_id: str
    shop_id: str
    brand_id: str
    title_terms: list[str]
    bid_keywords: list[str]
    cost: float


@dataclass
class LogRecord:
    """One ad impression with full request context and the click label."""

    user_id: str
    timestamp: int
    query_terms: list[str]
    behavior_items: list[BehaviorEvent]
    ad: AdDescriptor
    clicked: int
    day: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LogRecord":
        return cls(
            user_id=payload["user_id"],
            timestamp=int(payload["timestamp"]),
            query_terms=list(payload["query_terms"]),
            behavior_items=[BehaviorEvent(**b) for b in payload["behavior_items"]],
            ad=AdDescriptor(**payload["ad"]),
            clicked=int(payload["clicked"]),
            day=payload["day"],
        )


def write_jsonl(rows: Iterable, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            payload = row.to_dict() if hasattr(row, "to_dict") else row
            fh.write(json.dumps(payload, sort_keys=True))
            fh.write("\n")


def read_log_records(path: str | Path) -> list[LogRecord]:
    with open(path) as fh:
        return [LogRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_ads(ads: Iterable[AdDescriptor], path: str | Path) -> None:
    write_jsonl((asdict(a) for a in ads), path)


def read_ads(path: str | Path) -> list[AdDescriptor]:
    with open(path) as fh:
        return [AdDescriptor(**json.loads(line)) for line in fh if line.strip()]


# ----------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Per-space token-to-id maps; id 0 is reserved for pad/OOV."""

    def __init__(self, maps: Mapping[str, Mapping[str, int]]) -> None:
        self._maps = {space: dict(maps.get(space, {})) for space in SPACES}
        for space, mapping in self._maps.items():
            ids = sorted(mapping.values())
            if ids and (ids[0] < 1 or ids != list(range(1, len(ids) + 1))):
                raise ValueError(f"ids for space '{space}' are not dense from 1")

    @property
    def sizes(self) -> dict[str, int]:
        """Table sizes including the reserved pad row."""
        return {space: len(m) + 1 for space, m in self._maps.items()}

    def id_for(self, space: str, token: str) -> int:
        return self._maps[space].get(token, 0)

    def ids_for(self, space: str, tokens: Sequence[str]) -> tuple[int, ...]:
        mapping = self._maps[space]
        return tuple(mapping.get(t, 0) for t in tokens)

    def save_tsv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for space in SPACES:
                for token, idx in sorted(self._maps[space].items(), key=lambda kv: kv[1]):
                    fh.write(f"{token}\t{space}\t{idx}\n")

    @classmethod
    def load_tsv(cls, path: str | Path) -> "Vocabulary":
        maps: dict[str, dict[str, int]] = {space: {} for space in SPACES}
        with open(path) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                token, space, idx = line.split("\t")
                maps[space][token] = int(idx)
        return cls(maps)


def _space_counts(records: Sequence[LogRecord]) -> dict[str, Counter]:
    counts: dict[str, Counter] = {space: Counter() for space in SPACES}
    for rec in records:
        counts["term_id"].update(rec.query_terms)
        for ev in rec.behavior_items:
            counts["item_id"][ev.item_id] += 1
            counts["shop_id"][ev.shop_id] += 1
            counts["brand_id"][ev.brand_id] += 1
            counts["term_id"].update(ev.title_terms)
            counts["term_id"].update(ev.query_terms)
        counts["item_id"][rec.ad.item_id] += 1
        counts["shop_id"][rec.ad.shop_id] += 1
        counts["brand_id"][rec.ad.brand_id] += 1
        counts["term_id"].update(rec.ad.title_terms)
    return counts


def build_vocab(
    records: Sequence[LogRecord], top_k: int | Mapping[str, int]
) -> Vocabulary:
    """Keep the top-k most frequent tokens per space; ties break by token.

    Tokens cut by truncation (and anything unseen) map to id 0 later.
    """
    if not records:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    if isinstance(top_k, int):
        limits = {space: top_k for space in SPACES}
    else:
        limits = {space: int(top_k.get(space, 0)) for space in SPACES}
    if any(v < 1 for v in limits.values()):
        raise ValueError("top_k must be at least 1 for every space")
    counts = _space_counts(records)
    maps: dict[str, dict[str, int]] = {}
    for space in SPACES:
        ranked = sorted(counts[space].items(), key=lambda kv: (-kv[1], kv[0]))
        kept = ranked[: limits[space]]
        maps[space] = {token: i + 1 for i, (token, _) in enumerate(kept)}
    return Vocabulary(maps)


# ----------------------------------------------------------------------
# instance assembly


def ad_item_from_descriptor(ad: AdDescriptor, vocab: Vocabulary) -> AdItem:
    return AdItem(
        item_id=vocab.id_for("item_id", ad.item_id),
        shop_id=vocab.id_for("shop_id", ad.shop_id),
        brand_id=vocab.id_for("brand_id", ad.brand_id),
        title_term_ids=vocab.ids_for("term_id", ad.title_terms),
    )


def request_from_record(record: LogRecord, vocab: Vocabulary, m: int) -> QueryRequest:
    """Map a record to model inputs: latest m prior behaviors, left-padded.

    Behaviors at or after the impression timestamp are excluded so no
    instance can see the future.
    """
    prior = [ev for ev in record.behavior_items if ev.timestamp < record.timestamp]
    prior.sort(key=lambda ev: ev.timestamp)
    recent = prior[-m:]
    items = tuple(
        BehaviorItem(
            item_id=vocab.id_for("item_id", ev.item_id),
            shop_id=vocab.id_for("shop_id", ev.shop_id),
            brand_id=vocab.id_for("brand_id", ev.brand_id),
            title_term_ids=vocab.ids_for("term_id", ev.title_terms),
            query_term_ids=vocab.ids_for("term_id", ev.query_terms),
        )
        for ev in recent
    )
    behaviors = (PAD_BEHAVIOR,) * (m - len(items)) + items
    return QueryRequest(
        query_term_ids=vocab.ids_for("term_id", record.query_terms),
        profile_ids=(),
        behaviors=behaviors,
    )


def make_instances(
    records: Iterable[LogRecord], vocab: Vocabulary, m: int = 6
) -> Iterator[ImpressionInstance]:
    """Labeled training instances, one per impression record."""
    if m < 1:
        raise ValueError(f"behavior window m must be >= 1, got {m}")
    for record in records:
        yield ImpressionInstance(
            request=request_from_record(record, vocab, m),
            ad=ad_item_from_descriptor(record.ad, vocab),
            label=int(record.clicked),
        )


# ----------------------------------------------------------------------
# day-based splitting


@dataclass(frozen=True)
class DatasetSplit:
    """Three consecutive training days, the following test day, and the
    stable-hash validation fraction carved out of training."""

    train_days: tuple[str, ...]
    test_day: str
    validation_fraction: float = 0.05

    def __post_init__(self) -> None:
        if len(self.train_days) != 3:
            raise ValueError("train_days must name exactly 3 days")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.test_day <= max(self.train_days):
            raise ValueError("test day must come after every training day")


def _stable_fraction(user_id: str, timestamp: int) -> float:
    """Deterministic uniform draw from (user, timestamp), stable across runs."""
    digest = hashlib.md5(f"{user_id}|{timestamp}".encode()).hexdigest()
    return int(digest[:12], 16) / float(16**12)


def split_by_day(
    records: Sequence[LogRecord], split: DatasetSplit
) -> tuple[list[LogRecord], list[LogRecord], list[LogRecord]]:
    """Partition records into (train, validation, test) by day.

    Validation is sampled from the training days by a hash of
    (user_id, timestamp), so the partition is identical across runs.
    """
    present = {r.day for r in records}
    wanted = set(split.train_days) | {split.test_day}
    absent = sorted(wanted - present)
    if absent:
        raise CoverageError(f"no log records for days: {', '.join(absent)}")
    train: list[LogRecord] = []
    validation: list[LogRecord] = []
    test: list[LogRecord] = []
    train_days = set(split.train_days)
    for rec in records:
        if rec.day == split.test_day:
            test.append(rec)
        elif rec.day in train_days:
            if _stable_fraction(rec.user_id, rec.timestamp) < split.validation_fraction:
                validation.append(rec)
            else:
                train.append(rec)
    return train, validation, test


# ----------------------------------------------------------------------
# synthetic generator


@dataclass
class GeneratorConfig:
    """Knobs of the planted-structure log generator."""

    seed: int = 0
    n_users: int = 400
    n_items: int = 600
    n_categories: int = 8
    days: int = 4
    impressions_per_user_day: int = 12
    history_len: int = 10
    p_hi: float = 0.6
    p_lo: float = 0.05
    match_prob: float = 0.5
    confuser_prob: float = 0.35
    head_query_prob: float = 0.3
    current_interest_bias: float = 0.7
    terms_per_category: int = 25
    pair_terms: int = 8
    shops_per_category: int = 6
    brands_per_category: int = 4

    def __post_init__(self) -> None:
        if self.n_categories < 1:
            raise ValueError("need at least one category")
        if self.n_items < self.n_categories:
            raise ValueError("need at least one item per category")
        if not 0.0 <= self.p_lo <= self.p_hi <= 1.0:
            raise ValueError("need 0 <= p_lo <= p_hi <= 1")
        if self.days < 1 or self.n_users < 1 or self.impressions_per_user_day < 1:
            raise ValueError("users, days and impressions must be positive")


@dataclass
class PlantedOracle:
    """Ground-truth click model of the synthetic world.

    Knows each item's latent category and each logged request's intended
    category, so replayed impressions can be click-sampled consistently.
    """

    item_categories: dict[str, int]
    request_categories: dict[str, int]
    p_hi: float
    p_lo: float

    @staticmethod
    def request_key(user_id: str, timestamp: int) -> str:
        return f"{user_id}|{timestamp}"

    def click_prob(self, user_id: str, timestamp: int, ad_item_id: str) -> float:
        key = self.request_key(user_id, timestamp)
        if key not in self.request_categories:
            raise KeyError(f"unknown request {key}")
        if ad_item_id not in self.item_categories:
            raise KeyError(f"unknown ad item {ad_item_id}")
        matched = self.request_categories[key] == self.item_categories[ad_item_id]
        return self.p_hi if matched else self.p_lo

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": 1,
            "item_categories": self.item_categories,
            "request_categories": self.request_categories,
            "p_hi": self.p_hi,
            "p_lo": self.p_lo,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "PlantedOracle":
        payload = json.loads(Path(path).read_text())
        return cls(
            item_categories=payload["item_categories"],
            request_categories=payload["request_categories"],
            p_hi=float(payload["p_hi"]),
            p_lo=float(payload["p_lo"]),
        )


@dataclass
class _World:
    config: GeneratorConfig
    items: list[dict] = field(default_factory=list)
    items_by_category: list[list[int]] = field(default_factory=list)
    title_pools: list[list[str]] = field(default_factory=list)
    pair_pools: list[list[str]] = field(default_factory=list)


def _build_world(cfg: GeneratorConfig, rng: np.random.Generator) -> _World:
    world = _World(cfg)
    c_count = cfg.n_categories
    world.title_pools = [
        [f"t{c}_{i}" for i in range(cfg.terms_per_category)] for c in range(c_count)
    ]
    # pair pool p is shared between categories p and (p + 1) % C, which is
    # what makes tail queries ambiguous between two categories
    world.pair_pools = [
        [f"q{c}_{(c + 1) % c_count}_{i}" for i in range(cfg.pair_terms)]
        for c in range(c_count)
    ]
    world.items_by_category = [[] for _ in range(c_count)]
    for i in range(cfg.n_items):
        cat = i % c_count
        pool = world.title_pools[cat]
        n_title = int(rng.integers(2, 5))
        title = [pool[j] for j in rng.choice(len(pool), size=n_title, replace=False)]
        n_bid = int(rng.integers(1, 3))
        bid = [title[j] for j in rng.choice(len(title), size=n_bid, replace=False)]
        item = {
            "item_id": f"item{i}",
            "category": cat,
            "shop_id": f"shop{cat}_{int(rng.integers(cfg.shops_per_category))}",
            "brand_id": f"brand{cat}_{int(rng.integers(cfg.brands_per_category))}",
            "title_terms": title,
            "bid_keywords": bid,
            "cost": round(float(rng.uniform(0.5, 2.0)), 2),
        }
        world.items.append(item)
        world.items_by_category[cat].append(i)
    return world


def _make_query(
    world: _World, category: int, rng: np.random.Generator
) -> tuple[list[str], int | None]:
    """Query terms for an interest plus its confusable category (if any).

    Head queries name one unambiguous title term of the category (these
    are the keyword-matchable queries). Tail queries draw from a pair
    pool shared with a neighboring category, which only behaviors can
    disambiguate.
    """
    cfg = world.config
    c_count = cfg.n_categories
    if rng.random() < cfg.head_query_prob:
        pool = world.title_pools[category]
        return [pool[int(rng.integers(len(pool)))]], None
    if rng.random() < 0.5:
        pool_id, confuser = category, (category + 1) % c_count
    else:
        pool_id, confuser = (category - 1) % c_count, (category - 1) % c_count
    pool = world.pair_pools[pool_id]
    n = int(rng.integers(1, 3))
    picks = rng.choice(len(pool), size=n, replace=False)
    return [pool[j] for j in sorted(picks)], (None if confuser == category else confuser)


def _ad_descriptor(item: dict) -> AdDescriptor:
    return AdDescriptor(
        item_id=item["item_id"],
        shop_id=item["shop_id"],
        brand_id=item["brand_id"],
        title_terms=list(item["title_terms"]),
        bid_keywords=list(item["bid_keywords"]),
        cost=item["cost"],
    )


def ad_catalog(cfg: GeneratorConfig) -> list[AdDescriptor]:
    """The full ad repository of the synthetic world (every item)."""
    rng = np.random.default_rng(cfg.seed)
    world = _build_world(cfg, rng)
    return [_ad_descriptor(item) for item in world.items]


def generate_synthetic(
    cfg: GeneratorConfig,
) -> tuple[list[LogRecord], list[AdDescriptor], PlantedOracle]:
    """Generate impression logs, the ad repository, and the click oracle.

    Same seed, same bytes: the generator draws from one seeded stream in
    a fixed order.
    """
    rng = np.random.default_rng(cfg.seed)
    world = _build_world(cfg, rng)
    base_day = datetime.date(2024, 1, 1)
    records: list[LogRecord] = []
    oracle = PlantedOracle({}, {}, cfg.p_hi, cfg.p_lo)
    for item in world.items:
        oracle.item_categories[item["item_id"]] = item["category"]

    def pick_item(category: int) -> dict:
        ids = world.items_by_category[category]
        return world.items[ids[int(rng.integers(len(ids)))]]

    for user in range(cfg.n_users):
        user_id = f"u{user}"
        history: list[BehaviorEvent] = []
        ts = user * 1000
        for day_idx in range(cfg.days):
            day = (base_day + datetime.timedelta(days=day_idx)).isoformat()
            ts = max(ts, day_idx * 10_000_000 + user * 1000)
            if cfg.n_categories >= 2 and rng.random() < 0.8:
                picks = rng.choice(cfg.n_categories, size=2, replace=False)
                interests = [int(picks[0]), int(picks[1])]
            else:
                interests = [int(rng.integers(cfg.n_categories))]
            for _ in range(cfg.impressions_per_user_day):
                current = interests[int(rng.integers(len(interests)))]
                for _ in range(int(rng.integers(1, 4))):
                    if len(interests) > 1 and rng.random() > cfg.current_interest_bias:
                        b_cat = interests[1] if interests[0] == current else interests[0]
                    else:
                        b_cat = current
                    b_item = pick_item(b_cat)
                    b_query, _ = _make_query(world, b_cat, rng)
                    ts += int(rng.integers(1, 30))
                    history.append(
                        BehaviorEvent(
                            timestamp=ts,
                            item_id=b_item["item_id"],
                            shop_id=b_item["shop_id"],
                            brand_id=b_item["brand_id"],
                            title_terms=list(b_item["title_terms"]),
                            query_terms=b_query,
                        )
                    )
                query_terms, confuser = _make_query(world, current, rng)
                roll = rng.random()
                if roll < cfg.match_prob:
                    ad_cat = current
                elif confuser is not None and roll < cfg.match_prob + cfg.confuser_prob:
                    ad_cat = confuser
                else:
                    ad_cat = int(rng.integers(cfg.n_categories))
                ad = pick_item(ad_cat)
                matched = ad["category"] == current
                clicked = int(rng.random() < (cfg.p_hi if matched else cfg.p_lo))
                ts += int(rng.integers(1, 30))
                records.append(
                    LogRecord(
                        user_id=user_id,
                        timestamp=ts,
                        query_terms=query_terms,
                        behavior_items=[
                            BehaviorEvent(**asdict(ev))
                            for ev in history[-cfg.history_len :]
                        ],
                        ad=_ad_descriptor(ad),
                        clicked=clicked,
                        day=day,
                    )
                )
                oracle.request_categories[
                    PlantedOracle.request_key(user_id, ts)
                ] = current
                if clicked:
                    ts += 1
                    history.append(
                        BehaviorEvent(
                            timestamp=ts,
                            item_id=ad["item_id"],
                            shop_id=ad["shop_id"],
                            brand_id=ad["brand_id"],
                            title_terms=list(ad["title_terms"]),
                            query_terms=list(query_terms),
                        )
                    )
    ads = [_ad_descriptor(item) for item in world.items]
    return records, ads, oracle
