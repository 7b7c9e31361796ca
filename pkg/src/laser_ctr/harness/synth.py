"""Synthetic behaviour logs with planted interests.

Every user has a history of timestamped events (most recent first). Some
"interest" topics are planted into the history; a candidate whose topic is an
*active* planted interest is clicked with probability ``p_hi``, anything else
with ``p_lo``.

Variants
--------
``planted``  Each planted topic is either active (its events fall inside the
             last ``active_days``) or stale (its events are all older than
             ``stale_days``). Users differ in activity rate by more than an
             order of magnitude, so the same history position means very
             different elapsed times; telling active from stale needs the
             recency signal, not position alone.
``deep``     Every planted topic is active and its events sit at depth
             ``deep_from`` or beyond, so a model that truncates the history
             before that depth cannot see any signal.

Randomness is drawn from one Philox stream per user keyed by ``(seed, user)``,
so users can be generated in any order or in parallel with identical output.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

DAY = 86400
NOW = 1_700_000_000


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 10000
    n_topics: int = 100
    n_interest_topics: int = 50
    history_len: tuple[int, int] = (1000, 1000)
    planted_topics_per_user: int = 3
    planted_events: tuple[int, int] = (4, 8)
    p_hi: float = 0.9
    p_lo: float = 0.05
    noise_rate: float = 0.0
    planted_burst: int = 1
    events_per_day: tuple[float, float] = (5.0, 100.0)
    active_days: float = 4.0
    stale_days: float = 16.0
    variant: str = "planted"
    deep_from: int = 500
    targets_per_user: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_lo < self.p_hi <= 1:
            raise ValueError("need 0 <= p_lo < p_hi <= 1")
        if self.variant not in ("planted", "deep"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 < self.n_interest_topics < self.n_topics:
            raise ValueError("n_interest_topics must be in (0, n_topics)")
        if self.planted_topics_per_user > self.n_interest_topics:
            raise ValueError("more planted topics than interest topics")
        lo, hi = self.history_len
        if not 1 <= lo <= hi:
            raise ValueError("bad history_len range")
        if self.planted_burst < 1:
            raise ValueError("planted_burst must be >= 1")
        if self.variant == "deep" and lo <= self.deep_from:
            raise ValueError("deep variant needs histories longer than deep_from")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("history_len", "planted_events", "events_per_day"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


@dataclass
class Corpus:
    """Per-user histories plus labelled (user, candidate) samples."""

    config: SynthConfig
    item_topic: np.ndarray  # (n_items,)
    hist_items: np.ndarray  # (U, Lmax) most recent first, zero padded
    hist_topics: np.ndarray
    hist_actions: np.ndarray
    hist_ts: np.ndarray
    hist_len: np.ndarray  # (U,)
    request_time: np.ndarray  # (U,)
    planted: np.ndarray  # (U, planted_topics_per_user) topic ids
    planted_active: np.ndarray  # (U, planted_topics_per_user) bool
    sample_user: np.ndarray  # (N,)
    target_item: np.ndarray
    target_topic: np.ndarray
    label: np.ndarray  # (N,) 0/1
    match: np.ndarray  # (N,) candidate topic is an active planted interest

    def samples(self, users=None, seq_len=None):
        from .model import SequenceSamples

        sel = np.arange(len(self.sample_user)) if users is None else np.flatnonzero(np.isin(self.sample_user, users))
        return SequenceSamples.from_corpus(self, sel, seq_len=seq_len), self.label[sel]

    def split(self, test_fraction=0.25, seq_len=None):
        """Split by user so no history is shared between train and test."""
        n = self.hist_items.shape[0]
        cut = int(round(n * (1 - test_fraction)))
        users = np.arange(n)
        return self.samples(users[:cut], seq_len), self.samples(users[cut:], seq_len)

    def events(self, user):
        """Newest-first event dicts for one user in the default store schema."""
        n = self.hist_len[user]
        return [
            {
                "item_id": int(self.hist_items[user, i]),
                "topic": int(self.hist_topics[user, i]),
                "scenario": int(i % 3),
                "action": int(self.hist_actions[user, i]),
                "timestamp": int(self.hist_ts[user, i]),
                "similarity": None,
                "embedding_ref": None,
            }
            for i in range(n)
        ]

    def save(self, path):
        arrays = {k: v for k, v in vars(self).items() if isinstance(v, np.ndarray)}
        np.savez_compressed(path, config=np.frombuffer(self.config.to_json().encode(), np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            cfg = SynthConfig.from_dict(json.loads(bytes(data["config"]).decode()))
            arrays = {k: data[k] for k in data.files if k != "config"}
        return cls(config=cfg, **arrays)


def user_rng(seed: int, user: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, user]))


def _topic_items(item_topic, n_topics):
    order = np.argsort(item_topic, kind="stable")
    bounds = np.searchsorted(item_topic[order], np.arange(n_topics + 1))
    return order, bounds


def _draw_items(rng, by_topic, topics):
    """One uniformly chosen item of each requested topic."""
    order, bounds = by_topic
    topics = np.asarray(topics)
    sizes = bounds[topics + 1] - bounds[topics]
    pick = (rng.random(len(topics)) * sizes).astype(np.int64)
    return order[bounds[topics] + pick].astype(np.int64)


def _place(rng, zone, k, burst):
    """``k`` positions from ``zone`` in runs of up to ``burst`` consecutive slots."""
    if burst == 1 or k == 0:
        return rng.choice(zone, size=k, replace=False)
    starts = rng.permutation(zone)
    taken = set(int(z) for z in zone)
    chosen = []
    for s in starts:
        run = [int(s) + j for j in range(burst) if int(s) + j in taken]
        run = run[: k - len(chosen)]
        chosen.extend(run)
        taken.difference_update(run)
        if len(chosen) >= k:
            break
    return np.array(sorted(set(chosen)), np.int64)


def _gen_user(cfg: SynthConfig, user, by_topic, out):
    rng = user_rng(cfg.seed, user)
    lo, hi = cfg.history_len
    n = int(rng.integers(lo, hi + 1))
    rate = float(np.exp(rng.uniform(*np.log(cfg.events_per_day))))
    gaps = np.maximum(1, np.ceil(rng.exponential(DAY / rate, size=n))).astype(np.int64)
    ts = NOW - np.cumsum(gaps)
    delta = NOW - ts

    interest = cfg.n_interest_topics
    topics = rng.integers(interest, cfg.n_topics, size=n)
    if cfg.noise_rate > 0:
        noisy = rng.random(n) < cfg.noise_rate
        topics[noisy] = rng.integers(0, interest, size=int(noisy.sum()))
    planted = rng.choice(interest, size=cfg.planted_topics_per_user, replace=False)
    active = np.ones(len(planted), bool)
    free = np.ones(n, bool)
    if cfg.variant == "deep":
        zones = [np.arange(cfg.deep_from, n)] * len(planted)
    else:
        recent = np.flatnonzero(delta < cfg.active_days * DAY)
        old = np.flatnonzero(delta > cfg.stale_days * DAY)
        active = rng.random(len(planted)) < 0.5
        if len(old) < cfg.planted_events[1]:
            active[:] = True
        if len(recent) < cfg.planted_events[0]:
            active[:] = False
        zones = [recent if a else old for a in active]
    for j, (topic, zone) in enumerate(zip(planted, zones)):
        zone = zone[free[zone]]
        k = min(len(zone), int(rng.integers(cfg.planted_events[0], cfg.planted_events[1] + 1)))
        pos = _place(rng, zone, k, cfg.planted_burst)
        topics[pos] = topic
        free[pos] = False
        if not len(pos):
            active[j] = False  # no room left: the interest never shows up
    items = _draw_items(rng, by_topic, topics)
    actions = rng.integers(0, 4, size=n)

    # candidates: active interests, stale interests, unrelated interest topics
    k = cfg.targets_per_user
    act, stale = planted[active], planted[~active]
    others = np.setdiff1d(np.arange(interest), planted)
    tt = []
    for j in range(k):
        r = j % 8
        if r < 3 and len(act):
            tt.append(rng.choice(act))
        elif r < 5 and len(stale):
            tt.append(rng.choice(stale))
        else:
            tt.append(rng.choice(others))
    tt = np.array(tt)
    match = np.isin(tt, act)
    label = (rng.random(k) < np.where(match, cfg.p_hi, cfg.p_lo)).astype(np.int8)
    titems = _draw_items(rng, by_topic, tt)

    out["hist_items"][user, :n] = items
    out["hist_topics"][user, :n] = topics
    out["hist_actions"][user, :n] = actions
    out["hist_ts"][user, :n] = ts
    out["hist_len"][user] = n
    out["planted"][user] = planted
    out["planted_active"][user] = active
    s = slice(user * k, (user + 1) * k)
    out["target_item"][s] = titems
    out["target_topic"][s] = tt
    out["label"][s] = label
    out["match"][s] = match


def gen_synthetic(cfg: SynthConfig) -> Corpus:
    base = np.random.Generator(np.random.Philox(key=[cfg.seed, 2**63]))
    item_topic = base.integers(0, cfg.n_topics, size=cfg.n_items)
    item_topic[: cfg.n_topics] = np.arange(cfg.n_topics)  # every topic owns an item
    by_topic = _topic_items(item_topic, cfg.n_topics)
    U, L = cfg.n_users, cfg.history_len[1]
    N = U * cfg.targets_per_user
    out = {
        "hist_items": np.zeros((U, L), np.int64),
        "hist_topics": np.zeros((U, L), np.int64),
        "hist_actions": np.zeros((U, L), np.int64),
        "hist_ts": np.zeros((U, L), np.int64),
        "hist_len": np.zeros(U, np.int64),
        "planted": np.zeros((U, cfg.planted_topics_per_user), np.int64),
        "planted_active": np.zeros((U, cfg.planted_topics_per_user), bool),
        "target_item": np.zeros(N, np.int64),
        "target_topic": np.zeros(N, np.int64),
        "label": np.zeros(N, np.int8),
        "match": np.zeros(N, bool),
    }
    for user in range(U):
        _gen_user(cfg, user, by_topic, out)
    return Corpus(
        config=cfg,
        item_topic=item_topic,
        request_time=np.full(U, NOW, np.int64),
        sample_user=np.repeat(np.arange(U), cfg.targets_per_user),
        **out,
    )
