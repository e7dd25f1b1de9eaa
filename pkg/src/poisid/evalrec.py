"""Top-1 accuracy scoring, a first-order Markov baseline and SID prefix analysis."""

import csv
import json
import logging
import re
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .sidregistry import shared_prefix_len

logger = logging.getLogger(__name__)

TIME_FORMAT = "%Y-%m-%d %H:%M:%S"
# First SID-shaped run: an a-token followed by later-tag tokens, spaces allowed between.
_SID_RUN = re.compile(r"<a_\d+>(?:\s*<[b-z]_\d+>)*")
MIN_PAIRS = 30


@dataclass
class EvalInstance:
    uid: str
    history: List[Tuple[str, datetime]]
    target_sid: str
    target_time: datetime

    def __post_init__(self):
        times = [t for _, t in self.history]
        if any(a > b for a, b in zip(times, times[1:])):
            raise ValueError(f"user {self.uid}: history is not sorted by time")
        if times and self.target_time < times[-1]:
            raise ValueError(f"user {self.uid}: target precedes the last history event")

    @property
    def history_sids(self):
        return [s for s, _ in self.history]

    def to_dict(self):
        return {
            "uid": self.uid,
            "history": [[s, t.strftime(TIME_FORMAT)] for s, t in self.history],
            "target": self.target_sid,
            "target_time": self.target_time.strftime(TIME_FORMAT),
        }

    @classmethod
    def from_dict(cls, d):
        hist = [(s, datetime.strptime(t, TIME_FORMAT)) for s, t in d["history"]]
        return cls(d["uid"], hist, d["target"], datetime.strptime(d["target_time"], TIME_FORMAT))


def make_eval_instances(pairs, registry):
    """Turn ``(history checkins, target checkin)`` pairs into SID instances."""
    out = []
    for history, target in pairs:
        hist = [(registry.render(e.poi_id), e.timestamp) for e in history]
        out.append(EvalInstance(target.user_id, hist, registry.render(target.poi_id), target.timestamp))
    return out


@dataclass
class EvalReport:
    n: int
    hits: int
    unparseable: int = 0
    by_length_decile: Dict[int, List[int]] = field(default_factory=dict)  # decile -> [n, hits]
    by_hour: Dict[int, List[int]] = field(default_factory=dict)  # hour -> [n, hits]

    @property
    def acc1(self):
        return self.hits / self.n if self.n else 0.0

    def lines(self):
        out = [f"n={self.n}", f"hits={self.hits}", f"acc1={self.acc1:.6f}", f"unparseable={self.unparseable}"]
        for d, (n, h) in sorted(self.by_length_decile.items()):
            out.append(f"length_decile.{d}={h}/{n}")
        for hr, (n, h) in sorted(self.by_hour.items()):
            out.append(f"hour.{hr:02d}={h}/{n}")
        return out


def _deciles(lengths):
    # Rank-based so ties in length still spread evenly; stable for determinism.
    order = sorted(range(len(lengths)), key=lambda i: lengths[i])
    dec = [0] * len(lengths)
    for rank, i in enumerate(order):
        dec[i] = min(9, 10 * rank // len(lengths))
    return dec


def acc_at_1(predictions, targets, instances=None, unparseable=0):
    """Exact-string top-1 accuracy; ``instances`` adds length and hour buckets."""
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions for {len(targets)} targets")
    hit = [p is not None and p == t for p, t in zip(predictions, targets)]
    report = EvalReport(len(hit), sum(hit), unparseable)
    if instances is not None and hit:
        if len(instances) != len(hit):
            raise ValueError(f"{len(instances)} instances for {len(hit)} predictions")
        dec = _deciles([len(inst.history) for inst in instances])
        for h, d, inst in zip(hit, dec, instances):
            for bucket, key in ((report.by_length_decile, d), (report.by_hour, inst.target_time.hour)):
                cell = bucket.setdefault(key, [0, 0])
                cell[0] += 1
                cell[1] += int(h)
    return report


class MarkovBaseline(BaseEstimator):
    """First-order transition model over SID sequences with add-k smoothing.

    Unseen contexts and empty histories fall back to the most popular SID.
    Ties break toward the lexically smallest SID.
    """

    def __init__(self, smoothing=0.01):
        self.smoothing = smoothing

    def fit(self, sequences, y=None):
        """``sequences``: iterable of SID lists, or a ``{user: [sid, ...]}`` mapping."""
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")
        if hasattr(sequences, "items"):
            items = sorted(sequences.items())
        else:
            items = list(enumerate(sequences))
        counts = defaultdict(Counter)
        pop = Counter()
        last = {}
        for user, seq in items:
            pop.update(seq)
            for a, b in zip(seq, seq[1:]):
                counts[a][b] += 1
            if seq:
                last[user] = seq[-1]
        if not pop:
            raise ValueError("cannot fit on an empty corpus")
        self.vocab_ = sorted(pop)
        self.popularity_ = dict(sorted(pop.items()))
        self.ranking_ = sorted(pop, key=lambda s: (-pop[s], s))
        self.counts_ = {a: dict(sorted(c.items())) for a, c in sorted(counts.items())}
        self.user_last_ = last
        return self

    def transition_probs(self, sid):
        """Smoothed next-SID distribution from ``sid`` over the train vocabulary."""
        check_is_fitted(self, "counts_")
        row = self.counts_.get(sid, {})
        V = len(self.vocab_)
        denom = sum(row.values()) + self.smoothing * V
        if denom == 0:
            return {s: 1.0 / V for s in self.vocab_}
        return {s: (row.get(s, 0) + self.smoothing) / denom for s in self.vocab_}

    def predict_one(self, history):
        check_is_fitted(self, "counts_")
        if not history or history[-1] not in self.counts_:
            return self.ranking_[0]
        row = self.counts_[history[-1]]
        # Smoothing adds the same mass everywhere, so the argmax is the raw-count argmax.
        return min(row, key=lambda s: (-row[s], s))

    def predict(self, X):
        """``X``: list of :class:`EvalInstance` or of SID histories."""
        return [self.predict_one(x.history_sids if isinstance(x, EvalInstance) else list(x)) for x in X]


class PopularityBaseline(MarkovBaseline):
    """Always predicts the most frequent train SID."""

    def predict_one(self, history):
        check_is_fitted(self, "counts_")
        return self.ranking_[0]


def extract_sid(text):
    """First SID-shaped token run in ``text`` with inner whitespace removed, or None."""
    m = _SID_RUN.search(text)
    return re.sub(r"\s+", "", m.group(0)) if m else None


def score_external(lines, instances):
    """Score one prediction per instance, in manifest order.

    ``lines`` is a path or a list of strings. Lines without a SID count as
    misses and are tallied in ``unparseable``.
    """
    if isinstance(lines, str):
        with open(lines, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
    if len(lines) != len(instances):
        raise ValueError(f"prediction file has {len(lines)} rows, expected {len(instances)}")
    preds = [extract_sid(line) for line in lines]
    bad = sum(p is None for p in preds)
    if bad:
        warnings.warn(f"{bad} prediction rows held no parseable semantic ID")
    return acc_at_1(preds, [inst.target_sid for inst in instances], instances, unparseable=bad)


def write_eval_manifest(instances, path, prompts=None):
    """Ordered instance file; ``prompts`` optionally adds instruction/input per row."""
    with open(path, "w", encoding="utf-8") as f:
        for i, inst in enumerate(instances):
            row = inst.to_dict()
            if prompts is not None:
                row["instruction"] = prompts[i].instruction
                row["input"] = prompts[i].input
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_eval_manifest(path):
    with open(path, encoding="utf-8") as f:
        return [EvalInstance.from_dict(json.loads(line)) for line in f if line.strip()]


def write_predictions(predictions, path):
    with open(path, "w", encoding="utf-8") as f:
        for p in predictions:
            f.write(f"{p}\n")


# -- prefix analysis -------------------------------------------------------


def sample_pairs(labels, n_pairs, rng):
    """Sample ``n_pairs`` same-label and ``n_pairs`` cross-label POI pairs.

    ``labels`` maps poi_id to a group label (category or cluster).
    """
    pids = sorted(labels)
    groups = defaultdict(list)
    for p in pids:
        groups[labels[p]].append(p)
    multi = [g for g in sorted(groups, key=str) if len(groups[g]) >= 2]
    same, cross = [], []
    if multi:
        sizes = np.array([len(groups[g]) for g in multi], dtype=float)
        w = sizes * (sizes - 1)
        w /= w.sum()
        for _ in range(n_pairs):
            g = groups[multi[rng.choice(len(multi), p=w)]]
            i, j = rng.choice(len(g), size=2, replace=False)
            same.append((g[i], g[j]))
    if len(groups) >= 2:
        tries = 0
        while len(cross) < n_pairs and tries < 100 * n_pairs:
            tries += 1
            i, j = rng.choice(len(pids), size=2, replace=False)
            if labels[pids[i]] != labels[pids[j]]:
                cross.append((pids[i], pids[j]))
    return same, cross


def bootstrap_ci(values, rng, n_boot=1000, level=0.95):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return (float("nan"), float("nan"))
    means = values[rng.integers(0, values.size, size=(n_boot, values.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class PrefixSimilarity:
    n_same: int
    n_cross: int
    mean_same: float
    mean_cross: float
    ci_same: Tuple[float, float]
    ci_cross: Tuple[float, float]

    @property
    def separated(self):
        """True when the same-group interval lies entirely above the cross-group one."""
        return self.ci_same[0] > self.ci_cross[1]

    def rows(self):
        return [
            ["same", self.n_same, self.mean_same, self.ci_same[0], self.ci_same[1]],
            ["cross", self.n_cross, self.mean_cross, self.ci_cross[0], self.ci_cross[1]],
        ]


def prefix_similarity_report(registry, labels, n_pairs=500, seed=0, n_boot=1000):
    """Mean shared SID prefix length for same-label vs cross-label POI pairs."""
    rng = np.random.default_rng(seed)
    labels = {p: labels[p] for p in registry.by_poi if p in labels}
    same, cross = sample_pairs(labels, n_pairs, rng)
    if min(len(same), len(cross)) < MIN_PAIRS:
        warnings.warn(f"only {len(same)} same-group and {len(cross)} cross-group pairs; intervals are unreliable")

    def lens(pairs):
        return [shared_prefix_len(registry.sid(a), registry.sid(b)) for a, b in pairs]

    ls, lc = lens(same), lens(cross)
    return PrefixSimilarity(
        len(ls),
        len(lc),
        float(np.mean(ls)) if ls else float("nan"),
        float(np.mean(lc)) if lc else float("nan"),
        bootstrap_ci(ls, rng, n_boot),
        bootstrap_ci(lc, rng, n_boot),
    )


def write_prefix_similarity(report, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pair_kind", "n", "mean_shared_prefix", "ci_low", "ci_high"])
        for row in report.rows():
            w.writerow([row[0], row[1]] + [f"{v:.6f}" for v in row[2:]])
