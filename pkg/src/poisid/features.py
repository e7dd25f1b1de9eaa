"""Multi-hot POI semantic vectors: category, region, busy hours, top visitors."""

from dataclasses import dataclass, field
from typing import List

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geocode import RegionVocab, build_region_vocab

N_SLOTS = 24
FEATURES_HEADER = "# poisid-features v1"
SEGMENTS = ("category", "region", "time", "users")


@dataclass
class FeatureSpace:
    category_vocab: List[str]
    region_vocab: RegionVocab
    user_vocab: List[str]
    top_k_slots: int = 10
    top_k_visitors: int = 10
    user_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if not self.category_vocab or not self.user_vocab:
            raise ValueError("category and user vocabularies must be non-empty")
        if self.top_k_slots < 1 or self.top_k_visitors < 1:
            raise ValueError("top-k values must be positive")
        self.user_index = {u: i for i, u in enumerate(self.user_vocab)}

    @property
    def layout(self):
        """(offset, length) spans for category, region (+UNK), time, users."""
        sizes = (len(self.category_vocab), len(self.region_vocab) + 1, N_SLOTS, len(self.user_vocab))
        spans, offset = [], 0
        for n in sizes:
            spans.append((offset, n))
            offset += n
        return tuple(spans)

    @property
    def width(self):
        off, n = self.layout[-1]
        return off + n


@dataclass
class FeatureMatrix:
    poi_ids: List[str]
    X: np.ndarray
    layout: tuple

    def row(self, poi_id):
        return self.X[self.poi_ids.index(poi_id)]

    def segment(self, name):
        off, n = self.layout[SEGMENTS.index(name)]
        return self.X[:, off : off + n]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(FEATURES_HEADER + "\n")
            f.write(f"# rows={self.X.shape[0]} width={self.X.shape[1]}\n")
            spans = " ".join(f"{name}={off}:{n}" for name, (off, n) in zip(SEGMENTS, self.layout))
            f.write(f"# layout {spans}\n")
            for pid, row in zip(self.poi_ids, self.X):
                active = np.flatnonzero(row)
                f.write(pid + "\t" + " ".join(map(str, active)) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or lines[0] != FEATURES_HEADER:
            raise ValueError(f"{path}: not a feature matrix file")
        dims = dict(kv.split("=") for kv in lines[1][2:].split())
        layout = []
        for item in lines[2].split()[2:]:
            off, n = item.split("=")[1].split(":")
            layout.append((int(off), int(n)))
        rows, width = int(dims["rows"]), int(dims["width"])
        X = np.zeros((rows, width))
        poi_ids = []
        for i, line in enumerate(lines[3:]):
            pid, _, active = line.partition("\t")
            poi_ids.append(pid)
            if active:
                X[i, [int(a) for a in active.split()]] = 1.0
        if len(poi_ids) != rows:
            raise ValueError(f"{path}: expected {rows} rows, found {len(poi_ids)}")
        return cls(poi_ids, X, tuple(layout))


def encode_category(poi, space):
    n = len(space.category_vocab)
    if not 0 <= poi.category_id < n:
        raise ValueError(f"POI {poi.poi_id}: category id {poi.category_id} outside vocabulary of {n}")
    out = np.zeros(n)
    out[poi.category_id] = 1.0
    return out


def encode_region(poi, space):
    out = np.zeros(len(space.region_vocab) + 1)
    out[space.region_vocab.id_for(poi.latitude, poi.longitude)] = 1.0
    return out


def encode_time_slots(poi, space):
    """Top-k busiest hours; ties go to the earlier hour, zero-count hours never fire."""
    hist = np.asarray(poi.hour_histogram)
    if hist.shape != (N_SLOTS,) or hist.sum() <= 0:
        raise ValueError(f"POI {poi.poi_id}: hour histogram must have 24 entries with a positive total")
    order = sorted(range(N_SLOTS), key=lambda h: (-hist[h], h))
    out = np.zeros(N_SLOTS)
    for h in order[: space.top_k_slots]:
        if hist[h] > 0:
            out[h] = 1.0
    return out


def encode_collaborative(poi, space):
    """Top-k visitors by count; ties broken by user id."""
    out = np.zeros(len(space.user_vocab))
    ranked = sorted(poi.visitor_histogram.items(), key=lambda kv: (-kv[1], kv[0]))
    for user, count in ranked[: space.top_k_visitors]:
        if count <= 0:
            continue
        if user not in space.user_index:
            raise ValueError(f"POI {poi.poi_id}: visitor {user!r} not in user vocabulary")
        out[space.user_index[user]] = 1.0
    return out


def encode_poi(poi, space):
    return np.concatenate(
        [
            encode_category(poi, space),
            encode_region(poi, space),
            encode_time_slots(poi, space),
            encode_collaborative(poi, space),
        ]
    )


def build_feature_matrix(poi_table, space):
    ids = sorted(poi_table)
    X = np.zeros((len(ids), space.width))
    for i, pid in enumerate(ids):
        X[i] = encode_poi(poi_table[pid], space)
    return FeatureMatrix(ids, X, space.layout)


class PoiFeatureEncoder(TransformerMixin, BaseEstimator):
    """Learn vocabularies from a training POI table and emit multi-hot vectors.

    ``fit`` takes a mapping ``poi_id -> PoiRecord``; ``transform`` returns a
    float array with rows in lexical ``poi_id`` order.
    """

    def __init__(self, precision=8, top_k_slots=10, top_k_visitors=10):
        self.precision = precision
        self.top_k_slots = top_k_slots
        self.top_k_visitors = top_k_visitors

    def fit(self, poi_table, y=None, category_vocab=None, user_vocab=None):
        if not poi_table:
            raise ValueError("empty POI table")
        if category_vocab is None:
            n_cat = 1 + max(p.category_id for p in poi_table.values())
            category_vocab = [str(i) for i in range(n_cat)]
        if user_vocab is None:
            user_vocab = sorted({u for p in poi_table.values() for u in p.visitor_histogram})
        self.space_ = FeatureSpace(
            list(category_vocab),
            build_region_vocab(poi_table, self.precision),
            list(user_vocab),
            self.top_k_slots,
            self.top_k_visitors,
        )
        self.n_features_out_ = self.space_.width
        return self

    def transform(self, poi_table):
        return self.feature_matrix(poi_table).X

    def feature_matrix(self, poi_table):
        check_is_fitted(self, "space_")
        return build_feature_matrix(poi_table, self.space_)
