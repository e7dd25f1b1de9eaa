"""Check-in log parsing, filtering, chronological splitting and POI aggregates."""

import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

DEFAULT_TIME_FORMAT = "%Y-%m-%d %H:%M:%S"
FOURSQUARE_TIME_FORMAT = "%a %b %d %H:%M:%S %z %Y"
MAX_REJECT_FRACTION = 0.5


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    poi_id: str
    timestamp: datetime
    category_name: str
    latitude: float
    longitude: float

    def sort_key(self):
        return (self.timestamp, self.user_id, self.poi_id)

    def to_dict(self):
        return {
            "user": self.user_id,
            "poi": self.poi_id,
            "time": self.timestamp.strftime(DEFAULT_TIME_FORMAT),
            "category": self.category_name,
            "lat": self.latitude,
            "lon": self.longitude,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["user"],
            d["poi"],
            datetime.strptime(d["time"], DEFAULT_TIME_FORMAT),
            d["category"],
            float(d["lat"]),
            float(d["lon"]),
        )


@dataclass
class PoiRecord:
    poi_id: str
    category_id: int
    latitude: float
    longitude: float
    visit_count: int
    visitor_histogram: Dict[str, int]
    hour_histogram: List[int]

    def to_dict(self):
        return {
            "poi": self.poi_id,
            "category_id": self.category_id,
            "lat": self.latitude,
            "lon": self.longitude,
            "visit_count": self.visit_count,
            "visitors": dict(sorted(self.visitor_histogram.items())),
            "hours": list(self.hour_histogram),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["poi"],
            int(d["category_id"]),
            float(d["lat"]),
            float(d["lon"]),
            int(d["visit_count"]),
            {k: int(v) for k, v in d["visitors"].items()},
            [int(h) for h in d["hours"]],
        )


@dataclass
class DatasetSplit:
    """Per-user chronological sequences for each split plus train-only aggregates."""

    train: Dict[str, List[CheckIn]]
    validation: Dict[str, List[CheckIn]]
    test: Dict[str, List[CheckIn]]
    category_vocab: List[str] = field(default_factory=list)
    user_vocab: List[str] = field(default_factory=list)
    poi_table: Dict[str, PoiRecord] = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def full_sequence(self, user_id):
        seq = []
        for part in (self.train, self.validation, self.test):
            seq.extend(part.get(user_id, ()))
        return seq


@dataclass
class ColumnMapping:
    """Where each field lives in a delimited row: column index, or header name."""

    user: Union[int, str] = 0
    poi: Union[int, str] = 1
    category: Union[int, str] = 3
    lat: Union[int, str] = 4
    lon: Union[int, str] = 5
    time: Union[int, str] = 7
    delimiter: str = "\t"
    header: bool = False
    time_format: Optional[str] = None


def parse_time(text, fmt=None):
    formats = [fmt] if fmt else [DEFAULT_TIME_FORMAT, FOURSQUARE_TIME_FORMAT]
    for f in formats:
        try:
            ts = datetime.strptime(text.strip(), f)
        except ValueError:
            continue
        # Times are used as given; any offset in the text is dropped, not applied.
        return ts.replace(tzinfo=None, second=0, microsecond=0)
    raise ValueError(f"unparseable timestamp {text!r}")


def parse_checkins(lines, mapping=None):
    """Parse delimited check-in rows.

    Returns ``(checkins, rejects)`` where ``rejects`` is a list of
    ``(line_number, reason)``. Raises ``ValueError`` when more than half of
    the data rows are rejected.
    """
    mapping = mapping or ColumnMapping()
    checkins = []
    rejects = []
    columns = None
    n_rows = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        cells = line.split(mapping.delimiter)
        if mapping.header and columns is None:
            columns = {name.strip(): i for i, name in enumerate(cells)}
            continue
        n_rows += 1
        try:
            checkins.append(_parse_row(cells, mapping, columns))
        except (ValueError, IndexError, KeyError) as exc:
            rejects.append((lineno, str(exc)))
    if n_rows and len(rejects) > MAX_REJECT_FRACTION * n_rows:
        raise ValueError(f"{len(rejects)} of {n_rows} rows rejected; first: line {rejects[0][0]}: {rejects[0][1]}")
    logger.info("parsed %d check-ins, rejected %d rows", len(checkins), len(rejects))
    return checkins, rejects


def _parse_row(cells, mapping, columns):
    def get(key):
        spec = getattr(mapping, key)
        if isinstance(spec, str):
            if columns is None:
                raise KeyError(f"column {spec!r} needs a header row")
            spec = columns[spec]
        value = cells[spec].strip()
        if not value:
            raise ValueError(f"empty {key} field")
        return value

    lat = float(get("lat"))
    lon = float(get("lon"))
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} out of range")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} out of range")
    return CheckIn(get("user"), get("poi"), parse_time(get("time"), mapping.time_format), get("category"), lat, lon)


def write_rejects(rejects, path):
    with open(path, "w", encoding="utf-8") as f:
        for lineno, reason in rejects:
            f.write(f"line {lineno}: {reason}\n")


def _filter_fixpoint(events, min_poi, min_user):
    while True:
        poi_counts = Counter(e.poi_id for e in events)
        user_counts = Counter(e.user_id for e in events)
        kept = [e for e in events if poi_counts[e.poi_id] >= min_poi and user_counts[e.user_id] >= min_user]
        if len(kept) == len(events):
            return kept
        events = kept


def _boundaries(n, ratios):
    a = int(n * ratios[0] + 1e-9)
    b = int(n * (ratios[0] + ratios[1]) + 1e-9)
    return a, b


def _group(events):
    out = defaultdict(list)
    for e in events:
        out[e.user_id].append(e)
    return {u: out[u] for u in sorted(out)}


def filter_and_split(checkins, min_poi_interactions=10, min_user_checkins=10, ratios=(0.8, 0.1, 0.1)):
    """Filter sparse POIs/users, split by global time order, drop unseen entities.

    The filter and the unseen-entity removal are repeated together until
    neither changes anything, so the result satisfies both constraints.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    events = sorted(checkins, key=CheckIn.sort_key)
    while True:
        events = _filter_fixpoint(events, min_poi_interactions, min_user_checkins)
        a, b = _boundaries(len(events), ratios)
        train, val, test = events[:a], events[a:b], events[b:]
        if not train:
            raise ValueError("train split is empty after filtering")
        users = {e.user_id for e in train}
        pois = {e.poi_id for e in train}
        val = [e for e in val if e.user_id in users and e.poi_id in pois]
        test = [e for e in test if e.user_id in users and e.poi_id in pois]
        kept = train + val + test
        if len(kept) == len(events):
            break
        events = kept
    split = DatasetSplit(_group(train), _group(val), _group(test))
    split.user_vocab = sorted(split.train)
    aggregate_pois(split)
    return split


def aggregate_pois(split):
    """Fill ``poi_table`` and ``category_vocab`` from the train split only."""
    events = sorted((e for seq in split.train.values() for e in seq), key=CheckIn.sort_key)
    if not events:
        raise ValueError("train split is empty")
    by_poi = defaultdict(list)
    for e in events:
        by_poi[e.poi_id].append(e)

    def modal_category(evs):
        counts = Counter(e.category_name for e in evs)
        return min(counts, key=lambda c: (-counts[c], c))

    categories = {pid: modal_category(evs) for pid, evs in by_poi.items()}
    split.category_vocab = sorted(set(categories.values()))
    cat_index = {c: i for i, c in enumerate(split.category_vocab)}
    table = {}
    for pid in sorted(by_poi):
        evs = by_poi[pid]
        hours = [0] * 24
        for e in evs:
            hours[e.timestamp.hour] += 1
        first = evs[0]
        table[pid] = PoiRecord(
            pid,
            cat_index[categories[pid]],
            first.latitude,
            first.longitude,
            len(evs),
            dict(sorted(Counter(e.user_id for e in evs).items())),
            hours,
        )
    split.poi_table = table
    return table


def build_eval_instances(split, history_len=50):
    """One ``(history, target)`` pair per user with test events.

    The target is the user's last test check-in; the history is the
    ``history_len`` check-ins right before it across all splits.
    Returns ``(instances, n_skipped)``.
    """
    instances = []
    skipped = 0
    for user in sorted(set(split.train) | set(split.validation) | set(split.test)):
        if not split.test.get(user):
            skipped += 1
            continue
        seq = split.full_sequence(user)
        target = seq[-1]
        history = seq[:-1][-history_len:] if history_len > 0 else []
        instances.append((history, target))
    return instances, skipped


def write_checkins(sequences, path):
    """Write per-user sequences as one JSON object per line, users in sorted order."""
    with open(path, "w", encoding="utf-8") as f:
        for user in sorted(sequences):
            for e in sequences[user]:
                f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_checkins(path):
    seqs = defaultdict(list)
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                e = CheckIn.from_dict(json.loads(line))
                seqs[e.user_id].append(e)
    return {u: seqs[u] for u in sorted(seqs)}


def write_poi_table(table, path):
    with open(path, "w", encoding="utf-8") as f:
        for pid in sorted(table):
            f.write(json.dumps(table[pid].to_dict(), sort_keys=True) + "\n")


def read_poi_table(path):
    table = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = PoiRecord.from_dict(json.loads(line))
                table[rec.poi_id] = rec
    return table


def write_lines(items: Sequence[str], path):
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(item + "\n")


def read_lines(path) -> List[str]:
    with open(path, encoding="utf-8") as f:
        return f.read().splitlines()


def save_split(split, directory):
    os.makedirs(directory, exist_ok=True)
    for name, seqs in split.splits().items():
        write_checkins(seqs, os.path.join(directory, f"{name}.jsonl"))
    write_poi_table(split.poi_table, os.path.join(directory, "poi_table.jsonl"))
    write_lines(split.category_vocab, os.path.join(directory, "categories.txt"))
    write_lines(split.user_vocab, os.path.join(directory, "users.txt"))


def load_split(directory) -> DatasetSplit:
    parts: Tuple[dict, ...] = tuple(read_checkins(os.path.join(directory, f"{n}.jsonl")) for n in ("train", "validation", "test"))
    split = DatasetSplit(*parts)
    split.poi_table = read_poi_table(os.path.join(directory, "poi_table.jsonl"))
    split.category_vocab = read_lines(os.path.join(directory, "categories.txt"))
    split.user_vocab = read_lines(os.path.join(directory, "users.txt"))
    return split
