"""Semantic IDs: rendering, parsing, collision suffixes and registry statistics."""

import csv
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

_TOKEN = re.compile(r"<([a-z])_(\d+)>")
TAGS = string.ascii_lowercase


@dataclass(frozen=True)
class SemanticId:
    indices: Tuple[int, ...]
    suffix: Optional[int] = None

    @property
    def num_layers(self):
        return len(self.indices)

    def render(self):
        if len(self.indices) >= len(TAGS):
            raise ValueError(f"at most {len(TAGS) - 1} layers can be rendered")
        out = "".join(f"<{TAGS[l]}_{k}>" for l, k in enumerate(self.indices))
        if self.suffix is not None:
            out += f"<{TAGS[len(self.indices)]}_{self.suffix}>"
        return out

    def prefix(self, depth):
        return "".join(f"<{TAGS[l]}_{k}>" for l, k in enumerate(self.indices[:depth]))

    def __str__(self):
        return self.render()


def parse_sid(text, num_layers=3):
    """Parse ``<a_i><b_j>...`` into a :class:`SemanticId`.

    Exactly ``num_layers`` layer tokens are expected, optionally followed by
    one suffix token carrying the next tag letter.
    """
    text = text.strip()
    tokens = _TOKEN.findall(text)
    if "".join(f"<{t}_{v}>" for t, v in tokens) != text:
        raise ValueError(f"malformed semantic ID {text!r}")
    if len(tokens) not in (num_layers, num_layers + 1):
        raise ValueError(f"semantic ID {text!r} has {len(tokens)} tokens, expected {num_layers} or {num_layers + 1}")
    for pos, (tag, _) in enumerate(tokens):
        if tag != TAGS[pos]:
            raise ValueError(f"semantic ID {text!r}: token {pos} has tag {tag!r}, expected {TAGS[pos]!r}")
    values = [int(v) for _, v in tokens]
    suffix = values[num_layers] if len(values) > num_layers else None
    return SemanticId(tuple(values[:num_layers]), suffix)


def shared_prefix_len(a, b):
    """Number of equal leading layer indices; the suffix token is ignored."""
    if a.num_layers != b.num_layers:
        raise ValueError(f"cannot compare IDs with {a.num_layers} and {b.num_layers} layers")
    n = 0
    for x, y in zip(a.indices, b.indices):
        if x != y:
            break
        n += 1
    return n


class SidRegistry:
    """Bijective POI <-> semantic ID mapping."""

    def __init__(self, by_poi, codebook_size, num_layers):
        self.codebook_size = codebook_size
        self.num_layers = num_layers
        self.by_poi: Dict[str, SemanticId] = dict(sorted(by_poi.items()))
        self.by_sid: Dict[str, str] = {}
        for pid, sid in self.by_poi.items():
            key = sid.render()
            if key in self.by_sid:
                raise ValueError(f"semantic ID {key} assigned to both {self.by_sid[key]} and {pid}")
            self.by_sid[key] = pid

    def __len__(self):
        return len(self.by_poi)

    def __contains__(self, poi_id):
        return poi_id in self.by_poi

    def sid(self, poi_id):
        try:
            return self.by_poi[poi_id]
        except KeyError:
            raise KeyError(f"POI {poi_id!r} has no semantic ID") from None

    def render(self, poi_id):
        return self.sid(poi_id).render()

    def poi(self, sid):
        key = sid.render() if isinstance(sid, SemanticId) else sid.strip()
        return self.by_sid[key]

    def parse(self, text):
        return parse_sid(text, self.num_layers)

    def groups(self):
        out = defaultdict(list)
        for pid, sid in self.by_poi.items():
            out[sid.indices].append(pid)
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for pid, sid in self.by_poi.items():
                f.write(f"{pid}\t{sid.render()}\n")

    @classmethod
    def load(cls, path, codebook_size, num_layers):
        by_poi = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    pid, text = line.rstrip("\n").split("\t")
                    by_poi[pid] = parse_sid(text, num_layers)
        return cls(by_poi, codebook_size, num_layers)


def assign_sids(index_tuples, codebook_size, num_layers):
    """Build a registry from ``poi_id -> index tuple``.

    POIs sharing a tuple get suffixes 0, 1, ... in ascending ``poi_id``
    order; a tuple used by a single POI gets no suffix. Accepts a mapping or
    an iterable of ``(poi_id, tuple)`` pairs.
    """
    items = index_tuples.items() if hasattr(index_tuples, "items") else index_tuples
    base = {}
    for pid, tup in items:
        if pid in base:
            raise ValueError(f"duplicate POI id {pid!r}")
        tup = tuple(int(k) for k in tup)
        if len(tup) != num_layers:
            raise ValueError(f"POI {pid!r}: tuple {tup} does not have {num_layers} layers")
        if any(not 0 <= k < codebook_size for k in tup):
            raise ValueError(f"POI {pid!r}: tuple {tup} has indices outside [0, {codebook_size})")
        base[pid] = tup
    groups = defaultdict(list)
    for pid, tup in base.items():
        groups[tup].append(pid)
    by_poi = {}
    for tup, pids in groups.items():
        if len(pids) == 1:
            by_poi[pids[0]] = SemanticId(tup)
        else:
            for j, pid in enumerate(sorted(pids)):
                by_poi[pid] = SemanticId(tup, j)
    return SidRegistry(by_poi, codebook_size, num_layers)


@dataclass
class SidStats:
    total_pois: int
    unique_count: int  # base tuples used by exactly one POI
    collision_count_pois: int  # POIs sharing their base tuple
    collision_count_tuples: int  # base tuples shared by two or more POIs
    max_group_size: int

    def lines(self):
        return [f"{k}={v}" for k, v in self.__dict__.items()]


def sid_stats(registry):
    sizes = Counter(sid.indices for sid in registry.by_poi.values()).values()
    return SidStats(
        total_pois=len(registry),
        unique_count=sum(1 for s in sizes if s == 1),
        collision_count_pois=sum(s for s in sizes if s > 1),
        collision_count_tuples=sum(1 for s in sizes if s > 1),
        max_group_size=max(sizes, default=0),
    )


def prefix_category_profile(registry, poi_category, depth=1):
    """``{prefix: Counter(category -> count)}`` for POIs grouped by SID prefix.

    ``poi_category`` maps poi_id to a category label (e.g. from a POI table).
    """
    if not 0 < depth <= registry.num_layers:
        raise ValueError(f"prefix depth must lie in [1, {registry.num_layers}]")
    out = defaultdict(Counter)
    for pid, sid in registry.by_poi.items():
        out[sid.prefix(depth)][poi_category[pid]] += 1
    return {p: out[p] for p in sorted(out)}


def write_prefix_profile(profile, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["prefix", "category", "count"])
        for prefix, counts in profile.items():
            for cat, n in sorted(counts.items(), key=lambda kv: (-kv[1], str(kv[0]))):
                w.writerow([prefix, cat, n])
