"""Seeded synthetic corpora: clustered POI tables and Foursquare-style check-in logs."""

from datetime import datetime, timedelta

import numpy as np

from .ingest import PoiRecord

_BASE_LAT, _BASE_LON = 40.70, -74.00


def clustered_poi_table(n_pois=2000, n_clusters=40, n_categories=20, n_users=200, seed=0):
    """POI table whose POIs fall into ``n_clusters`` feature clusters.

    A cluster fixes the category, a neighbourhood, a set of busy hours and a
    pool of regular visitors; POIs inside a cluster vary around those.
    Returns ``(poi_table, cluster_of)`` with ``cluster_of[poi_id] -> int``.
    """
    rng = np.random.default_rng(seed)
    users = [f"u{i:04d}" for i in range(n_users)]
    clusters = []
    for c in range(n_clusters):
        clusters.append(
            {
                "category": c % n_categories,
                "center": (_BASE_LAT + rng.uniform(0, 0.3), _BASE_LON + rng.uniform(0, 0.3)),
                "hours": rng.choice(24, size=6, replace=False),
                "pool": rng.choice(n_users, size=min(30, n_users), replace=False),
            }
        )
    table, cluster_of = {}, {}
    for i in range(n_pois):
        c = i % n_clusters
        spec = clusters[c]
        pid = f"p{i:05d}"
        lat = spec["center"][0] + rng.normal(0, 0.0015)
        lon = spec["center"][1] + rng.normal(0, 0.0015)
        hours = np.zeros(24, dtype=int)
        hours[spec["hours"]] = rng.poisson(8, size=6) + 1
        noise = rng.choice(24, size=3, replace=False)
        hours[noise] += rng.poisson(3, size=3)
        visitors = {}
        for u in rng.choice(spec["pool"], size=12, replace=False):
            visitors[users[u]] = int(rng.integers(1, 6))
        # Visit counts are tied to the histograms so the record invariants hold.
        total = int(hours.sum())
        vtotal = sum(visitors.values())
        if vtotal < total:
            first = sorted(visitors)[0]
            visitors[first] += total - vtotal
        else:
            hours[spec["hours"][0]] += vtotal - total
        table[pid] = PoiRecord(pid, spec["category"], lat, lon, int(hours.sum()), visitors, hours.tolist())
        cluster_of[pid] = c
    return table, cluster_of


def checkin_log(n_users=60, n_pois=200, n_categories=12, events_per_user=(60, 120), seed=0):
    """Foursquare-format TSV lines (no header) with habitual user trajectories.

    Each user cycles through a personal routine of POIs with occasional
    random detours, so sequences carry learnable transitions.
    """
    rng = np.random.default_rng(seed)
    cat_names = [f"Category {chr(65 + i)}" for i in range(n_categories)]
    poi_cat = rng.integers(0, n_categories, size=n_pois)
    poi_lat = _BASE_LAT + rng.uniform(0, 0.2, size=n_pois)
    poi_lon = _BASE_LON + rng.uniform(0, 0.2, size=n_pois)
    start = datetime(2012, 4, 3, 6, 0)
    rows = []
    for u in range(n_users):
        routine = rng.choice(n_pois, size=int(rng.integers(4, 9)), replace=False)
        n_events = int(rng.integers(*events_per_user))
        t = start + timedelta(minutes=int(rng.integers(0, 24 * 60)))
        step = 0
        for _ in range(n_events):
            if rng.random() < 0.25:
                p = int(rng.integers(n_pois))
            else:
                p = int(routine[step % len(routine)])
                step += 1
            t += timedelta(minutes=int(rng.integers(90, 60 * 14)))
            rows.append((t, u, p))
    rows.sort()
    lines = []
    for t, u, p in rows:
        stamp = t.strftime("%a %b %d %H:%M:%S +0000 %Y")
        lines.append(
            "\t".join(
                [
                    f"{u + 1}",
                    f"v{p:04d}",
                    f"cat{poi_cat[p]:02d}",
                    cat_names[poi_cat[p]],
                    f"{poi_lat[p]:.6f}",
                    f"{poi_lon[p]:.6f}",
                    "-240",
                    stamp,
                ]
            )
        )
    return lines
