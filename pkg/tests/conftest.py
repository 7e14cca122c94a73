import os

import numpy as np
import pytest

from geostream import kgstore
from geostream.harness import CheckInRecord
from geostream.reward import WordVectors

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
WORDVEC_PATH = os.path.join(DATA_DIR, "wordvecs_toy.txt")

CYCLE_CATEGORIES = ("Museum", "Park", "Cafe", "Gym", "Beach", "Station")
CLUSTER_CATEGORIES = ("Museum", "Park", "Cafe", "Gym", "Beach", "Station")


@pytest.fixture
def wv_path():
    return WORDVEC_PATH


@pytest.fixture
def wv():
    return WordVectors.load(WORDVEC_PATH)


@pytest.fixture
def toy_kg():
    """3 POIs, 2 categories, 2 zones, a couple of visits already applied."""
    kg = kgstore.build_static([(0, 0, 0), (1, 0, 1), (2, 1, 1)], window=5)
    kg.apply_visit(7, 0, 100.0)
    kg.apply_visit(7, 1, 200.0)
    return kg


def make_cyclic_stream(n_events=600, n_pois=6, cycle=(0, 1, 2), start=1_600_000_000.0):
    """One user walking a fixed POI cycle after touching every POI once.

    The prologue visits put the distractor POIs into the catalog (so the
    candidate set is larger than the cycle), then the user settles into
    the cycle. POIs sit ~1.1 km apart on a diagonal, each in its own grid
    zone, each with a distinct category from the toy vocabulary.
    """
    records = []
    prologue = [p for p in range(n_pois) if p not in cycle]
    for l in range(n_events):
        if l < len(prologue):
            p = prologue[l]
        else:
            p = cycle[(l - len(prologue)) % len(cycle)]
        records.append(_synth_record("u0", p, start + 3600.0 * l))
    return records


def _synth_record(user, poi_idx, ts):
    return CheckInRecord(
        user=user,
        venue=f"v{poi_idx}",
        category_id=f"c{poi_idx % len(CYCLE_CATEGORIES)}",
        category_name=CYCLE_CATEGORIES[poi_idx % len(CYCLE_CATEGORIES)],
        lat=40.70 + 0.01 * poi_idx,
        lon=-74.00 + 0.01 * poi_idx,
        timestamp=ts,
    )


def make_drifting_stream(
    n_events=700,
    n_users=20,
    n_clusters=6,
    pois_per_cluster=5,
    drift_at=0.4,
    p_prefer=0.85,
    seed=99,
    start=1_600_000_000.0,
):
    """Mixed-user stream where each user's preferred POI cluster switches.

    Clusters are spatially tight (one zone each) and categorically pure,
    so tracking a user's current cluster is what category precision
    measures. The switch happens at ``drift_at`` of the stream.
    """
    rng = np.random.default_rng(seed)
    n_pois = n_clusters * pois_per_cluster
    pref_before = rng.integers(n_clusters, size=n_users)
    shift = rng.integers(1, n_clusters, size=n_users)
    pref_after = (pref_before + shift) % n_clusters
    records = []
    for l in range(n_events):
        u = int(rng.integers(n_users))
        pref = pref_before[u] if l < drift_at * n_events else pref_after[u]
        if rng.random() < p_prefer:
            p = int(pref) * pois_per_cluster + int(rng.integers(pois_per_cluster))
        else:
            p = int(rng.integers(n_pois))
        cluster = p // pois_per_cluster
        records.append(
            CheckInRecord(
                user=f"u{u}",
                venue=f"v{p}",
                category_id=f"c{cluster}",
                category_name=CLUSTER_CATEGORIES[cluster],
                lat=40.0 + 0.1 * cluster + 0.002 * (p % pois_per_cluster),
                lon=-74.0 + 0.002 * (p % pois_per_cluster),
                timestamp=start + 600.0 * l,
            )
        )
    return records
