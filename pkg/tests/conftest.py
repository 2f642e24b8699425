import hashlib
import json
import os
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

from dualdis.data import Manifest, SyntheticSpec, generate_synthetic, split

CACHE_ROOT = Path(os.environ.get("DUALDIS_TEST_CACHE", Path(__file__).parent / ".cache"))

# The canonical desk-scale dataset every training-based test shares.
DESK_DATA = dict(samples_per_class=300, seed=11, test_fraction=0.2, val_fraction=0.2)


def dataset_key(params: dict) -> str:
    return hashlib.sha1(json.dumps(params, sort_keys=True).encode()).hexdigest()[:12]


def materialize_dataset(params: dict) -> Manifest:
    out = CACHE_ROOT / f"data_{dataset_key(params)}"
    man_path = out / "manifest.csv"
    if man_path.exists():
        return Manifest.load(man_path)
    spec = SyntheticSpec(samples_per_class=params["samples_per_class"], seed=params["seed"])
    manifest = generate_synthetic(spec, out)
    manifest = split(manifest, params["test_fraction"], params["val_fraction"], params["seed"])
    manifest.save(man_path)
    return manifest


@pytest.fixture(scope="session")
def desk_manifest() -> Manifest:
    return materialize_dataset(DESK_DATA)


@pytest.fixture(scope="session")
def tiny_manifest() -> Manifest:
    return materialize_dataset(dict(samples_per_class=24, seed=5, test_fraction=0.2, val_fraction=0.2))
