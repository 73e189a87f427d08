import json

import numpy as np
import pytest

from oodintent import fixture


def make_clinc_raw(variant: str = "full") -> dict:
    """Synthetic dataset with the exact shape of the published benchmark."""
    intents = [f"intent_{i:03d}" for i in range(150)]
    per_train = 100 if variant == "full" else 50

    def entries(count, prefix):
        return [[f"{prefix} utterance {i} about {name}", name] for name in intents for i in range(count)]

    return {
        "train": entries(per_train, "tr"),
        "val": entries(20, "va"),
        "test": entries(30, "te"),
        "oos_train": [[f"odd tr request {i}", "oos"] for i in range(100)],
        "oos_val": [[f"odd va request {i}", "oos"] for i in range(100)],
        "oos_test": [[f"odd te request {i}", "oos"] for i in range(1000)],
    }


@pytest.fixture(scope="session")
def clinc_shaped_files(tmp_path_factory):
    """data_full.json / data_small.json with published split sizes."""
    root = tmp_path_factory.mktemp("clinc_shaped")
    paths = {}
    for variant in ("full", "small"):
        p = root / f"data_{variant}.json"
        p.write_text(json.dumps(make_clinc_raw(variant)), encoding="utf-8")
        paths[variant] = p
    return paths


@pytest.fixture(scope="session")
def blob_bundle():
    """Small in-memory blob dataset shared by training-oriented tests."""
    return fixture.build_bundle(num_classes=5, samples_per_class=20, ood_samples=30, seed=11)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Blob fixture written to disk in the CLINC schema."""
    out = tmp_path_factory.mktemp("fixture")
    fixture.write_fixture(out, num_classes=5, samples_per_class=20, ood_samples=30, seed=11)
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
