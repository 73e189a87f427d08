"""Synthetic Gaussian-blob datasets in the CLINC file schema.

Each synthetic utterance is a single unique token whose embedding vector is
the sampled blob point, so mean-pooled encoding recovers the point exactly
and a miniature dataset plus embedding table drive fully offline
end-to-end runs. In-domain blobs sit on scaled coordinate axes; the OOD
blob sits at the origin, at least `center_scale` noise units away from
every in-domain centroid.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import (
    OOD_LABEL,
    DatasetBundle,
    EmbeddingTable,
    SplitData,
    make_utterance,
)


def _class_name(c: int) -> str:
    return f"intent_{c:03d}"


def make_blob_data(
    num_classes: int,
    samples_per_class: int,
    ood_samples: int,
    seed: int,
    center_scale: float = 8.0,
    noise: float = 1.0,
) -> tuple[dict[str, list[list[str]]], dict[str, np.ndarray], int]:
    """Raw CLINC-schema rows plus the token -> vector embedding map.

    The train split holds `samples_per_class` points per class; val and test
    hold ceil(samples_per_class / 2) each. All three `oos_*` splits hold
    `ood_samples` points. Deterministic per seed.
    """
    if min(num_classes, samples_per_class, ood_samples) < 1:
        raise ValueError("num_classes, samples_per_class, and ood_samples must be positive")
    dim = max(2, num_classes)
    rng = np.random.default_rng(seed)
    centers = np.zeros((num_classes, dim))
    for c in range(num_classes):
        centers[c, c] = center_scale

    eval_count = -(-samples_per_class // 2)
    counts = {"train": samples_per_class, "val": eval_count, "test": eval_count}

    rows: dict[str, list[list[str]]] = {key: [] for key in
                                        ("train", "val", "test", "oos_train", "oos_val", "oos_test")}
    embeddings: dict[str, np.ndarray] = {}
    counter = 0

    def emit(split: str, label: str, point: np.ndarray) -> None:
        nonlocal counter
        token = f"q{counter:06d}"
        counter += 1
        embeddings[token] = point
        rows[split].append([token, label])

    for split in ("train", "val", "test"):
        for c in range(num_classes):
            points = centers[c] + noise * rng.standard_normal((counts[split], dim))
            for p in points:
                emit(split, _class_name(c), p)
        ood_points = noise * rng.standard_normal((ood_samples, dim))
        for p in ood_points:
            emit(f"oos_{split}", OOD_LABEL, p)

    return rows, embeddings, dim


def build_bundle(
    num_classes: int,
    samples_per_class: int,
    ood_samples: int,
    seed: int,
    center_scale: float = 8.0,
    noise: float = 1.0,
) -> tuple[DatasetBundle, EmbeddingTable]:
    """In-memory bundle + table, identical to what write_fixture round-trips."""
    rows, embeddings, dim = make_blob_data(
        num_classes, samples_per_class, ood_samples, seed, center_scale, noise
    )
    splits = {}
    for name in ("train", "val", "test"):
        ind = tuple(make_utterance(t, l) for t, l in rows[name])
        ood = tuple(make_utterance(t, OOD_LABEL) for t, _ in rows[f"oos_{name}"])
        splits[name] = SplitData(ind=ind, ood=ood)
    intent_names = tuple(sorted({l for t, l in rows["train"]}))
    bundle = DatasetBundle(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        intent_names=intent_names,
        variant="fixture",
    )
    table = EmbeddingTable(dimension=dim, vectors=embeddings)
    return bundle, table


def write_fixture(
    out_dir,
    num_classes: int,
    samples_per_class: int,
    ood_samples: int,
    seed: int,
    center_scale: float = 8.0,
    noise: float = 1.0,
) -> tuple[Path, Path]:
    """Write data.json (CLINC schema) and embeddings.txt; byte-stable per seed."""
    rows, embeddings, _ = make_blob_data(
        num_classes, samples_per_class, ood_samples, seed, center_scale, noise
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "data.json"
    emb_path = out / "embeddings.txt"

    tmp = data_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(rows, indent=1), encoding="utf-8")
    tmp.replace(data_path)

    lines = [
        token + " " + " ".join(repr(float(v)) for v in vec)
        for token, vec in embeddings.items()
    ]
    tmp = emb_path.with_suffix(".txt.tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(emb_path)
    return data_path, emb_path
