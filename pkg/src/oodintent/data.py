"""CLINC-style dataset ingestion, word-embedding tables, and utterance encoding.

Loaders run single-threaded; everything they return is treated as immutable
and is safe to share read-only across workers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataLoadError

logger = logging.getLogger(__name__)

OOD_LABEL = "oos"
OOD_CLASS = -1
NUM_INTENTS = 150

SPLIT_KEYS = ("train", "val", "test", "oos_train", "oos_val", "oos_test")

# (in-domain count, out-of-domain count) per split for the published variants
_EXPECTED_COUNTS = {
    "full": {"train": (15000, 100), "val": (3000, 100), "test": (4500, 1000)},
    "small": {"train": (7500, 100), "val": (3000, 100), "test": (4500, 1000)},
}


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, split on whitespace, strip punctuation off token edges."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            out.append(tok)
    return tuple(out)


@dataclass(frozen=True)
class Utterance:
    text: str
    tokens: tuple[str, ...]
    label: str


def make_utterance(text: str, label: str) -> Utterance:
    return Utterance(text=text, tokens=tokenize(text), label=label)


@dataclass(frozen=True)
class SplitData:
    """One train/val/test split, with in-domain and OOD utterances kept apart."""

    ind: tuple[Utterance, ...]
    ood: tuple[Utterance, ...]


@dataclass(frozen=True)
class DatasetBundle:
    train: SplitData
    val: SplitData
    test: SplitData
    intent_names: tuple[str, ...]
    variant: str

    def split(self, name: str) -> SplitData:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def label_map(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.intent_names)}


@dataclass
class EmbeddingTable:
    dimension: int
    vectors: dict[str, np.ndarray]
    skipped_lines: int = 0

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def _read_pairs(raw: dict, key: str) -> list[tuple[str, str]]:
    entries = raw[key]
    if not isinstance(entries, list):
        raise DataLoadError(f"split {key!r} is not a list")
    pairs = []
    for i, entry in enumerate(entries):
        if not (isinstance(entry, list) and len(entry) == 2 and all(isinstance(e, str) for e in entry)):
            raise DataLoadError(f"split {key!r} entry {i} is not a [text, label] pair")
        pairs.append((entry[0], entry[1]))
    return pairs


def load_clinc(path, variant: str, *, fixture: bool = False) -> DatasetBundle:
    """Load a CLINC-schema JSON file into a DatasetBundle.

    The file must hold the six split keys, each a list of [text, label]
    pairs; `oos_*` entries are relabeled with the OOD marker. In production
    mode the in-domain intent count must be exactly 150 and the split sizes
    must match the published statistics for `variant`; `fixture=True`
    relaxes both checks for synthetic miniature datasets.
    """
    variant_key = variant.lower()
    if not fixture and variant_key not in _EXPECTED_COUNTS:
        raise DataLoadError(f"unknown variant {variant!r}; expected 'full' or 'small'")
    p = Path(path)
    if not p.is_file():
        raise DataLoadError(f"dataset file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataLoadError(f"malformed JSON in {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataLoadError(f"top level of {p} is not an object")
    missing = [k for k in SPLIT_KEYS if k not in raw]
    if missing:
        raise DataLoadError(f"missing split keys: {', '.join(missing)}")

    parsed: dict[str, list[tuple[str, str]]] = {}
    for key in SPLIT_KEYS:
        pairs = _read_pairs(raw, key)
        if not pairs:
            raise DataLoadError(f"empty split: {key!r}")
        parsed[key] = pairs

    ind_labels = sorted({label for key in ("train", "val", "test") for _, label in parsed[key]})
    if OOD_LABEL in ind_labels:
        raise DataLoadError(
            f"in-domain split contains the reserved OOD marker {OOD_LABEL!r} as a label"
        )
    if not fixture and len(ind_labels) != NUM_INTENTS:
        raise DataLoadError(
            f"expected {NUM_INTENTS} in-domain intents, found {len(ind_labels)}"
        )

    splits = {}
    for name in ("train", "val", "test"):
        ind = tuple(make_utterance(t, l) for t, l in parsed[name])
        ood = tuple(make_utterance(t, OOD_LABEL) for t, _ in parsed[f"oos_{name}"])
        if not fixture:
            want_ind, want_ood = _EXPECTED_COUNTS[variant_key][name]
            if len(ind) != want_ind:
                raise DataLoadError(
                    f"{name}: expected {want_ind} in-domain utterances for "
                    f"variant {variant_key!r}, found {len(ind)}"
                )
            if len(ood) != want_ood:
                raise DataLoadError(
                    f"oos_{name}: expected {want_ood} OOD utterances, found {len(ood)}"
                )
        splits[name] = SplitData(ind=ind, ood=ood)

    return DatasetBundle(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        intent_names=tuple(ind_labels),
        variant=variant_key,
    )


def load_embeddings(path, dimension: int) -> EmbeddingTable:
    """Load a plain-text embedding table: `token v1 ... v_d` per line.

    Lines with the wrong number of fields or non-finite values are skipped
    and counted; a file with zero parseable lines is an error.
    """
    if dimension < 1:
        raise ValueError(f"dimension must be positive, got {dimension}")
    p = Path(path)
    if not p.is_file():
        raise DataLoadError(f"embedding file not found: {p}")
    vectors: dict[str, np.ndarray] = {}
    skipped = 0
    with p.open(encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != dimension + 1:
                skipped += 1
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                skipped += 1
                continue
            if not np.all(np.isfinite(vec)):
                skipped += 1
                continue
            vectors[parts[0]] = vec
    if not vectors:
        raise DataLoadError(f"no parseable embedding lines in {p}")
    if skipped:
        logger.warning("skipped %d malformed embedding lines in %s", skipped, p)
    return EmbeddingTable(dimension=dimension, vectors=vectors, skipped_lines=skipped)


def encode_utterance(utt: Utterance, table: EmbeddingTable) -> np.ndarray:
    """Mean of the embedding vectors of in-vocabulary tokens (zeros if none)."""
    hits = [table.vectors[t] for t in utt.tokens if t in table.vectors]
    if not hits:
        return np.zeros(table.dimension, dtype=np.float64)
    return np.mean(hits, axis=0)


def encode_utterances(utts, table: EmbeddingTable) -> np.ndarray:
    """Stack encode_utterance over a sequence into an (n, dimension) matrix."""
    if len(utts) == 0:
        return np.zeros((0, table.dimension), dtype=np.float64)
    return np.stack([encode_utterance(u, table) for u in utts])


def label_array(utts, label_map: dict[str, int]) -> np.ndarray:
    """Class indices for a sequence of utterances; OOD marker maps to OOD_CLASS."""
    out = np.empty(len(utts), dtype=np.int64)
    for i, u in enumerate(utts):
        if u.label == OOD_LABEL:
            out[i] = OOD_CLASS
        else:
            try:
                out[i] = label_map[u.label]
            except KeyError:
                raise ValueError(f"unknown intent label {u.label!r}") from None
    return out


def subsample_ood_train(bundle: DatasetBundle, n: int, seed: int) -> DatasetBundle:
    """Replace the OOD training set with a uniform size-n subset (per seed)."""
    pool = bundle.train.ood
    if n < 0 or n > len(pool):
        raise ValueError(f"cannot sample {n} OOD utterances from a pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return DatasetBundle(
        train=SplitData(ind=bundle.train.ind, ood=tuple(pool[i] for i in idx)),
        val=bundle.val,
        test=bundle.test,
        intent_names=bundle.intent_names,
        variant=bundle.variant,
    )


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit sub-seed for a named random stream."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
