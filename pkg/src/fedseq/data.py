"""Corpus handling: parsing, vocabularies, sharding, splits, and synthesis.

Two on-disk example formats are supported: a one-hot CSV (one symptom column
per feature, final column the disease label) and a plain-text pair format
(space-separated symptom names, a tab, then the disease name).  Token ids
0..3 are reserved in both vocabularies for pad/start/end/unknown.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

from .seeding import subseed

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
START_TOKEN = "<start>"
END_TOKEN = "<end>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN)
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3

TRAIN_FRACTION = 0.8


class DataError(Exception):
    """Base class for corpus-level failures."""


class FormatError(DataError):
    """A file's contents violate its declared format."""


class ConfigurationError(DataError):
    """Requested sizes or counts are mutually inconsistent."""


class DatasetTooSmallError(DataError):
    """Too few examples for the requested operation."""


@dataclass(frozen=True)
class SymptomDiseasePair:
    """One raw example: observed symptom names and the diagnosed disease."""

    symptoms: tuple[str, ...]
    disease: str

    def __post_init__(self):
        if len(self.symptoms) < 1:
            raise DataError("an example needs at least one symptom")
        if len(set(self.symptoms)) != len(self.symptoms):
            dupes = sorted({s for s in self.symptoms if self.symptoms.count(s) > 1})
            raise DataError(f"duplicate symptoms in one example: {dupes}")
        if not self.disease:
            raise DataError("an example needs a disease label")


@dataclass(frozen=True)
class TokenizedPair:
    """Id form of one example: start/end-wrapped symptoms and target triple."""

    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    """Token/id maps for the symptom (input) and disease (output) sides."""

    input_tokens: tuple[str, ...]
    output_tokens: tuple[str, ...]

    def __post_init__(self):
        for side in (self.input_tokens, self.output_tokens):
            if side[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
                raise ConfigurationError("vocabulary must start with the reserved tokens")
            if len(set(side)) != len(side):
                raise ConfigurationError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_input_ids", {t: i for i, t in enumerate(self.input_tokens)})
        object.__setattr__(self, "_output_ids", {t: i for i, t in enumerate(self.output_tokens)})

    @property
    def input_size(self) -> int:
        return len(self.input_tokens)

    @property
    def output_size(self) -> int:
        return len(self.output_tokens)

    def input_id(self, token: str) -> int:
        return self._input_ids.get(token, UNK_ID)

    def output_id(self, token: str) -> int:
        return self._output_ids.get(token, UNK_ID)

    def input_token(self, token_id: int) -> str:
        return self.input_tokens[token_id]

    def output_token(self, token_id: int) -> str:
        return self.output_tokens[token_id]

    def save(self, path: Path | str) -> None:
        payload = {"input": list(self.input_tokens), "output": list(self.output_tokens)}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Vocab":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(tuple(payload["input"]), tuple(payload["output"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: not a vocabulary file ({exc})") from exc


def build_vocab(pairs: Sequence[SymptomDiseasePair]) -> Vocab:
    """Assign ids 4.. to distinct tokens in lexicographic order."""
    if not pairs:
        raise DatasetTooSmallError("cannot build a vocabulary from zero examples")
    symptoms = sorted({s for p in pairs for s in p.symptoms})
    diseases = sorted({p.disease for p in pairs})
    return Vocab(RESERVED_TOKENS + tuple(symptoms), RESERVED_TOKENS + tuple(diseases))


def tokenize(pair: SymptomDiseasePair, vocab: Vocab) -> TokenizedPair:
    """Wrap symptom ids in start/end; targets are (start, disease, end)."""
    input_ids = (START_ID, *(vocab.input_id(s) for s in pair.symptoms), END_ID)
    target_ids = (START_ID, vocab.output_id(pair.disease), END_ID)
    return TokenizedPair(input_ids=input_ids, target_ids=target_ids)


def detokenize_input(ids: Sequence[int], vocab: Vocab) -> list[str]:
    return [vocab.input_token(i) for i in ids]


def detokenize_output(ids: Sequence[int], vocab: Vocab) -> list[str]:
    return [vocab.output_token(i) for i in ids]


# ---------------------------------------------------------------------------
# file formats


def parse_onehot_csv(path: Path | str) -> tuple[list[SymptomDiseasePair], int]:
    """Read a one-hot CSV; returns (pairs, count of skipped zero-symptom rows).

    The header names one symptom per column with the disease label last.
    Cells must be 0 or 1; anything else is a format error naming the row and
    column.  Rows with no active symptom are skipped with a warning.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2:
            raise FormatError(f"{path}: header needs at least one symptom column and a label")
        symptom_names = header[:-1]
        if len(set(symptom_names)) != len(symptom_names):
            dupes = sorted({n for n in symptom_names if symptom_names.count(n) > 1})
            raise FormatError(f"{path}: duplicate symptom columns: {dupes}")
        pairs: list[SymptomDiseasePair] = []
        skipped = 0
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: row {row_number} has {len(row)} cells, header has {len(header)}"
                )
            active: list[str] = []
            for name, cell in zip(symptom_names, row[:-1]):
                value = cell.strip()
                if value == "1":
                    active.append(name)
                elif value != "0":
                    raise FormatError(
                        f"{path}: row {row_number}, column {name!r}: expected 0 or 1, got {cell!r}"
                    )
            disease = row[-1].strip()
            if not disease:
                raise FormatError(f"{path}: row {row_number}: empty disease label")
            if not active:
                skipped += 1
                continue
            pairs.append(SymptomDiseasePair(symptoms=tuple(active), disease=disease))
    if skipped:
        logger.warning("%s: skipped %d rows with no active symptom", path, skipped)
    return pairs, skipped


def parse_text_pairs(path: Path | str) -> list[SymptomDiseasePair]:
    """Read the text pair format: symptoms separated by spaces, tab, disease."""
    path = Path(path)
    pairs: list[SymptomDiseasePair] = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise FormatError(f"{path}: line {line_number}: expected a tab before the disease")
        left, disease = line.split("\t", 1)
        symptoms = tuple(tok for tok in left.strip().split(" ") if tok)
        disease = disease.strip()
        if not symptoms or not disease:
            raise FormatError(f"{path}: line {line_number}: empty symptoms or disease")
        try:
            pairs.append(SymptomDiseasePair(symptoms=symptoms, disease=disease))
        except DataError as exc:
            raise FormatError(f"{path}: line {line_number}: {exc}") from exc
    return pairs


def write_text_pairs(path: Path | str, pairs: Sequence[SymptomDiseasePair]) -> None:
    lines = [" ".join(p.symptoms) + "\t" + p.disease for p in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------------------
# sharding and splits

Item = TypeVar("Item")


def shard(pairs: Sequence[Item], sizes: Sequence[int], seed: int) -> list[list[Item]]:
    """Seeded shuffle, then contiguous slices of the requested sizes."""
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigurationError(f"shard sizes must be positive, got {sizes}")
    if sum(sizes) != len(pairs):
        raise ConfigurationError(
            f"shard sizes sum to {sum(sizes)} but the corpus has {len(pairs)} examples"
        )
    order = np.random.default_rng(seed).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    shards: list[list[Item]] = []
    offset = 0
    for size in sizes:
        shards.append(shuffled[offset : offset + size])
        offset += size
    return shards


def split_train_test(
    pairs: Sequence[Item], train_fraction: float = TRAIN_FRACTION, seed: int = 0
) -> tuple[list[Item], list[Item]]:
    """Seeded shuffle, then split with |train| = round(train_fraction * n)."""
    n = len(pairs)
    if n < 2:
        raise DatasetTooSmallError(f"need at least 2 examples to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    cut = round(train_fraction * n)
    train = [pairs[i] for i in order[:cut]]
    test = [pairs[i] for i in order[cut:]]
    return train, test


@dataclass(frozen=True)
class ClientShard:
    """One client's private tokenized data, already split for training."""

    client_id: int
    train: tuple[TokenizedPair, ...]
    test: tuple[TokenizedPair, ...]


def make_client_shard(
    client_id: int,
    pairs: Sequence[SymptomDiseasePair],
    vocab: Vocab,
    seed: int,
    train_fraction: float = TRAIN_FRACTION,
) -> ClientShard:
    """Tokenize one client's raw pairs and split them deterministically."""
    train, test = split_train_test(pairs, train_fraction, seed)
    return ClientShard(
        client_id=client_id,
        train=tuple(tokenize(p, vocab) for p in train),
        test=tuple(tokenize(p, vocab) for p in test),
    )


# ---------------------------------------------------------------------------
# synthetic corpus


def synthesize_dataset(
    n_diseases: int = 41,
    n_symptoms: int = 132,
    n_samples: int = 4920,
    seed: int = 0,
) -> list[SymptomDiseasePair]:
    """Generate a learnable corpus of disease-specific symptom subsets.

    Each disease owns a small core of symptoms no other disease uses plus a
    slice of a shared noise pool, forming a characteristic set of 3..17
    symptoms.  Every sample keeps the full core (so the disease stays
    recoverable) and a random portion of its noise symptoms.
    """
    if n_diseases < 2:
        raise ConfigurationError("need at least 2 diseases")
    if n_samples < 1:
        raise ConfigurationError("need at least 1 sample")
    if n_symptoms < n_diseases + 2:
        raise ConfigurationError(
            f"need at least {n_diseases + 2} symptoms for {n_diseases} diseases"
        )
    rng = np.random.default_rng(seed)
    width = max(2, len(str(n_diseases - 1)))
    sym_width = max(3, len(str(n_symptoms - 1)))
    diseases = [f"disease_{i:0{width}d}" for i in range(n_diseases)]
    symptoms = [f"symptom_{j:0{sym_width}d}" for j in range(n_symptoms)]

    core_size = max(1, min(2, (n_symptoms - 2) // n_diseases))
    cores = {
        diseases[i]: symptoms[i * core_size : (i + 1) * core_size] for i in range(n_diseases)
    }
    pool = symptoms[n_diseases * core_size :]

    characteristic: dict[str, list[str]] = {}
    for disease in diseases:
        target = int(rng.integers(3, 18))
        want_noise = min(len(pool), max(1, target - core_size))
        chosen = rng.choice(len(pool), size=want_noise, replace=False)
        noise = [pool[i] for i in sorted(chosen)]
        characteristic[disease] = cores[disease] + noise

    pairs: list[SymptomDiseasePair] = []
    for _ in range(n_samples):
        disease = diseases[int(rng.integers(0, n_diseases))]
        core = cores[disease]
        noise = characteristic[disease][len(core) :]
        min_noise = max(1, 3 - len(core)) if noise else 0
        take = int(rng.integers(min_noise, len(noise) + 1)) if noise else 0
        chosen = rng.choice(len(noise), size=take, replace=False) if take else []
        sample = core + [noise[i] for i in sorted(chosen)]
        pairs.append(SymptomDiseasePair(symptoms=tuple(sample), disease=disease))
    return pairs


# ---------------------------------------------------------------------------
# dataset directory layout

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.json"


@dataclass(frozen=True)
class Dataset:
    """A prepared dataset directory loaded back into memory."""

    manifest: dict
    vocab: Vocab
    shards: list[list[SymptomDiseasePair]]

    @property
    def seed(self) -> int:
        return int(self.manifest["seed"])

    def client_shards(self, train_fraction: float | None = None) -> list[ClientShard]:
        fraction = (
            float(self.manifest.get("train_fraction", TRAIN_FRACTION))
            if train_fraction is None
            else train_fraction
        )
        return [
            make_client_shard(k, pairs, self.vocab, subseed(self.seed, f"split-{k}"), fraction)
            for k, pairs in enumerate(self.shards)
        ]


def write_dataset_dir(
    out_dir: Path | str,
    shards: Sequence[Sequence[SymptomDiseasePair]],
    vocab: Vocab,
    seed: int,
    source: str,
    skipped_rows: int = 0,
    train_fraction: float = TRAIN_FRACTION,
) -> dict:
    """Write shard files, the vocabulary, and the manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shard_files = []
    for k, pairs in enumerate(shards):
        name = f"client_{k}.txt"
        write_text_pairs(out / name, pairs)
        shard_files.append(name)
    vocab.save(out / VOCAB_NAME)
    manifest = {
        "seed": int(seed),
        "source": source,
        "num_clients": len(shards),
        "shard_sizes": [len(s) for s in shards],
        "num_pairs": int(sum(len(s) for s in shards)),
        "num_symptoms": vocab.input_size - len(RESERVED_TOKENS),
        "num_diseases": vocab.output_size - len(RESERVED_TOKENS),
        "train_fraction": train_fraction,
        "skipped_rows": int(skipped_rows),
        "vocab_file": VOCAB_NAME,
        "shard_files": shard_files,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_dataset_dir(data_dir: Path | str) -> Dataset:
    """Load a directory produced by ``write_dataset_dir``."""
    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"{root}: no {MANIFEST_NAME}; not a prepared dataset directory")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    vocab = Vocab.load(root / manifest.get("vocab_file", VOCAB_NAME))
    shards = [parse_text_pairs(root / name) for name in manifest["shard_files"]]
    sizes = [len(s) for s in shards]
    if sizes != list(manifest["shard_sizes"]):
        raise FormatError(
            f"{root}: shard files hold {sizes} examples, manifest says {manifest['shard_sizes']}"
        )
    return Dataset(manifest=manifest, vocab=vocab, shards=shards)
