"""Molecule structures, descriptor vocabularies and label tables.

Structures come in as SDF V2000 text (usually PubChem 3D records). Perceptual
labels come in as a normalized CSV per dataset::

    cid,descriptors
    126,"medicinal;woody"

and are merged into a joint table whose columns are the concatenated
per-dataset descriptor vocabularies.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import os
import re
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import HttpFailure, MalformedRecord, MalformedRow, NoRecord

log = logging.getLogger(__name__)

DATASETS = ("leffingwell", "goodscents", "arctander", "flavornet")
REFERENCE_BLOCK_SIZES = (113, 377, 90, 74)
PUBCHEM_SDF_URL = "https://pubchem.ncbi.nlm.nih.gov/rest/pug/compound/cid/{cid}/SDF?record_type=3d"


class Element(enum.IntEnum):
    """Atom classes; the value of the first six is the voxel channel."""

    C = 0
    H = 1
    O = 2  # noqa: E741
    N = 3
    S = 4
    Cl = 5
    Other = 6

    @classmethod
    def from_symbol(cls, symbol: str) -> "Element":
        return _SYMBOLS.get(symbol.strip().lower(), cls.Other)


_SYMBOLS = {e.name.lower(): e for e in Element if e is not Element.Other}
N_CHANNELS = 6


@dataclass(frozen=True)
class Atom:
    element: Element
    position: tuple[float, float, float]


@dataclass
class Molecule:
    cid: int
    atoms: list[Atom]
    name: str | None = None

    def __post_init__(self):
        for a in self.atoms:
            if not all(np.isfinite(a.position)):
                raise ValueError(f"non-finite coordinate in molecule {self.cid}")

    def __len__(self):
        return len(self.atoms)

    @property
    def coords(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms], dtype=np.float64).reshape(-1, 3)

    @property
    def elements(self) -> np.ndarray:
        return np.array([int(a.element) for a in self.atoms], dtype=np.int64)

    @classmethod
    def from_arrays(cls, cid, elements, coords, name=None) -> "Molecule":
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        atoms = [
            Atom(Element(int(e)), (float(x), float(y), float(z)))
            for e, (x, y, z) in zip(elements, coords)
        ]
        return cls(cid=cid, atoms=atoms, name=name)

    def without_atom(self, index: int) -> "Molecule":
        return Molecule(self.cid, self.atoms[:index] + self.atoms[index + 1:], self.name)


# ---------------------------------------------------------------------------
# SDF / XYZ
# ---------------------------------------------------------------------------

def iter_sdf_records(text: str) -> Iterator[str]:
    """Split a multi-record SDF on ``$$$$`` terminators."""
    chunk: list[str] = []
    for line in text.splitlines():
        if line.strip() == "$$$$":
            if any(l.strip() for l in chunk):
                yield "\n".join(chunk)
            chunk = []
        else:
            chunk.append(line)
    if any(l.strip() for l in chunk):
        yield "\n".join(chunk)


def parse_sdf(text: str) -> Molecule:
    """Parse the first record of a V2000 SDF/MOL text.

    Line numbers in errors are 1-based and refer to the record.
    """
    lines = text.splitlines()
    if len(lines) < 4:
        raise MalformedRecord("record shorter than header + counts line", line=len(lines) + 1)
    name = lines[0].strip()
    counts = lines[3]
    if "V3000" in counts:
        raise MalformedRecord("V3000 connection tables are not supported (V2000 only)", line=4)
    try:
        n_atoms = int(counts[0:3])
    except ValueError:
        tokens = counts.split()
        try:
            n_atoms = int(tokens[0])
        except (IndexError, ValueError):
            raise MalformedRecord(f"bad counts line {counts!r}", line=4) from None
    if n_atoms < 1:
        raise MalformedRecord(f"atom count {n_atoms} < 1", line=4)
    if len(lines) < 4 + n_atoms:
        raise MalformedRecord(
            f"atom block truncated: expected {n_atoms} atoms, found {len(lines) - 4}",
            line=len(lines) + 1,
        )
    atoms = []
    for i in range(n_atoms):
        lineno = 5 + i
        tokens = lines[4 + i].split()
        if len(tokens) < 4:
            raise MalformedRecord(f"short atom line {lines[4 + i]!r}", line=lineno)
        try:
            xyz = tuple(float(t) for t in tokens[:3])
        except ValueError:
            raise MalformedRecord(f"unparseable coordinate in {lines[4 + i]!r}", line=lineno) from None
        if not all(np.isfinite(xyz)):
            raise MalformedRecord("non-finite coordinate", line=lineno)
        atoms.append(Atom(Element.from_symbol(tokens[3]), xyz))
    cid = int(name) if re.fullmatch(r"\d+", name) else 0
    return Molecule(cid=cid, atoms=atoms, name=name or None)


def write_sdf(mol: Molecule) -> str:
    """Minimal V2000 writer (atoms only, no bonds)."""
    out = [str(mol.cid) if mol.cid else (mol.name or ""), "  deepnose", ""]
    out.append(f"{len(mol.atoms):3d}  0  0  0  0  0  0  0  0  0999 V2000")
    for a in mol.atoms:
        sym = "X" if a.element is Element.Other else a.element.name
        x, y, z = a.position
        out.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {sym:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
    out += ["M  END", "$$$$", ""]
    return "\n".join(out)


def write_xyz(mol: Molecule) -> str:
    """Debug text format; coordinates use ``repr`` so reparsing is bit-exact."""
    out = [str(len(mol.atoms)), f"cid={mol.cid} name={mol.name or ''}"]
    for a in mol.atoms:
        out.append(" ".join([a.element.name] + [repr(float(c)) for c in a.position]))
    return "\n".join(out) + "\n"


def parse_xyz(text: str) -> Molecule:
    lines = text.splitlines()
    try:
        n = int(lines[0])
    except (IndexError, ValueError):
        raise MalformedRecord("bad atom count", line=1) from None
    meta = dict(kv.split("=", 1) for kv in lines[1].split(" ") if "=" in kv)
    atoms = []
    for i in range(n):
        tokens = lines[2 + i].split()
        atoms.append(Atom(Element[tokens[0]], tuple(float(t) for t in tokens[1:4])))
    return Molecule(cid=int(meta.get("cid", 0)), atoms=atoms, name=meta.get("name") or None)


def load_structures(cache_dir, cids: Iterable[int]) -> tuple[dict[int, Molecule], list[int]]:
    """Load ``<cache_dir>/<cid>.sdf`` for each cid; returns (molecules, missing cids)."""
    cache_dir = Path(cache_dir)
    found, missing = {}, []
    for cid in cids:
        path = cache_dir / f"{cid}.sdf"
        if not path.exists():
            missing.append(cid)
            continue
        try:
            mol = parse_sdf(path.read_text())
        except MalformedRecord as exc:
            log.warning("cid %s: %s", cid, exc)
            missing.append(cid)
            continue
        mol.cid = cid
        found[cid] = mol
    return found, missing


# ---------------------------------------------------------------------------
# Vocabulary and labels
# ---------------------------------------------------------------------------

def normalize_descriptor(word: str) -> str:
    return " ".join(word.strip().lower().split())


@dataclass(frozen=True)
class DescriptorVocabulary:
    blocks: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.blocks) != len(DATASETS):
            raise ValueError(f"expected {len(DATASETS)} dataset blocks, got {len(self.blocks)}")
        for name, block in zip(DATASETS, self.blocks):
            if len(set(block)) != len(block):
                raise ValueError(f"duplicate descriptors in {name} block")
        object.__setattr__(self, "_index", [{w: i for i, w in enumerate(b)} for b in self.blocks])

    @classmethod
    def from_lists(cls, lists: Sequence[Iterable[str]]) -> "DescriptorVocabulary":
        blocks = []
        for words in lists:
            seen: dict[str, None] = {}
            for w in words:
                seen.setdefault(normalize_descriptor(w), None)
            blocks.append(tuple(seen))
        return cls(tuple(blocks))

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(b) for b in self.blocks)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    def __len__(self):
        return sum(self.sizes)

    def block_slice(self, dataset: int) -> slice:
        off = self.offsets[dataset]
        return slice(off, off + self.sizes[dataset])

    def column(self, dataset: int, word: str) -> int | None:
        i = self._index[dataset].get(normalize_descriptor(word))
        return None if i is None else self.offsets[dataset] + i

    def descriptor_names(self) -> list[tuple[str, str]]:
        """(dataset, descriptor) for every global column."""
        return [(DATASETS[d], w) for d, block in enumerate(self.blocks) for w in block]

    def column_dataset(self) -> np.ndarray:
        return np.repeat(np.arange(len(DATASETS)), self.sizes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "descriptor"])
        for ds, word in self.descriptor_names():
            w.writerow([ds, word])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DescriptorVocabulary":
        lists: list[list[str]] = [[] for _ in DATASETS]
        for row in csv.DictReader(io.StringIO(text)):
            lists[DATASETS.index(row["dataset"])].append(row["descriptor"])
        return cls.from_lists(lists)


def dataset_index(dataset) -> int:
    if isinstance(dataset, (int, np.integer)):
        if not 0 <= dataset < len(DATASETS):
            raise ValueError(f"dataset index {dataset} out of range")
        return int(dataset)
    return DATASETS.index(dataset.lower())


def _read_label_rows(text: str):
    reader = csv.reader(io.StringIO(text), strict=True)
    try:
        header = next(reader)
    except StopIteration:
        return
    except csv.Error as exc:
        raise MalformedRow(str(exc), line=1) from None
    if [h.strip().lower() for h in header] != ["cid", "descriptors"]:
        raise MalformedRow(f"expected header 'cid,descriptors', got {header!r}", line=1)
    while True:
        try:
            row = next(reader)
        except StopIteration:
            return
        except csv.Error as exc:
            raise MalformedRow(str(exc), line=reader.line_num) from None
        if not row:
            continue
        if len(row) != 2:
            raise MalformedRow(f"expected 2 fields, got {len(row)}", line=reader.line_num)
        try:
            cid = int(row[0])
        except ValueError:
            raise MalformedRow(f"non-integer cid {row[0]!r}", line=reader.line_num) from None
        if cid <= 0:
            raise MalformedRow(f"cid must be positive, got {cid}", line=reader.line_num)
        words = [normalize_descriptor(w) for w in row[1].split(";")]
        yield cid, [w for w in words if w]


def vocabulary_from_label_csvs(texts: dict) -> DescriptorVocabulary:
    """Build a vocabulary from the descriptors actually used, sorted per dataset.

    ``texts`` maps dataset name or index to CSV text; absent datasets get
    empty blocks.
    """
    lists: list[set[str]] = [set() for _ in DATASETS]
    for ds, text in texts.items():
        for _, words in _read_label_rows(text):
            lists[dataset_index(ds)].update(words)
    return DescriptorVocabulary(tuple(tuple(sorted(s)) for s in lists))


@dataclass
class LabelTable:
    """Binary labels over the global vocabulary plus a dataset-presence mask."""

    vocab: DescriptorVocabulary
    cids: list[int]
    labels: np.ndarray  # [n, len(vocab)] uint8
    dataset_mask: np.ndarray  # [n, 4] bool
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.cids)

    def row_of(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.cids)}

    def label_mask(self) -> np.ndarray:
        """Per-column mask expanded from the dataset mask; [n, len(vocab)] uint8."""
        return self.dataset_mask[:, self.vocab.column_dataset()].astype(np.uint8)

    def subset(self, cids: Iterable[int]) -> "LabelTable":
        idx = self.row_of()
        rows = [idx[c] for c in cids]
        return LabelTable(self.vocab, [self.cids[r] for r in rows],
                          self.labels[rows], self.dataset_mask[rows])

    def check(self):
        """Assert the table invariants; raises ValueError on violation."""
        if len(self) and not self.dataset_mask.any(axis=1).all():
            raise ValueError("row with no dataset present")
        if (self.labels.astype(bool) & ~self.label_mask().astype(bool)).any():
            raise ValueError("labels set inside an absent dataset block")


def parse_labels_csv(text: str, dataset, vocab: DescriptorVocabulary) -> LabelTable:
    """Parse one dataset's normalized label CSV into a partial table.

    Descriptors absent from ``vocab`` are skipped and reported in
    ``table.warnings``.
    """
    d = dataset_index(dataset)
    rows: dict[int, set[int]] = {}
    warnings = []
    for cid, words in _read_label_rows(text):
        bits = rows.setdefault(cid, set())
        for w in words:
            col = vocab.column(d, w)
            if col is None:
                warnings.append(f"cid {cid}: descriptor {w!r} not in {DATASETS[d]} vocabulary")
            else:
                bits.add(col)
    cids = list(rows)
    labels = np.zeros((len(cids), len(vocab)), dtype=np.uint8)
    for i, cid in enumerate(cids):
        labels[i, sorted(rows[cid])] = 1
    mask = np.zeros((len(cids), len(DATASETS)), dtype=bool)
    mask[:, d] = True
    return LabelTable(vocab, cids, labels, mask, warnings)


def merge_label_tables(tables: Sequence[LabelTable]) -> LabelTable:
    """OR-merge partial tables by cid; rows come out sorted by cid."""
    if not tables:
        raise ValueError("nothing to merge")
    vocab = tables[0].vocab
    if any(t.vocab != vocab for t in tables):
        raise ValueError("tables use different vocabularies")
    cids = sorted({c for t in tables for c in t.cids})
    pos = {c: i for i, c in enumerate(cids)}
    labels = np.zeros((len(cids), len(vocab)), dtype=np.uint8)
    mask = np.zeros((len(cids), len(DATASETS)), dtype=bool)
    warnings = []
    for t in tables:
        rows = [pos[c] for c in t.cids]
        np.bitwise_or.at(labels, rows, t.labels)
        np.logical_or.at(mask, rows, t.dataset_mask)
        warnings += t.warnings
    return LabelTable(vocab, cids, labels, mask, warnings)


def load_label_dir(label_dir, vocab: DescriptorVocabulary | None = None):
    """Read ``<label_dir>/<dataset>.csv`` for whichever datasets exist.

    Returns (merged table, vocabulary). Without an explicit vocabulary one is
    built from the files (``vocab.csv`` in the directory wins if present).
    """
    label_dir = Path(label_dir)
    texts = {ds: (label_dir / f"{ds}.csv").read_text(encoding="utf-8")
             for ds in DATASETS if (label_dir / f"{ds}.csv").exists()}
    if not texts:
        raise FileNotFoundError(f"no <dataset>.csv label files in {label_dir}")
    if vocab is None:
        vfile = label_dir / "vocab.csv"
        vocab = (DescriptorVocabulary.from_csv(vfile.read_text(encoding="utf-8"))
                 if vfile.exists() else vocabulary_from_label_csvs(texts))
    tables = [parse_labels_csv(t, ds, vocab) for ds, t in texts.items()]
    return merge_label_tables(tables), vocab


# ---------------------------------------------------------------------------
# PubChem
# ---------------------------------------------------------------------------

@dataclass
class FetchReport:
    written: list[int] = field(default_factory=list)
    cached: list[int] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)


def fetch_pubchem_sdf(cid: int, cache_dir, *, allow_network: bool = False,
                      endpoint: str = PUBCHEM_SDF_URL, timeout: float = 30.0,
                      urlopen: Callable = urllib.request.urlopen) -> str:
    """Return SDF text for ``cid``, from ``<cache_dir>/<cid>.sdf`` when cached."""
    if not isinstance(cid, (int, np.integer)) or cid <= 0:
        raise ValueError(f"cid must be a positive integer, got {cid!r}")
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{cid}.sdf"
    if path.exists():
        return path.read_text()
    if not allow_network:
        raise HttpFailure(f"cid {cid} not cached and network access is disabled")
    url = endpoint.format(cid=cid)
    try:
        with urlopen(url, timeout=timeout) as resp:
            status = getattr(resp, "status", 200)
            body = resp.read()
    except urllib.error.HTTPError as exc:
        raise HttpFailure(f"cid {cid}: HTTP {exc.code}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise HttpFailure(f"cid {cid}: {exc}") from None
    if status != 200:
        raise HttpFailure(f"cid {cid}: HTTP {status}")
    text = body.decode("utf-8", errors="replace")
    if not text.strip():
        raise NoRecord(f"cid {cid}: empty response")
    cache_dir.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{cid}.", suffix=".tmp", dir=cache_dir)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return text


def fetch_batch(cids: Iterable[int], cache_dir, **kwargs) -> FetchReport:
    """Fetch many cids; failures are collected per cid and never abort the batch."""
    report = FetchReport()
    cache_dir = Path(cache_dir)
    for cid in cids:
        if (cache_dir / f"{cid}.sdf").exists():
            report.cached.append(cid)
            continue
        try:
            fetch_pubchem_sdf(cid, cache_dir, **kwargs)
        except (HttpFailure, NoRecord, ValueError) as exc:
            report.failures[cid] = str(exc)
        else:
            report.written.append(cid)
    return report
