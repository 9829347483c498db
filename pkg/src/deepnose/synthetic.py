"""Synthetic molecules and label tables for tests, demos and smoke runs.

Nothing here is chemistry-grade; the structures are random-walk skeletons
with plausible bond lengths so that voxel rasters look molecule-like.
"""

from __future__ import annotations

import numpy as np

from .molecule_io import DATASETS, DescriptorVocabulary, Element, LabelTable, Molecule

_HEAVY = [Element.C, Element.O, Element.N, Element.S, Element.Cl]


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_molecule(rng: np.random.Generator, n_heavy: int = 8, cid: int = 1,
                    hetero: dict | None = None, hydrogens: bool = True) -> Molecule:
    """Random-walk heavy-atom skeleton (1.5 A bonds) with hydrogens attached."""
    probs = hetero or {Element.O: 0.12, Element.N: 0.08, Element.S: 0.04, Element.Cl: 0.04}
    elements, coords = [Element.C], [np.zeros(3)]
    while len(coords) < n_heavy:
        parent = rng.integers(len(coords))
        pos = coords[parent] + 1.5 * _unit(rng)
        if min(np.linalg.norm(pos - c) for c in coords) < 1.2:
            continue
        r = rng.random()
        el = Element.C
        for e, p in probs.items():
            if r < p:
                el = e
                break
            r -= p
        elements.append(el)
        coords.append(pos)
    if hydrogens:
        heavy = list(coords)
        for c in heavy:
            for _ in range(int(rng.integers(0, 3))):
                pos = c + 1.1 * _unit(rng)
                if min(np.linalg.norm(pos - h) for h in coords) >= 1.0:
                    elements.append(Element.H)
                    coords.append(pos)
    return Molecule.from_arrays(cid, elements, np.array(coords))


def chiral_center(cid: int = 1) -> Molecule:
    """A tetrahedral center with four distinct substituents (C; H, O, N, Cl)."""
    tet = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / np.sqrt(3)
    bonds = np.array([1.1, 1.43, 1.47, 1.77])
    coords = np.vstack([[0, 0, 0], tet * bonds[:, None]])
    # a methyl-like tail on the nitrogen makes the shape less symmetric
    tail = coords[3] + 1.5 * np.array([-0.2, 0.9, -0.4]) / np.linalg.norm([-0.2, 0.9, -0.4])
    coords = np.vstack([coords, tail])
    els = [Element.C, Element.H, Element.O, Element.N, Element.Cl, Element.C]
    return Molecule.from_arrays(cid, els, coords)


def mirror(mol: Molecule) -> Molecule:
    """Enantiomer: reflect through the yz-plane."""
    c = mol.coords.copy()
    c[:, 0] = -c[:, 0]
    return Molecule.from_arrays(mol.cid, mol.elements, c, mol.name)


def placeholder_vocabulary(sizes=(113, 377, 90, 74)) -> DescriptorVocabulary:
    return DescriptorVocabulary(tuple(tuple(f"{ds}_{i:03d}" for i in range(n))
                                      for ds, n in zip(DATASETS, sizes)))


def union_label_table(rng: np.random.Generator, n_union: int = 6821,
                      dataset_sizes=(3366, 4205, 2814, 716),
                      vocab: DescriptorVocabulary | None = None,
                      mean_labels=(4.0, 4.5, 3.5, 3.0)) -> LabelTable:
    """Random joint table with overlapping dataset membership and Zipf-like
    descriptor frequencies, sized like the four olfactory datasets."""
    vocab = vocab or placeholder_vocabulary()
    cids = np.arange(1, n_union + 1) * 7 + 100
    mask = np.zeros((n_union, len(DATASETS)), dtype=bool)
    # every molecule lands in at least one dataset; remaining slots overlap at random
    for d, size in enumerate(dataset_sizes):
        mask[rng.choice(n_union, size=size, replace=False), d] = True
    uncovered = np.flatnonzero(~mask.any(axis=1))
    for r in uncovered:
        mask[r, int(np.argmax(dataset_sizes))] = True
    labels = np.zeros((n_union, len(vocab)), dtype=np.uint8)
    for d in range(len(DATASETS)):
        sl = vocab.block_slice(d)
        width = sl.stop - sl.start
        if width == 0:
            continue
        freq = 1.0 / np.arange(1, width + 1) ** 0.8
        freq = rng.permutation(freq / freq.sum())
        for r in np.flatnonzero(mask[:, d]):
            m = min(width, max(1, rng.poisson(mean_labels[d])))
            labels[r, sl.start + rng.choice(width, size=m, replace=False, p=freq)] = 1
    return LabelTable(vocab, [int(c) for c in cids], labels, mask)


# Descriptor rules for the learnable toy task: each is a function of structure.
TOY_RULES = {
    "sulfurous": lambda m: (m.elements == Element.S).any(),
    "chlorinated": lambda m: (m.elements == Element.Cl).any(),
    "nitrogenous": lambda m: (m.elements == Element.N).any(),
    "oxygenated": lambda m: (m.elements == Element.O).sum() >= 2,
    "bulky": lambda m: (m.elements != Element.H).sum() >= 10,
    "elongated": lambda m: np.ptp(m.coords @ np.linalg.svd(m.coords - m.coords.mean(0))[2][0]) > 6.0,
}


def toy_task(rng: np.random.Generator, n: int = 120, dataset: str = "flavornet"):
    """Molecules plus labels that are deterministic functions of structure.

    Returns (molecules, LabelTable) with every molecule present in one dataset.
    """
    d = DATASETS.index(dataset)
    words = list(TOY_RULES)
    lists = [[] for _ in DATASETS]
    lists[d] = words
    vocab = DescriptorVocabulary.from_lists(lists)
    mols, labels = [], np.zeros((n, len(vocab)), dtype=np.uint8)
    hetero = {Element.O: 0.15, Element.N: 0.1, Element.S: 0.08, Element.Cl: 0.08}
    for i in range(n):
        mol = random_molecule(rng, int(rng.integers(5, 14)), cid=1000 + i, hetero=hetero)
        mols.append(mol)
        for j, w in enumerate(words):
            labels[i, vocab.column(d, w)] = bool(TOY_RULES[w](mol))
    mask = np.zeros((n, len(DATASETS)), dtype=bool)
    mask[:, d] = True
    return mols, LabelTable(vocab, [m.cid for m in mols], labels, mask)


def write_toy_dataset(root, rng: np.random.Generator, n: int = 60, dataset: str = "flavornet"):
    """Materialize ``toy_task`` as ``<root>/data/<dataset>.csv`` plus an SDF cache in ``<root>/cache``."""
    from pathlib import Path

    from .molecule_io import write_sdf

    root = Path(root)
    (root / "data").mkdir(parents=True, exist_ok=True)
    (root / "cache").mkdir(parents=True, exist_ok=True)
    mols, table = toy_task(rng, n, dataset)
    words = table.vocab.blocks[DATASETS.index(dataset)]
    sl = table.vocab.block_slice(DATASETS.index(dataset))
    lines = ["cid,descriptors"]
    for cid, row in zip(table.cids, table.labels[:, sl]):
        lines.append(f"{cid},{';'.join(w for w, v in zip(words, row) if v)}")
    (root / "data" / f"{dataset}.csv").write_text("\n".join(lines) + "\n")
    for m in mols:
        (root / "cache" / f"{m.cid}.sdf").write_text(write_sdf(m))
    return mols, table
