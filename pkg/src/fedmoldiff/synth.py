"""Synthetic QM9-profile molecules for fixtures and tests.

Random valence-respecting graphs over C/N/O/F with up to 9 heavy atoms,
3- to 6-membered rings and occasional multiple bonds. ``mu`` and ``homo``
are surrogate properties (a group-contribution formula plus seeded noise)
in Debye-like and Hartree-like ranges, standing in for the real QM9 values.
"""

import csv
from pathlib import Path

import numpy as np

from .molgraph import MAX_VALENCE, AtomKind, MolGraph, canonical_key, check_valid, parse_smiles, write_smiles

SINGLE_MOLECULE = ("CC(=O)NC", 3.71, -0.2427)
ATOM_P = np.array([0.70, 0.13, 0.14, 0.03])
SIZE_P = {3: 0.02, 4: 0.04, 5: 0.07, 6: 0.12, 7: 0.18, 8: 0.25, 9: 0.32}
FORBIDDEN = {frozenset((1, 3)), frozenset((2,)), frozenset((2, 3)), frozenset((3,))}

CORPUS_EXTRA = [
    "C", "N", "O", "C#C", "C#N", "C=O", "CC", "CO", "CC#C", "CC#N", "CC=O", "NC=O", "CCC", "CCO", "COC",
    "C1CC1", "C1CO1", "CC(C)=O", "CC(N)=O", "NC(N)=O", "O=C1CC1", "OC1CC1", "c1ccccc1", "Cc1ccccc1",
    "c1ccncc1", "c1cc[nH]c1", "c1ccoc1", "Oc1ccccc1", "Nc1ncco1", "Cc1ncc[nH]1", "O=c1cc[nH]cc1",
    "FC(F)F", "OCC#N", "N#CC1CC1", "CC12CC1C2", "C1CC2CCC12", "OC1COC1", "CC(C)(C)C#N", "C%10CC%10",
]


def random_molecule(rng: np.random.Generator) -> MolGraph | None:
    n = rng.choice(list(SIZE_P), p=list(SIZE_P.values()))
    atoms = [0] + list(rng.choice(4, size=n - 1, p=ATOM_P))
    cap = [MAX_VALENCE[AtomKind(a)] for a in atoms]
    used = [0] * n
    edges = np.zeros((n, n), dtype=np.int8)

    def allowed(i, j):
        return frozenset((atoms[i], atoms[j])) not in FORBIDDEN

    for i in range(1, n):
        hosts = [j for j in range(i) if used[j] < cap[j] and allowed(i, j)]
        if not hosts:
            return None
        j = int(rng.choice(hosts))
        free = min(cap[i] - used[i], cap[j] - used[j])
        order = rng.choice([1, 2, 3], p=[0.82, 0.13, 0.05])
        order = int(min(order, free))
        edges[i, j] = edges[j, i] = order
        used[i] += order
        used[j] += order
    # ring closures between atoms 2-5 bonds apart
    for _ in range(int(rng.choice([0, 1, 2], p=[0.45, 0.4, 0.15]))):
        dist = _distances(edges)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
                 if 2 <= dist[i, j] <= 5 and used[i] < cap[i] and used[j] < cap[j] and allowed(i, j)]
        if not pairs:
            break
        weights = np.array([1.0 + (dist[i, j] >= 4) * 2.0 for i, j in pairs])
        i, j = pairs[rng.choice(len(pairs), p=weights / weights.sum())]
        edges[i, j] = edges[j, i] = 1
        used[i] += 1
        used[j] += 1
    g = MolGraph(np.array(atoms), edges)
    return g if check_valid(g).valid else None


def _distances(edges):
    n = edges.shape[0]
    d = np.full((n, n), 99)
    for s in range(n):
        d[s, s] = 0
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for v in np.nonzero(edges[u])[0]:
                    if d[s, v] == 99:
                        d[s, v] = d[s, u] + 1
                        nxt.append(v)
            frontier = nxt
    return d


def surrogate_properties(g: MolGraph, rng: np.random.Generator) -> tuple[float, float]:
    counts = np.bincount(g.nodes, minlength=4)
    iu = np.triu_indices(g.n, 1)
    bonds = np.bincount(g.edges[iu], minlength=4)
    rings = bonds[1:].sum() - (g.n - 1)
    mu = 0.4 + 1.3 * counts[2] + 1.1 * counts[1] + 0.9 * counts[3] + 0.6 * bonds[3] - 0.2 * rings
    mu = abs(mu + rng.normal(0, 0.5))
    homo = -0.26 + 0.012 * bonds[2] + 0.008 * counts[1] - 0.006 * counts[3] + 0.004 * rings
    homo += rng.normal(0, 0.008)
    return round(float(mu), 4), round(float(homo), 5)


def generate(count: int, seed: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(seed)
    seen, rows = set(), []
    while len(rows) < count:
        g = random_molecule(rng)
        if g is None:
            continue
        key = canonical_key(g)
        if key in seen:
            continue
        seen.add(key)
        smi = write_smiles(g)
        assert canonical_key(parse_smiles(smi)) == key
        rows.append((smi, *surrogate_properties(g, rng)))
    return rows


def write_csv(path: Path, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", "mu", "homo"])
        w.writerows(rows)


def write_fixtures(out: str | Path, seed: int = 20240607, n_small: int = 2000, n_tiny: int = 100) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    small = generate(n_small, seed)
    write_csv(out / "qm9_small.csv", small)
    write_csv(out / "qm9_tiny.csv", generate(n_tiny, seed + 1))
    write_csv(out / "single_molecule.csv", [SINGLE_MOLECULE] * 256)
    corpus = CORPUS_EXTRA + [r[0] for r in small[:300]]
    (out / "smiles_corpus.txt").write_text(
        "# parser / canonicalisation corpus: hand-picked QM9-style SMILES, then generated ones\n"
        + "\n".join(corpus) + "\n", encoding="utf-8")
    return out
