"""Molecular graphs over the QM9 heavy-atom alphabet.

Atoms are categorical nodes (C=0, N=1, O=2, F=3) with implicit hydrogens;
bonds are categorical edges (none=0, single=1, double=2, triple=3) on a full
symmetric n x n grid. This module also holds the reduced SMILES reader and
writer, the canonical key used for uniqueness counting, and the valence
sanitizer used for validity.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class AtomKind(enum.IntEnum):
    C = 0
    N = 1
    O = 2  # noqa: E741
    F = 3


class BondKind(enum.IntEnum):
    NONE = 0
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3


N_ATOM_KINDS = 4
N_BOND_KINDS = 4
MAX_ATOMS = 9
MAX_VALENCE = {AtomKind.C: 4, AtomKind.N: 3, AtomKind.O: 2, AtomKind.F: 1}
_VALENCE_TABLE = np.array([4, 3, 2, 1])
_SYMBOL = {AtomKind.C: "C", AtomKind.N: "N", AtomKind.O: "O", AtomKind.F: "F"}
_BOND_SYMBOL = {BondKind.SINGLE: "", BondKind.DOUBLE: "=", BondKind.TRIPLE: "#"}


class SmilesError(ValueError):
    """Base class for SMILES parse failures."""


class UnknownAtom(SmilesError):
    pass


class UnmatchedRingBond(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class EmptyInput(SmilesError):
    pass


class KekulizationFailure(SmilesError):
    pass


class EmptySampleSet(ValueError):
    pass


class GraphInvariantError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MolGraph:
    """Immutable heavy-atom graph.

    ``nodes`` is an int array of AtomKind codes, ``edges`` an n x n int array
    of BondKind codes. Both arrays are made read-only on construction.
    """

    nodes: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=np.int8).reshape(-1)
        n = nodes.shape[0]
        edges = np.array(self.edges, dtype=np.int8).reshape(n, n) if n else np.zeros((0, 0), np.int8)
        if n < 1:
            raise GraphInvariantError("graph must have at least one atom")
        if nodes.min() < 0 or nodes.max() >= N_ATOM_KINDS:
            raise GraphInvariantError("atom code out of range")
        if edges.min() < 0 or edges.max() >= N_BOND_KINDS:
            raise GraphInvariantError("bond code out of range")
        if not np.array_equal(edges, edges.T):
            raise GraphInvariantError("edge matrix is not symmetric")
        if np.any(np.diag(edges) != 0):
            raise GraphInvariantError("edge matrix has a non-zero diagonal")
        nodes.flags.writeable = False
        edges.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

    @property
    def n(self) -> int:
        return int(self.nodes.shape[0])

    @classmethod
    def from_bonds(cls, atoms: Sequence[int], bonds: Iterable[tuple[int, int, int]]) -> "MolGraph":
        n = len(atoms)
        edges = np.zeros((n, n), dtype=np.int8)
        for i, j, order in bonds:
            edges[i, j] = edges[j, i] = order
        return cls(np.asarray(atoms), edges)

    def permute(self, perm: Sequence[int]) -> "MolGraph":
        """Relabel so that new node ``k`` is old node ``perm[k]``."""
        p = np.asarray(perm)
        return MolGraph(self.nodes[p], self.edges[np.ix_(p, p)])

    def bond_orders(self) -> np.ndarray:
        return self.edges.astype(np.int64).sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, MolGraph):
            return NotImplemented
        return np.array_equal(self.nodes, other.nodes) and np.array_equal(self.edges, other.edges)

    def __hash__(self):
        return hash((self.nodes.tobytes(), self.edges.tobytes()))

    def __repr__(self):
        return f"MolGraph({write_smiles(self)!r}, n={self.n})"


# --------------------------------------------------------------------------
# SMILES reader

_AROMATIC = 1.5  # placeholder order until kekulization
_ORGANIC = {"C": AtomKind.C, "N": AtomKind.N, "O": AtomKind.O, "F": AtomKind.F}
_AROMATIC_ORGANIC = {"c": AtomKind.C, "n": AtomKind.N, "o": AtomKind.O}
_BOND_CHARS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": _AROMATIC}


class _Builder:
    def __init__(self):
        self.kinds: list[int] = []
        self.aromatic: list[bool] = []
        self.hcount: list[int] = []
        self.bonds: dict[tuple[int, int], float] = {}

    def add_atom(self, kind, aromatic, hcount=0):
        self.kinds.append(int(kind))
        self.aromatic.append(aromatic)
        self.hcount.append(hcount)
        return len(self.kinds) - 1

    def bond(self, a, b, order):
        if a == b or (min(a, b), max(a, b)) in self.bonds:
            raise SmilesError(f"duplicate or self bond between atoms {a} and {b}")
        if order is None:
            order = _AROMATIC if self.aromatic[a] and self.aromatic[b] else 1.0
        self.bonds[(min(a, b), max(a, b))] = order


def _parse_bracket(text: str, pos: int, b: _Builder):
    end = text.find("]", pos)
    if end < 0:
        raise SmilesError(f"unterminated bracket atom at {pos}")
    body = text[pos + 1:end]
    i = 0
    while i < len(body) and body[i].isdigit():
        i += 1  # isotope, ignored
    sym = body[i:i + 1]
    i += 1
    if sym == "H":
        return None, end + 1
    if sym in _ORGANIC:
        kind, aromatic = _ORGANIC[sym], False
    elif sym in _AROMATIC_ORGANIC:
        kind, aromatic = _AROMATIC_ORGANIC[sym], True
    else:
        raise UnknownAtom(f"unsupported element {body!r}")
    while i < len(body) and body[i] == "@":
        i += 1  # chirality, ignored
    h = 0
    if i < len(body) and body[i] == "H":
        i += 1
        h = 1
        if i < len(body) and body[i].isdigit():
            h = int(body[i])
            i += 1
    if i != len(body):
        raise UnknownAtom(f"unsupported bracket atom [{body}] (charges are not supported)")
    return b.add_atom(kind, aromatic, h), end + 1


def _kekulize(b: _Builder, text: str):
    arom = [k for k, (ij, o) in enumerate(b.bonds.items()) if o == _AROMATIC]
    if not arom:
        return
    keys = list(b.bonds)
    # atoms needing one pi bond: free valence left after sigma bonds and explicit H
    sigma = Counter()
    explicit_pi = Counter()
    for (i, j), o in b.bonds.items():
        sigma[i] += 1
        sigma[j] += 1
        if o != _AROMATIC and o > 1:
            explicit_pi[i] += int(o) - 1
            explicit_pi[j] += int(o) - 1
    needy = set()
    for a, is_arom in enumerate(b.aromatic):
        if not is_arom:
            continue
        free = int(_VALENCE_TABLE[b.kinds[a]]) - sigma[a] - b.hcount[a] - explicit_pi[a]
        if free >= 1 and explicit_pi[a] == 0:
            needy.add(a)
    candidates = [keys[k] for k in arom if keys[k][0] in needy and keys[k][1] in needy]
    adj: dict[int, list[tuple[int, int]]] = {a: [] for a in needy}
    for i, j in candidates:
        adj[i].append((j, 0))
        adj[j].append((i, 0))

    matched: dict[int, int] = {}

    def solve(pending: list[int]) -> bool:
        while pending and pending[0] in matched:
            pending = pending[1:]
        if not pending:
            return True
        a = pending[0]
        for nb, _ in adj[a]:
            if nb in matched:
                continue
            matched[a] = nb
            matched[nb] = a
            if solve(pending[1:]):
                return True
            del matched[a]
            del matched[nb]
        return False

    order = sorted(needy, key=lambda a: (len(adj[a]), a))
    if not solve(order):
        raise KekulizationFailure(f"cannot assign alternating bonds in {text!r}")
    for k in arom:
        i, j = keys[k]
        b.bonds[(i, j)] = 2.0 if matched.get(i) == j else 1.0


def parse_smiles(text: str) -> MolGraph:
    """Parse the supported SMILES subset into a heavy-atom graph.

    Supported: organic-subset atoms C/N/O/F (and aromatic c/n/o), bracket
    atoms of those elements with optional H counts, bonds ``- = # :``,
    branches, ring closures ``1-9`` and ``%nn``, and ``.`` fragments.
    """
    if text is None or not text.strip():
        raise EmptyInput("empty SMILES")
    text = text.strip()
    b = _Builder()
    prev: int | None = None
    pending_bond: float | None = None
    stack: list[int | None] = []
    rings: dict[int, tuple[int, float | None]] = {}
    pos = 0
    while pos < len(text):
        ch = text[pos]
        atom = None
        if ch == "[":
            atom, pos = _parse_bracket(text, pos, b)
            if atom is None:  # explicit hydrogen atom: drop it and its bond
                pending_bond = None
                continue
        elif ch in "CNOF" or ch in "cno":
            if ch == "C" and text[pos:pos + 2] == "Cl":
                raise UnknownAtom("unsupported element 'Cl'")
            if ch in _ORGANIC:
                atom = b.add_atom(_ORGANIC[ch], False)
            else:
                atom = b.add_atom(_AROMATIC_ORGANIC[ch], True)
            pos += 1
        elif ch in _BOND_CHARS:
            if pending_bond is not None or prev is None:
                raise SmilesError(f"misplaced bond symbol at {pos}")
            pending_bond = _BOND_CHARS[ch]
            pos += 1
            continue
        elif ch == "(":
            if prev is None:
                raise UnbalancedParenthesis(f"branch without an anchor atom at {pos}")
            stack.append(prev)
            pos += 1
            continue
        elif ch == ")":
            if not stack:
                raise UnbalancedParenthesis(f"unexpected ')' at {pos}")
            prev = stack.pop()
            pos += 1
            continue
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise UnmatchedRingBond(f"ring bond without an atom at {pos}")
            if ch == "%":
                digits = text[pos + 1:pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError(f"bad %nn ring label at {pos}")
                label = int(digits)
                pos += 3
            else:
                label = int(ch)
                pos += 1
            if label in rings:
                other, other_bond = rings.pop(label)
                if pending_bond is not None and other_bond is not None and pending_bond != other_bond:
                    raise SmilesError(f"conflicting ring bond orders for label {label}")
                b.bond(other, prev, pending_bond if pending_bond is not None else other_bond)
            else:
                rings[label] = (prev, pending_bond)
            pending_bond = None
            continue
        elif ch == ".":
            if pending_bond is not None:
                raise SmilesError("bond symbol before '.'")
            prev = None
            pos += 1
            continue
        elif ch.isalpha():
            raise UnknownAtom(f"unsupported element starting at {text[pos:pos + 2]!r}")
        else:
            raise SmilesError(f"unexpected character {ch!r} at {pos}")

        if prev is not None:
            b.bond(prev, atom, pending_bond)
        elif pending_bond is not None:
            raise SmilesError("bond symbol without a preceding atom")
        pending_bond = None
        prev = atom

    if stack:
        raise UnbalancedParenthesis(f"{len(stack)} unclosed branch(es) in {text!r}")
    if rings:
        raise UnmatchedRingBond(f"unclosed ring label(s) {sorted(rings)} in {text!r}")
    if pending_bond is not None:
        raise SmilesError("dangling bond symbol")
    if not b.kinds:
        raise EmptyInput("no heavy atoms")
    _kekulize(b, text)
    return MolGraph.from_bonds(b.kinds, [(i, j, int(o)) for (i, j), o in b.bonds.items()])


# --------------------------------------------------------------------------
# SMILES writer

def write_smiles(g: MolGraph) -> str:
    """Kekulé SMILES with explicit ring-closure digits; fragments joined by '.'."""
    n = g.n
    adj = [[j for j in range(n) if g.edges[i, j]] for i in range(n)]
    seen = [False] * n
    fragments = []
    for root in range(n):
        if seen[root]:
            continue
        # first pass: DFS tree to find ring-closure edges
        parent = {root: -1}
        order = []
        closures: dict[int, list[int]] = {}
        stack = [root]
        visiting = set()
        tree_children: dict[int, list[int]] = {i: [] for i in range(n)}

        def dfs(u):
            visiting.add(u)
            seen[u] = True
            order.append(u)
            for v in adj[u]:
                if v == parent[u]:
                    continue
                if v in visiting or seen[v]:
                    if order.index(v) < order.index(u):
                        closures.setdefault(v, []).append(u)
                        closures.setdefault(u, []).append(v)
                    continue
                parent[v] = u
                tree_children[u].append(v)
                dfs(v)

        del stack
        dfs(root)
        labels: dict[frozenset, int] = {}
        free = list(range(1, 100))

        def ring_token(label):
            return str(label) if label < 10 else f"%{label:02d}"

        def emit(u) -> str:
            out = [_SYMBOL[AtomKind(int(g.nodes[u]))]]
            for v in closures.get(u, []):
                key = frozenset((u, v))
                bond = _BOND_SYMBOL[BondKind(int(g.edges[u, v]))]
                if key in labels:
                    label = labels.pop(key)
                    out.append(bond + ring_token(label))
                    free.append(label)
                    free.sort()
                else:
                    label = free.pop(0)
                    labels[key] = label
                    out.append(bond + ring_token(label))
            kids = tree_children[u]
            for k, v in enumerate(kids):
                piece = _BOND_SYMBOL[BondKind(int(g.edges[u, v]))] + emit(v)
                out.append(piece if k == len(kids) - 1 else f"({piece})")
            return "".join(out)

        fragments.append(emit(root))
    return ".".join(fragments)


# --------------------------------------------------------------------------
# canonical labeling

def _refine(g: MolGraph, colors: list[int]) -> list[int]:
    """Iterate neighbourhood refinement until the partition stops splitting."""
    n = g.n
    while True:
        sigs = []
        for i in range(n):
            nb = sorted((int(g.edges[i, j]), colors[j]) for j in range(n) if g.edges[i, j])
            sigs.append((colors[i], tuple(nb)))
        ranking = {s: r for r, s in enumerate(sorted(set(sigs)))}
        new = [ranking[s] for s in sigs]
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def _twins(g: MolGraph, u: int, v: int) -> bool:
    mask = np.ones(g.n, dtype=bool)
    mask[[u, v]] = False
    return bool(np.array_equal(g.edges[u, mask], g.edges[v, mask]))


def _encode(g: MolGraph, order: Sequence[int]) -> bytes:
    p = np.asarray(order)
    e = g.edges[np.ix_(p, p)]
    iu = np.triu_indices(len(p), 1)
    return bytes([len(p)]) + g.nodes[p].astype(np.uint8).tobytes() + e[iu].astype(np.uint8).tobytes()


def canonical_key(g: MolGraph) -> bytes:
    """Permutation-invariant byte key; equal keys iff the graphs are isomorphic.

    Colour refinement seeded by atom type, then an individualisation search
    over every branch of the first non-singleton cell; the key is the
    lexicographically smallest encoding among the discrete leaves.
    """
    best: list[bytes] = []

    def search(colors: list[int]):
        colors = _refine(g, colors)
        if len(set(colors)) == g.n:
            order = sorted(range(g.n), key=lambda i: colors[i])
            code = _encode(g, order)
            if not best or code < best[0]:
                best[:] = [code]
            return
        counts = Counter(colors)
        target = min(c for c in counts if counts[c] > 1)
        cell = [v for v in range(g.n) if colors[v] == target]
        # swapping two twins is an automorphism, so one branch per twin class suffices
        reps: list[int] = []
        for v in cell:
            if not any(_twins(g, u, v) for u in reps):
                reps.append(v)
        for v in reps:
            # individualise v: give it a colour just below its cell
            split = [2 * c + (0 if (i == v) else 1) if c == target else 2 * c for i, c in enumerate(colors)]
            search(split)

    search([int(a) for a in g.nodes])
    return best[0]


# --------------------------------------------------------------------------
# validity / uniqueness

@dataclass(frozen=True)
class Validity:
    valid: bool
    reason: str | None = None

    def __bool__(self):
        return self.valid


def check_valid(g: MolGraph) -> Validity:
    orders = g.bond_orders()
    for i in range(g.n):
        kind = AtomKind(int(g.nodes[i]))
        cap = MAX_VALENCE[kind]
        if orders[i] > cap:
            return Validity(False, f"valence {orders[i]} > {cap} for {kind.name}")
    return Validity(True)


def validity_fraction(samples: Sequence[MolGraph]) -> float:
    if len(samples) == 0:
        raise EmptySampleSet("no samples to score")
    return sum(1 for g in samples if check_valid(g).valid) / len(samples)


def uniqueness_fraction(samples: Sequence[MolGraph]) -> float:
    """Distinct canonical keys over valid samples; 0.0 when none are valid."""
    if len(samples) == 0:
        raise EmptySampleSet("no samples to score")
    valid = [g for g in samples if check_valid(g).valid]
    if not valid:
        return 0.0
    return len({canonical_key(g) for g in valid}) / len(valid)


def read_smiles_file(path: str | Path) -> list[str]:
    """One SMILES per line; blank lines and '#' comments are skipped."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line.split()[0])
    return out
