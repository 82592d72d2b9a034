"""Moment-matrix layouts for the NPA relaxations of the CHSH scenario.

Only outcome-0 projectors appear, so operator strings reduce with two rules:
Alice's and Bob's operators commute (A-letters move left) and projectors are
idempotent (adjacent repeats collapse).  Moments of a string and of its
adjoint are identified, as the moment matrix is real symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import bell

LEVELS = ("Q1", "Q1AB", "Q2", "Q3")

IDENTITY, PHYSICAL, FREE = 0, 1, 2
CLASS_NAMES = ("identity", "physical", "free")


def _collapse(seq) -> tuple[int, ...]:
    out: list[int] = []
    for c in seq:
        if not out or out[-1] != c:
            out.append(c)
    return tuple(out)


@dataclass(frozen=True, order=True)
class MomentString:
    """Product of Alice's projectors ``A_{a[0]} A_{a[1]} ...`` times Bob's."""

    a: tuple[int, ...] = ()
    b: tuple[int, ...] = ()

    @classmethod
    def make(cls, a=(), b=()) -> "MomentString":
        return cls(_collapse(a), _collapse(b))

    @classmethod
    def parse(cls, text: str) -> "MomentString":
        if text in ("", "I"):
            return cls()
        a, b = [], []
        for i in range(0, len(text), 2):
            party, x = text[i], int(text[i + 1])
            (a if party == "A" else b).append(x)
        return cls.make(a, b)

    def adjoint(self) -> "MomentString":
        return MomentString(self.a[::-1], self.b[::-1])

    def moment_key(self) -> "MomentString":
        """Representative shared by the string and its adjoint."""
        return min(self, self.adjoint())

    def __len__(self) -> int:
        return len(self.a) + len(self.b)

    def is_physical(self) -> bool:
        return len(self.a) <= 1 and len(self.b) <= 1

    def __str__(self) -> str:
        if not self.a and not self.b:
            return "I"
        return "".join(f"A{x}" for x in self.a) + "".join(f"B{y}" for y in self.b)


def canonical_product(s: MomentString, t: MomentString) -> MomentString:
    """Canonical form of s^dagger t."""
    return MomentString.make(s.a[::-1] + t.a, s.b[::-1] + t.b)


def _strings_up_to(length: int) -> list[MomentString]:
    seen = {MomentString()}
    frontier = [MomentString()]
    for _ in range(length):
        nxt = []
        for s in frontier:
            for letter in ((0, None), (1, None), (None, 0), (None, 1)):
                x, y = letter
                t = MomentString.make(s.a + ((x,) if x is not None else ()),
                                      s.b + ((y,) if y is not None else ()))
                if t not in seen:
                    seen.add(t)
                    nxt.append(t)
        frontier = nxt
    return sorted(seen, key=lambda s: (len(s), -len(s.a), s.a, s.b))


def parse_level(level: str) -> str:
    tag = str(level).upper()
    if tag == "Q1AB":
        return tag
    if tag.startswith("Q") and tag[1:].isdigit() and int(tag[1:]) >= 1:
        return tag
    raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")


def generating_set(level: str) -> list[MomentString]:
    tag = parse_level(level)
    if tag == "Q1AB":
        single = _strings_up_to(1)
        return single + [MomentString((x,), (y,)) for x in (0, 1) for y in (0, 1)]
    return _strings_up_to(int(tag[1:]))


# NsParams order: <A0>, <A1>, <B0>, <B1>, <A0B0>, <A0B1>, <A1B0>, <A1B1>
PHYSICAL_MOMENTS = (
    MomentString((0,), ()), MomentString((1,), ()),
    MomentString((), (0,)), MomentString((), (1,)),
    MomentString((0,), (0,)), MomentString((0,), (1,)),
    MomentString((1,), (0,)), MomentString((1,), (1,)),
)


@dataclass(frozen=True, eq=False)
class MomentLayout:
    """Symbolic structure of a moment matrix.

    ``kind[i, j]`` is IDENTITY, PHYSICAL or FREE and ``index[i, j]`` the
    physical moment (0..7) or free moment number.  ``cell_source`` indexes
    into the per-instance value vector ``[1, v8..., z...]`` so assembly is a
    single gather.
    """

    level: str
    strings: tuple[MomentString, ...]
    kind: np.ndarray
    index: np.ndarray
    free_moments: tuple[MomentString, ...]
    fixed_positions: dict = field(repr=False)
    free_positions: dict = field(repr=False)
    cell_source: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.strings)

    @property
    def free_count(self) -> int:
        return len(self.free_moments)

    def entry_class(self, i: int, j: int) -> tuple[str, int]:
        return CLASS_NAMES[self.kind[i, j]], int(self.index[i, j])

    def dump(self) -> str:
        """Text listing, one cell per line as ``i,j,class,index``."""
        lines = [f"# level {self.level}",
                 "# strings " + " ".join(str(s) for s in self.strings),
                 "# free " + " ".join(str(s) for s in self.free_moments)]
        for i in range(self.m):
            for j in range(self.m):
                lines.append(f"{i},{j},{CLASS_NAMES[self.kind[i, j]]},{self.index[i, j]}")
        return "\n".join(lines) + "\n"


@lru_cache(maxsize=None)
def build_layout(level: str) -> MomentLayout:
    tag = parse_level(level)
    strings = tuple(generating_set(tag))
    m = len(strings)
    kind = np.zeros((m, m), dtype=np.intp)
    idx = np.zeros((m, m), dtype=np.intp)
    physical = {s: k for k, s in enumerate(PHYSICAL_MOMENTS)}
    free: dict[MomentString, int] = {}
    fixed_pos: dict[int, list] = {k: [] for k in range(8)}
    free_pos: dict[int, list] = {}
    for i in range(m):
        for j in range(i, m):
            key = canonical_product(strings[i], strings[j]).moment_key()
            if len(key) == 0:
                c, k = IDENTITY, 0
            elif key.is_physical():
                c, k = PHYSICAL, physical[key]
                fixed_pos[k].append((i, j))
            else:
                c, k = FREE, free.setdefault(key, len(free))
                free_pos.setdefault(k, []).append((i, j))
            kind[i, j] = kind[j, i] = c
            idx[i, j] = idx[j, i] = k
    source = np.where(kind == IDENTITY, 0, np.where(kind == PHYSICAL, 1 + idx, 9 + idx))
    for a in (kind, idx, source):
        a.flags.writeable = False
    return MomentLayout(tag, strings, kind, idx, tuple(free), fixed_pos, free_pos, source)


def moment_value(k: int, b) -> float:
    """Physical moment ``k`` in NsParams order read off a behavior."""
    if not 0 <= k < 8:
        raise ValueError(f"physical moment index must be in 0..7, got {k}")
    return float(bell.extract_params(bell._as_probs(b))[k])


def constraint_values(b) -> np.ndarray:
    """v = (1, <A0>, <A1>, <B0>, <B1>, <A0B0>, <A0B1>, <A1B0>, <A1B1>), batched over rows."""
    v8 = np.atleast_2d(bell.extract_params(bell._as_probs(b)))
    out = np.concatenate([np.ones((v8.shape[0], 1)), v8], axis=1)
    return out[0] if np.ndim(bell._as_probs(b)) == 1 else out


def assemble_primal(layout: MomentLayout, b, z) -> np.ndarray:
    """Moment matrix with physical cells from ``b`` and free cells from ``z``.

    Accepts one behavior with ``z`` of length ``free_count`` or batches
    ``(n, 16)`` and ``(n, free_count)``; returns ``(m, m)`` or ``(n, m, m)``.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != layout.free_count:
        raise ValueError(f"expected {layout.free_count} free values, got {z.shape[-1]}")
    v = constraint_values(b)
    single = v.ndim == 1 and z.ndim == 1
    v, z = np.atleast_2d(v), np.atleast_2d(z)
    if v.shape[0] != z.shape[0]:
        v = np.broadcast_to(v, (z.shape[0], 9)) if v.shape[0] == 1 else v
        z = np.broadcast_to(z, (v.shape[0], z.shape[1])) if z.shape[0] == 1 else z
    w = np.concatenate([v, z], axis=1)
    g = w[:, layout.cell_source]
    return g[0] if single else g


DUAL_BASES = ("cell", "moment")


@dataclass(frozen=True)
class DualForm:
    """Which constraint set the dual matrix is built from.

    ``"moment"`` has one constraint per distinct moment, weighted evenly over
    its tied cells (9 dual variables).  Those sums alone admit a PSD matrix
    for every behavior, so that dual can never be strictly certified.
    ``"cell"`` fixes every non-free cell separately and equates the tied
    cells of each free moment, which is the exact alternative to the primal.
    """
    basis: str = "cell"
    norm_constraint: bool = True

    def __post_init__(self):
        if self.basis not in DUAL_BASES:
            raise ValueError(f"dual basis must be one of {DUAL_BASES}")


DEFAULT_DUAL = DualForm()


def _cell(m: int, i: int, j: int) -> np.ndarray:
    E = np.zeros((m, m))
    if i == j:
        E[i, i] = 1.0
    else:
        E[i, j] = E[j, i] = 0.5
    return E


def constraint_basis(layout: MomentLayout, norm_constraint: bool = True,
                     basis: str = "moment") -> tuple[np.ndarray, np.ndarray]:
    """Constraint matrices ``F`` and free-moment indicators ``G``.

    With ``basis="moment"`` ``F[k]`` (k = 0..8) spreads weight evenly over
    every cell of constraint ``k`` so that ``<F_k, Gamma> = v_k``.  With
    ``basis="cell"`` there is one matrix per fixed upper-triangle cell
    (``<F, Gamma>`` is that entry), followed by differences between the first
    and each further cell of every free moment.  Without the normalization
    constraint the identity cell is dropped.
    """
    DualForm(basis)
    m = layout.m
    G = np.zeros((layout.free_count, m, m))
    for j in range(layout.free_count):
        G[j][(layout.kind == FREE) & (layout.index == j)] = 1.0
    if basis == "moment":
        F = np.zeros((9, m, m))
        F[0][layout.kind == IDENTITY] = 1.0
        for k in range(8):
            F[k + 1][(layout.kind == PHYSICAL) & (layout.index == k)] = 1.0
        F /= F.sum(axis=(1, 2), keepdims=True)
        if not norm_constraint:
            F = F[1:]
        return F, G
    cells = [(i, j) for i in range(m) for j in range(i, m) if layout.kind[i, j] != FREE]
    if not norm_constraint:
        cells = cells[1:]
    Fs = [_cell(m, i, j) for i, j in cells]
    for j in range(layout.free_count):
        first, *rest = layout.free_positions[j]
        Fs += [_cell(m, *first) - _cell(m, *c) for c in rest]
    return np.array(Fs), G


def dual_values(layout: MomentLayout, b, form: DualForm = DEFAULT_DUAL) -> np.ndarray:
    """Right-hand sides ``v_k = <F_k, Gamma(b, .)>`` of the dual constraints, batched."""
    F, _ = _basis(layout, form)
    probs = bell._as_probs(b)
    G0 = assemble_primal(layout, probs, np.zeros(layout.free_count))
    return np.einsum("kij,...ij->...k", F, G0)


def assemble_dual(layout: MomentLayout, b, y, delta: float = 3e-7,
                  form: DualForm = DEFAULT_DUAL) -> np.ndarray:
    """Block matrix diag(-sum_k y_k F_k, sum_k y_k v_k - delta).

    ``y`` has :func:`dual_size` entries.  Batched like :func:`assemble_primal`.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    F, _ = _basis(layout, form)
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != F.shape[0]:
        raise ValueError(f"expected {F.shape[0]} dual variables, got {y.shape[-1]}")
    v = dual_values(layout, b, form)
    single = v.ndim == 1 and y.ndim == 1
    v, y = np.atleast_2d(v), np.atleast_2d(y)
    n = max(v.shape[0], y.shape[0])
    m = layout.m
    out = np.zeros((n, m + 1, m + 1))
    out[:, :m, :m] = -np.tensordot(y, F, axes=1)
    out[:, m, m] = (y * v).sum(axis=1) - delta
    return out[0] if single else out


@lru_cache(maxsize=None)
def _basis(layout: MomentLayout, form: DualForm = DEFAULT_DUAL) -> tuple[np.ndarray, np.ndarray]:
    F, G = constraint_basis(layout, form.norm_constraint, form.basis)
    F.flags.writeable = False
    G.flags.writeable = False
    return F, G


def dual_size(layout: MomentLayout, form: DualForm = DEFAULT_DUAL) -> int:
    """Number of dual variables: 9 (or 8) for the moment basis, fixed cells plus tie equalities for the cell basis."""
    return _basis(layout, form)[0].shape[0]
