"""Two-party binary Bell behaviors, the CHSH functional, relabelings and samplers.

A behavior is stored as a flat vector of 16 probabilities ``p(ab|xy)`` at
index ``8*x + 4*y + 2*a + b``, i.e. ``(x, y)`` outer and ``(a, b)`` inner in
lexicographic order.  Batches are ``(n, 16)`` arrays; the :class:`Behavior`
class wraps a single validated vector.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ATOL = 1e-12

COLUMNS = tuple(
    f"p{a}{b}x{x}y{y}"
    for x, y, a, b in itertools.product((0, 1), repeat=4)
)


def index(a: int, b: int, x: int, y: int) -> int:
    return 8 * x + 4 * y + 2 * a + b


class InvalidBehavior(ValueError):
    pass


def check_behaviors(p, atol: float = ATOL) -> None:
    """Raise :class:`InvalidBehavior` unless every row is a no-signaling distribution."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if p.shape[-1] != 16:
        raise InvalidBehavior(f"expected 16 probabilities per behavior, got {p.shape[-1]}")
    if not np.all(np.isfinite(p)):
        raise InvalidBehavior("non-finite probability")
    if np.any(p < -atol):
        raise InvalidBehavior(f"negative probability {p.min():.3e}")
    t = p.reshape(-1, 2, 2, 2, 2)  # x, y, a, b
    norm = t.sum(axis=(3, 4))
    if np.any(np.abs(norm - 1.0) > atol):
        raise InvalidBehavior("p(.|xy) does not sum to one")
    alice = t.sum(axis=4)  # x, y, a
    if np.any(np.abs(alice[:, :, 0] - alice[:, :, 1]) > atol):
        raise InvalidBehavior("Alice's marginal depends on y")
    bob = t.sum(axis=3)  # x, y, b
    if np.any(np.abs(bob[:, 0] - bob[:, 1]) > atol):
        raise InvalidBehavior("Bob's marginal depends on x")


@dataclass(frozen=True, eq=False)
class Behavior:
    """A validated joint conditional distribution p(ab|xy)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).reshape(16)
        check_behaviors(p)
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def __call__(self, a: int, b: int, x: int, y: int) -> float:
        return float(self.probs[index(a, b, x, y)])

    def __eq__(self, other):
        return isinstance(other, Behavior) and np.array_equal(self.probs, other.probs)

    __hash__ = None

    @classmethod
    def from_params(cls, v8) -> "Behavior":
        return cls(expand_params(v8))

    def params(self) -> np.ndarray:
        return extract_params(self.probs)

    def chsh(self) -> float:
        return float(chsh_value(self.probs))


def _as_probs(b) -> np.ndarray:
    if isinstance(b, Behavior):
        return b.probs
    return np.asarray(b, dtype=float)


# --- no-signaling parametrization -----------------------------------------

def _expansion_matrix():
    # p = P @ v8 + c, with v8 = (mA0, mA1, mB0, mB1, j00, j01, j10, j11)
    P = np.zeros((16, 8))
    c = np.zeros(16)
    for x, y in itertools.product((0, 1), repeat=2):
        j = 4 + 2 * x + y
        P[index(0, 0, x, y), j] = 1
        P[index(0, 1, x, y), [x, j]] = 1, -1
        P[index(1, 0, x, y), [2 + y, j]] = 1, -1
        P[index(1, 1, x, y), [x, 2 + y, j]] = -1, -1, 1
        c[index(1, 1, x, y)] = 1
    return P, c


EXPAND_P, EXPAND_C = _expansion_matrix()


def expand_params(v8) -> np.ndarray:
    """Map no-signaling parameters ``(mA0, mA1, mB0, mB1, j00, j01, j10, j11)`` to probabilities.

    The result is not validated; pass it to :class:`Behavior` or
    :func:`check_behaviors` when positivity matters.
    """
    v = np.asarray(v8, dtype=float)
    return v @ EXPAND_P.T + EXPAND_C


def extract_params(p) -> np.ndarray:
    t = _as_probs(p).reshape(-1, 2, 2, 2, 2)
    out = np.empty((t.shape[0], 8))
    out[:, 0:2] = t[:, :, 0, 0, :].sum(axis=-1)  # p(a=0|x) read at y=0
    out[:, 2:4] = t[:, 0, :, :, 0].sum(axis=-1)  # p(b=0|y) read at x=0
    out[:, 4:8] = t[:, :, :, 0, 0].reshape(-1, 4)
    if np.ndim(_as_probs(p)) == 1:
        return out[0]
    return out


# --- CHSH ------------------------------------------------------------------

_SIGN = np.array([1.0 if (a ^ b) == 0 else -1.0
                  for x, y, a, b in itertools.product((0, 1), repeat=4)])
_WEIGHT = np.array([-1.0 if (x and y) else 1.0
                    for x, y, a, b in itertools.product((0, 1), repeat=4)])
CHSH_VECTOR = _SIGN * _WEIGHT


def correlators(p) -> np.ndarray:
    """E_xy = sum_ab (-1)^(a xor b) p(ab|xy), shape (..., 2, 2)."""
    q = _as_probs(p)
    return (q * _SIGN).reshape(q.shape[:-1] + (2, 2, 4)).sum(axis=-1)


def chsh_value(p):
    """S = E00 + E01 + E10 - E11; a float for one behavior, an array for a batch."""
    q = _as_probs(p)
    s = q @ CHSH_VECTOR
    return float(s) if q.ndim == 1 else s


def pr_box() -> Behavior:
    p = np.zeros(16)
    for x, y, a, b in itertools.product((0, 1), repeat=4):
        if (a ^ b) == (x & y):
            p[index(a, b, x, y)] = 0.5
    return Behavior(p)


def uniform() -> Behavior:
    return Behavior(np.full(16, 0.25))


def deterministic(alice: tuple[int, int], bob: tuple[int, int]) -> Behavior:
    """Local deterministic strategy a = alice[x], b = bob[y]."""
    p = np.zeros(16)
    for x, y in itertools.product((0, 1), repeat=2):
        p[index(alice[x], bob[y], x, y)] = 1.0
    return Behavior(p)


def deterministic_vertices() -> list[Behavior]:
    return [deterministic((a0, a1), (b0, b1))
            for a0, a1, b0, b1 in itertools.product((0, 1), repeat=4)]


@lru_cache(maxsize=None)
def _facet_vertices() -> tuple[Behavior, ...]:
    return tuple(v for v in deterministic_vertices() if abs(v.chsh() - 2.0) < 1e-12)


def chsh_facet_vertices() -> list[Behavior]:
    """The 8 local deterministic vertices saturating S = 2."""
    return list(_facet_vertices())


def isotropic(q: float) -> Behavior:
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"mixing parameter must lie in [0, 1], got {q}")
    return Behavior(q * pr_box().probs + (1.0 - q) * 0.25)


def isotropic_batch(qs) -> np.ndarray:
    qs = np.asarray(qs, dtype=float)
    if np.any((qs < 0) | (qs > 1)):
        raise ValueError("mixing parameters must lie in [0, 1]")
    return qs[:, None] * pr_box().probs + (1.0 - qs[:, None]) * 0.25


# --- relabelings -------------------------------------------------------------

@dataclass(frozen=True)
class Relabeling:
    """Party swap, input flips and input-conditioned output flips.

    Applied in that order: the swap exchanges ``(a, x)`` with ``(b, y)``;
    then ``x -> x ^ flip_x`` and ``a -> a ^ flip_a_given_x[x]`` (with ``x``
    the pre-flip input), and likewise for Bob.
    """

    swap_parties: bool = False
    flip_x: bool = False
    flip_y: bool = False
    flip_a_given_x: tuple[bool, bool] = (False, False)
    flip_b_given_y: tuple[bool, bool] = (False, False)

    @property
    def perm(self) -> np.ndarray:
        return _perm(self)

    def apply(self, p):
        """Relabel one behavior or a batch; returns the same kind as given."""
        if isinstance(p, Behavior):
            return Behavior(p.probs[..., self.perm])
        return np.asarray(p)[..., self.perm]

    def compose(self, other: "Relabeling") -> "Relabeling":
        """The relabeling equal to applying ``other`` first, then ``self``."""
        return _from_perm(other.perm[self.perm])

    def inverse(self) -> "Relabeling":
        return _from_perm(np.argsort(self.perm))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(16)))


@lru_cache(maxsize=None)
def _perm(g: Relabeling) -> np.ndarray:
    # out = p[perm]: out[dst] = p[src]
    perm = np.empty(16, dtype=np.intp)
    for x, y, a, b in itertools.product((0, 1), repeat=4):
        src = index(a, b, x, y)
        if g.swap_parties:
            a, b, x, y = b, a, y, x
        a2 = a ^ int(g.flip_a_given_x[x])
        b2 = b ^ int(g.flip_b_given_y[y])
        perm[index(a2, b2, x ^ int(g.flip_x), y ^ int(g.flip_y))] = src
    perm.flags.writeable = False
    return perm


@lru_cache(maxsize=None)
def relabeling_group() -> tuple[Relabeling, ...]:
    """All 128 relabelings, identity first."""
    out = []
    for s, fx, fy, a0, a1, b0, b1 in itertools.product((False, True), repeat=7):
        out.append(Relabeling(s, fx, fy, (a0, a1), (b0, b1)))
    return tuple(out)


@lru_cache(maxsize=None)
def _group_perms() -> np.ndarray:
    return np.stack([g.perm for g in relabeling_group()])


def _from_perm(perm) -> Relabeling:
    hits = np.nonzero((_group_perms() == np.asarray(perm)).all(axis=1))[0]
    if len(hits) == 0:
        raise ValueError("permutation is not a relabeling")
    return relabeling_group()[hits[0]]


def canonicalize_batch(p, tol: float = ATOL) -> tuple[np.ndarray, np.ndarray]:
    """Relabel every row to maximize S.

    Among relabelings whose S is within ``tol`` of the maximum, the
    lexicographically largest 16-vector wins, which makes the representative
    a function of the orbit alone; the reported relabeling is the first in
    group order that produces it (the identity when the input is canonical).  Returns the canonical rows and the index
    into :func:`relabeling_group` used for each.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    n = p.shape[0]
    out = np.empty_like(p)
    choice = np.empty(n, dtype=np.intp)
    perms = _group_perms()
    for start in range(0, n, 1024):
        orbit = p[start:start + 1024][:, perms]  # rows, 128, 16
        s = orbit @ CHSH_VECTOR
        tied = s >= s.max(axis=1, keepdims=True) - tol
        for i in range(orbit.shape[0]):
            cands = np.nonzero(tied[i])[0]
            if len(cands) > 1:
                # np.lexsort sorts by the last key first; it is stable, so
                # among identical rows the lowest group index comes first
                rows = orbit[i, cands]
                order = np.lexsort(rows.T[::-1])
                top = rows[order[-1]]
                cands = cands[(rows == top).all(axis=1)]
            choice[start + i] = cands[0]
            out[start + i] = orbit[i, cands[0]]
    return out, choice


def canonicalize(b) -> tuple[Behavior, Relabeling]:
    """Canonical representative of ``b`` together with the relabeling that produces it."""
    q, idx = canonicalize_batch(_as_probs(b))
    return Behavior(q[0]), relabeling_group()[idx[0]]


# --- polytope of nonlocal behaviors above the canonical facet ----------------

def nonlocal_vertices() -> np.ndarray:
    """PR-box followed by the 8 facet vertices, as NsParams rows."""
    vs = [pr_box()] + chsh_facet_vertices()
    return np.stack([v.params() for v in vs])


def nonlocal_polytope() -> tuple[np.ndarray, np.ndarray]:
    """H-representation ``A @ v8 >= c`` of {NS, p >= 0, S >= 2} in NsParams coordinates."""
    A = np.vstack([EXPAND_P, CHSH_VECTOR @ EXPAND_P])
    c = np.concatenate([-EXPAND_C, [2.0 - CHSH_VECTOR @ EXPAND_C]])
    return A, c


# --- samplers ----------------------------------------------------------------

def make_rng(seed: int | None, stream: int = 0) -> np.random.Generator:
    """Seeded PCG64 generator; ``stream`` gives independent reproducible substreams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


class HitAndRunSampler:
    """Hit-and-run chains over the nonlocal polytope above the canonical CHSH facet.

    All chains start at the vertex average and advance together; the state
    persists across :meth:`sample` calls so a training loop can keep drawing
    from an already mixed chain.
    """

    def __init__(self, rng: np.random.Generator, burn_in: int = 1000,
                 thinning: int = 10, chains: int = 1):
        if chains < 1 or thinning < 1 or burn_in < 0:
            raise ValueError("chains and thinning must be >= 1, burn_in >= 0")
        self.rng = rng
        self.burn_in = burn_in
        self.thinning = thinning
        self.A, self.c = nonlocal_polytope()
        self.x = np.tile(nonlocal_vertices().mean(axis=0), (chains, 1))
        self._burnt = False

    def step(self) -> None:
        n, d = self.x.shape
        while True:
            u = self.rng.standard_normal((n, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            au = u @ self.A.T  # n, k
            slack = self.x @ self.A.T - self.c  # >= 0
            # constraint i holds for t with slack_i + t*au_i >= 0
            with np.errstate(divide="ignore", invalid="ignore"):
                t = -slack / au
            lo = np.where(au > 0, t, -np.inf).max(axis=1)
            hi = np.where(au < 0, t, np.inf).min(axis=1)
            if np.all(np.isfinite(lo) & np.isfinite(hi)):
                break
            # direction missed every bounding constraint; redraw
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
        self.x = self.x + (lo + (hi - lo) * self.rng.random(n))[:, None] * u

    def sample(self, n: int) -> np.ndarray:
        """Return ``n`` behaviors as an ``(n, 16)`` array."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if not self._burnt:
            for _ in range(self.burn_in):
                self.step()
            self._burnt = True
        chains = self.x.shape[0]
        out = []
        for _ in range(-(-n // chains)):
            for _ in range(self.thinning):
                self.step()
            out.append(self.x.copy())
        v = np.concatenate(out)[:n]
        return np.clip(expand_params(v), 0.0, None)


def sample_hit_and_run(rng: np.random.Generator, n: int, burn_in: int = 1000,
                       thinning: int = 10, chains: int = 1) -> np.ndarray:
    return HitAndRunSampler(rng, burn_in, thinning, chains).sample(n)


def weighted_vertex_mixture(w) -> np.ndarray:
    """Mixture with weight 8*w[0] on the PR-box and w[i] on facet vertex i."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    verts = np.stack([pr_box().probs] + [v.probs for v in chsh_facet_vertices()])
    coef = w.copy()
    coef[:, 0] *= 8.0
    return (coef @ verts) / coef.sum(axis=1, keepdims=True)


def sample_weighted_vertex(rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    w = rng.random((n, 9))
    while True:
        dead = ~(w > 0).any(axis=1)
        if not dead.any():
            break
        w[dead] = rng.random((int(dead.sum()), 9))
    return weighted_vertex_mixture(w)


def haar_state(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    psi = rng.standard_normal((n, dim)) + 1j * rng.standard_normal((n, dim))
    return psi / np.linalg.norm(psi, axis=1, keepdims=True)


def haar_unitary(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    z = (rng.standard_normal((n, dim, dim)) + 1j * rng.standard_normal((n, dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=1, axis2=2)
    return q * (d / np.abs(d))[:, None, :]


def born_behaviors(psi, alice_proj, bob_proj) -> np.ndarray:
    """p(ab|xy) = <psi| A_x^a (x) B_y^b |psi> for two-qubit states.

    ``alice_proj[n, x]`` and ``bob_proj[n, y]`` are the 2x2 outcome-0
    projectors; the outcome-1 projector is the complement.
    """
    eye = np.eye(2)
    n = psi.shape[0]
    A = np.stack([alice_proj, eye - alice_proj], axis=2)  # n, x, a, 2, 2
    B = np.stack([bob_proj, eye - bob_proj], axis=2)
    psi2 = psi.reshape(n, 2, 2)
    # amplitude tensor after applying A_x^a on qubit 1 and B_y^b on qubit 2
    phi = np.einsum("nxaij,nybkl,njl->nxyabik", A, B, psi2)
    p = np.einsum("nik,nxyabik->nxyab", psi2.conj(), phi).real
    return p.reshape(n, 16)


def sample_quantum_pure(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-random two-qubit pure states with Haar-random projective measurements."""
    if n < 1:
        raise ValueError("n must be >= 1")
    psi = haar_state(rng, n, 4)
    u = haar_unitary(rng, 4 * n, 2).reshape(n, 4, 2, 2)
    col = u[..., :, 0]
    proj = np.einsum("nki,nkj->nkij", col, col.conj())
    p = born_behaviors(psi, proj[:, :2], proj[:, 2:])
    return np.clip(p, 0.0, None)


SAMPLERS = ("hitrun", "vertex", "quantum")


class Sampler:
    """Round-based draw interface used by training and the CLI."""

    def __init__(self, kind: str, seed: int | None, stream: int = 0,
                 chains: int = 100, burn_in: int = 1000, thinning: int = 10):
        if kind not in SAMPLERS:
            raise ValueError(f"unknown sampler {kind!r}; choose from {SAMPLERS}")
        self.kind = kind
        self.rng = make_rng(seed, stream)
        self._hr = (HitAndRunSampler(self.rng, burn_in, thinning, chains)
                    if kind == "hitrun" else None)

    def draw(self, n: int) -> np.ndarray:
        if self.kind == "hitrun":
            return self._hr.sample(n)
        if self.kind == "vertex":
            return sample_weighted_vertex(self.rng, n)
        return sample_quantum_pure(self.rng, n)
