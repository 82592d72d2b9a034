"""Feedforward networks trained to complete moment matrices (primal) or
emit infeasibility witnesses (dual), with the min-eigenvalue loss.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import bell, moments
from .linalg import eig_min_batch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODES = ("primal", "dual")


class DivergenceError(RuntimeError):
    pass


# --- activations ---------------------------------------------------------------

def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(h, a):
    return np.where(h > 0, 1.0, a + 1.0)


_TANH_MAX = np.nextafter(1.0, 0.0)


def bounded_tanh(x):
    # tanh rounds to +-1 for |x| > ~19; keep outputs strictly inside (-1, 1)
    return np.clip(np.tanh(x), -_TANH_MAX, _TANH_MAX)


ACTIVATIONS = {
    "elu": (elu, _elu_grad),
    "tanh": (bounded_tanh, lambda h, a: 1.0 - a * a),
    "linear": (lambda x: x, lambda h, a: np.ones_like(h)),
}


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: bias length {b.shape[0]} != rows {W.shape[0]}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input width {W.shape[1]} does not chain")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def init(cls, sizes: list[int], activations: list[str], rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights and zero biases for layer widths ``sizes``."""
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(Ws, bs, list(activations))

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_params(self, params: list[np.ndarray]) -> "Mlp":
        return Mlp(list(params[0::2]), list(params[1::2]), list(self.activations))

    def copy(self) -> "Mlp":
        return self.with_params([p.copy() for p in self.params()])


def forward_trace(m: Mlp, x) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Pre-activations and activations of every layer for a batch ``x``.

    ``acts[0]`` is the input; ``acts[-1]`` the output.
    """
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite network input")
    pres, acts = [], [a]
    for l, (W, b, name) in enumerate(zip(m.weights, m.biases, m.activations)):
        with np.errstate(over="ignore", invalid="ignore"):
            h = a @ W.T + b
            a = ACTIVATIONS[name][0](h)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite activation in layer {l}")
        pres.append(h)
        acts.append(a)
    return pres, acts


def forward(m: Mlp, x) -> np.ndarray:
    out = forward_trace(m, x)[1][-1]
    return out[0] if np.ndim(x) == 1 else out


# --- preprocessing -------------------------------------------------------------

@dataclass
class Preprocessor:
    """Standardizes canonicalized NsParams features."""

    mean: np.ndarray
    std: np.ndarray

    def features(self, probs) -> np.ndarray:
        """Canonicalize, extract NsParams and standardize; batched over rows."""
        canon, _ = bell.canonicalize_batch(probs)
        return self.transform(bell.extract_params(canon))

    def transform(self, v8) -> np.ndarray:
        return (np.asarray(v8, dtype=float) - self.mean) / self.std

    @classmethod
    def fit(cls, v8) -> "Preprocessor":
        v8 = np.atleast_2d(v8)
        return cls(v8.mean(axis=0), np.maximum(v8.std(axis=0), 1e-9))


def fit_preprocessor(sampler: str, n: int = 100_000, seed: Optional[int] = None,
                     **sampler_kw) -> Preprocessor:
    if n < 10_000:
        raise ValueError("calibration needs at least 10^4 samples")
    draws = bell.Sampler(sampler, seed, stream=3, **sampler_kw).draw(n)
    canon, _ = bell.canonicalize_batch(draws)
    return Preprocessor.fit(bell.extract_params(canon))


# --- configuration and model files ---------------------------------------------

@dataclass
class TrainConfig:
    rounds: int = 800
    samples_per_round: int = 10_000
    minibatch: int = 100
    lr0: float = 0.005
    lr_decay: float = 0.99
    decay_start_round: int = 200
    momentum: float = 0.8
    activity_l2: float = 0.0
    delta: float = 3e-7
    sampler: str = "hitrun"
    seed: int = 0
    depth: int = 8
    width: Optional[int] = None  # default 3 x output width
    calibration_samples: int = 100_000
    grad_clip: Optional[float] = None
    norm_constraint: bool = True
    dual_basis: str = "cell"
    chains: int = 100

    def __post_init__(self):
        for name in ("rounds", "samples_per_round", "minibatch", "lr0", "lr_decay", "depth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.delta <= 0 or self.activity_l2 < 0:
            raise ValueError("delta must be positive and activity_l2 non-negative")
        if self.sampler not in bell.SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        moments.DualForm(self.dual_basis)

    @property
    def dual_form(self) -> moments.DualForm:
        return moments.DualForm(self.dual_basis, self.norm_constraint)

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        """Defaults for a primal or dual network; keyword overrides win."""
        if mode == "primal":
            base = dict(lr0=0.005, sampler="hitrun", activity_l2=0.0, grad_clip=None)
        elif mode == "dual":
            base = dict(lr0=1e-4, sampler="vertex", activity_l2=1e-6, grad_clip=1e3)
        else:
            raise ValueError(f"mode must be one of {MODES}")
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def learning_rate(self, round_idx: int) -> float:
        """Rate for 1-based round ``round_idx``: constant, then geometric decay."""
        return self.lr0 * self.lr_decay ** max(0, round_idx - self.decay_start_round)


@dataclass
class ModelFile:
    level: str
    mode: str
    delta: float
    preprocessor: Preprocessor
    mlp: Mlp
    train_config: dict = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)
    norm_constraint: bool = True
    dual_basis: str = "cell"
    format_version: int = FORMAT_VERSION

    @property
    def layout(self) -> moments.MomentLayout:
        return moments.build_layout(self.level)

    @property
    def dual_form(self) -> moments.DualForm:
        return moments.DualForm(self.dual_basis, self.norm_constraint)

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "level": self.level,
            "mode": self.mode,
            "delta": self.delta,
            "norm_constraint": self.norm_constraint,
            "dual_basis": self.dual_basis,
            "preprocessor": {"mean": self.preprocessor.mean.tolist(),
                             "std": self.preprocessor.std.tolist()},
            "layers": [
                {"rows": W.shape[0], "cols": W.shape[1], "activation": act,
                 "weights": W.ravel().tolist(), "bias": b.tolist()}
                for W, b, act in zip(self.mlp.weights, self.mlp.biases, self.mlp.activations)
            ],
            "train_config": self.train_config,
            "loss_trace": list(self.loss_trace),
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelFile":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
        layers = doc["layers"]
        mlp = Mlp(
            [np.array(L["weights"], dtype=float).reshape(L["rows"], L["cols"]) for L in layers],
            [np.array(L["bias"], dtype=float) for L in layers],
            [L["activation"] for L in layers],
        )
        pre = Preprocessor(np.array(doc["preprocessor"]["mean"], dtype=float),
                           np.array(doc["preprocessor"]["std"], dtype=float))
        return cls(moments.parse_level(doc["level"]), doc["mode"], float(doc["delta"]), pre, mlp,
                   doc.get("train_config", {}), list(doc.get("loss_trace", [])),
                   bool(doc.get("norm_constraint", True)), doc.get("dual_basis", "cell"),
                   doc["format_version"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelFile":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def output_width(layout: moments.MomentLayout, mode: str,
                 form: moments.DualForm = moments.DEFAULT_DUAL) -> int:
    return layout.free_count if mode == "primal" else moments.dual_size(layout, form)


def build_network(layout, mode: str, cfg: TrainConfig, rng: np.random.Generator) -> Mlp:
    out = output_width(layout, mode, cfg.dual_form)
    width = cfg.width or 3 * out
    sizes = [8] + [width] * (cfg.depth - 1) + [out]
    acts = ["elu"] * (cfg.depth - 1) + ["linear" if mode == "primal" else "tanh"]
    return Mlp.init(sizes, acts, rng)


# --- loss and gradients ----------------------------------------------------------

def constraint_matrices(layout, probs, output, mode: str, delta: float = 3e-7,
                        form: moments.DualForm = moments.DEFAULT_DUAL) -> np.ndarray:
    if mode == "primal":
        return moments.assemble_primal(layout, probs, output)
    if mode == "dual":
        return moments.assemble_dual(layout, probs, output, delta, form)
    raise ValueError(f"mode must be one of {MODES}")


def loss(layout, b, output, mode: str, delta: float = 3e-7, form: moments.DualForm = moments.DEFAULT_DUAL):
    """Minus the smallest eigenvalue of the assembled constraint matrix."""
    M = constraint_matrices(layout, b, output, mode, delta, form)
    if M.ndim == 2:
        return -float(np.linalg.eigvalsh(M)[0])
    return -np.linalg.eigvalsh(M)[:, 0]


def _output_grad(layout, probs, output, mode, delta, form):
    """Per-sample d(lambda_min)/d(output) plus lambda_min and degeneracy flags."""
    M = constraint_matrices(layout, probs, output, mode, delta, form)
    lam, u, gap = eig_min_batch(M)
    F, G = moments._basis(layout, form)
    if mode == "primal":
        g = np.einsum("ni,kij,nj->nk", u, G, u)
    else:
        m = layout.m
        top = u[:, :m]
        v = np.atleast_2d(moments.dual_values(layout, probs, form))
        g = -np.einsum("ni,kij,nj->nk", top, F, top) + v * (u[:, m] ** 2)[:, None]
    return lam, g, gap < 1e-9


def loss_and_grad(m: Mlp, x, probs, layout, mode: str, delta: float = 3e-7,
                  activity_l2: float = 0.0, form: moments.DualForm = moments.DEFAULT_DUAL):
    """Mean loss over a batch and its gradient with respect to every parameter.

    ``x`` are network inputs (already preprocessed) and ``probs`` the
    canonical behaviors they came from.  The activity penalty
    ``activity_l2 * sum_l ||r_l||^2`` covers every layer's output.  Returns
    ``(mean eigenvalue loss, grads, per-sample lambda_min, degenerate count)``;
    the reported loss excludes the penalty.
    """
    pres, acts = forward_trace(m, x)
    n = acts[0].shape[0]
    lam, g, degen = _output_grad(layout, probs, acts[-1], mode, delta, form)
    dA = -g / n
    grads: list[np.ndarray] = [None] * (2 * m.depth)  # type: ignore[list-item]
    for l in reversed(range(m.depth)):
        a = acts[l + 1]
        if activity_l2:
            dA = dA + (2.0 * activity_l2 / n) * a
        dH = dA * ACTIVATIONS[m.activations[l]][1](pres[l], a)
        grads[2 * l] = dH.T @ acts[l]
        grads[2 * l + 1] = dH.sum(axis=0)
        dA = dH @ m.weights[l]
    return float(-lam.mean()), grads, lam, int(degen.sum())


def backward(m: Mlp, x, layout, b, mode: str, delta: float = 3e-7,
             activity_l2: float = 0.0, form: moments.DualForm = moments.DEFAULT_DUAL) -> list[np.ndarray]:
    """Parameter gradient of the loss for one input (or the batch mean)."""
    return loss_and_grad(m, x, b, layout, mode, delta, activity_l2, form)[1]


def total_loss(m: Mlp, x, probs, layout, mode, delta=3e-7, activity_l2=0.0,
               form=moments.DEFAULT_DUAL) -> float:
    """Batch-mean loss including the activity penalty; the function :func:`backward` differentiates."""
    _, acts = forward_trace(m, x)
    M = constraint_matrices(layout, probs, acts[-1], mode, delta, form)
    val = -np.linalg.eigvalsh(M)[:, 0].mean()
    if activity_l2:
        val += activity_l2 * sum((a ** 2).sum(axis=1).mean() for a in acts[1:])
    return float(val)


def sgd_step(m: Mlp, grads, velocity, round_idx: int, cfg: TrainConfig):
    """theta' = theta - eta_t * grad + momentum * (previous update)."""
    eta = cfg.learning_rate(round_idx)
    params = m.params()
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_v = [cfg.momentum * v - eta * g for v, g in zip(velocity, grads)]
    return m.with_params([p + v for p, v in zip(params, new_v)]), new_v


def _clip(grads, limit):
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if limit is not None and norm > limit:
        return [g * (limit / norm) for g in grads], True
    return grads, False


def train(level: str, mode: str, cfg: TrainConfig, progress=None) -> ModelFile:
    """Train a primal or dual network on fresh samples each round.

    ``progress`` is called as ``progress(round_idx, mean_loss)`` after every
    round when given.
    """
    layout = moments.build_layout(level)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    pre = fit_preprocessor(cfg.sampler, cfg.calibration_samples, cfg.seed, chains=cfg.chains)
    net = build_network(layout, mode, cfg, bell.make_rng(cfg.seed, 2))
    shuffle = bell.make_rng(cfg.seed, 1)
    sampler = bell.Sampler(cfg.sampler, cfg.seed, stream=0, chains=cfg.chains)
    activity = cfg.activity_l2 if mode == "dual" else 0.0
    velocity = None
    trace: list[float] = []
    clipped = degenerate = 0
    for r in range(1, cfg.rounds + 1):
        canon, _ = bell.canonicalize_batch(sampler.draw(cfg.samples_per_round))
        x = pre.transform(bell.extract_params(canon))
        order = shuffle.permutation(len(canon))
        losses = []
        for start in range(0, len(order), cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            val, grads, _, ndeg = loss_and_grad(net, x[idx], canon[idx], layout, mode, cfg.delta,
                                                activity, cfg.dual_form)
            grads, hit = _clip(grads, cfg.grad_clip)
            clipped += hit
            degenerate += ndeg
            net, velocity = sgd_step(net, grads, velocity, r, cfg)
            losses.append(val * len(idx))
        mean_loss = float(np.sum(losses) / len(order))
        trace.append(mean_loss)
        if progress is not None:
            progress(r, mean_loss)
        limit = 10.0 * max(abs(trace[0]), 1e-6)
        if not np.isfinite(mean_loss) or mean_loss > limit:
            raise DivergenceError(f"round {r}: mean loss {mean_loss:.4g} exceeds {limit:.4g}")
    if clipped:
        log.info("gradient clipping active on %d minibatches", clipped)
    if degenerate:
        log.debug("%d degenerate smallest eigenvalues (supergradient used)", degenerate)
    return ModelFile(layout.level, mode, cfg.delta, pre, net, asdict(cfg), trace,
                     cfg.norm_constraint, cfg.dual_basis)


def predict(model: ModelFile, b):
    """Network output and the smallest eigenvalue it achieves.

    The behavior is canonicalized first, and the constraint matrix is built
    for the canonical behavior.  Batched over rows.
    """
    probs = bell._as_probs(b)
    bell.check_behaviors(probs, atol=1e-9)
    canon, _ = bell.canonicalize_batch(probs)
    out = forward(model.mlp, model.preprocessor.transform(bell.extract_params(canon)))
    M = constraint_matrices(model.layout, canon, out, model.mode, model.delta, model.dual_form)
    lam = np.linalg.eigvalsh(M)[:, 0]
    if probs.ndim == 1:
        return out[0], float(lam[0])
    return out, lam


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})

