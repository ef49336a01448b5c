"""Chain speculative sampling over abstract target/draft sequence models.

A sequence model is any callable mapping a context (tuple of token ids) to
a categorical distribution over the vocabulary.  The engine drafts ``K``
tokens, verifies them left to right, and always emits one extra token:
from the residual distribution at the first rejection, or from the target
after a full acceptance.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .dist import NoRejectionMass, residual_distribution, sample_with
from .losses import acceptance_rate

SequenceModel = Callable[[tuple], np.ndarray]

STOCHASTIC = "stochastic"
GREEDY = "greedy"


class ProtocolViolation(RuntimeError):
    """A drafted token had zero probability under the draft distribution."""


@dataclass(frozen=True)
class SpecConfig:
    K: int = 4
    draft_mode: str = STOCHASTIC
    max_new_tokens: int = 32
    end_token: int | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.draft_mode not in (STOCHASTIC, GREEDY):
            raise ValueError(f"unknown draft mode {self.draft_mode!r}")


@dataclass
class DraftStep:
    token: int
    q: np.ndarray
    p: np.ndarray
    beta: float
    accepted: bool


@dataclass
class RoundTrace:
    drafted: list[DraftStep]
    bonus_token: int
    accepted_count: int

    def emitted(self) -> list[int]:
        return [d.token for d in self.drafted[: self.accepted_count]] + [self.bonus_token]

    def to_record(self, index: int) -> dict:
        return {
            "round": index,
            "drafted": [d.token for d in self.drafted],
            "beta": [d.beta for d in self.drafted],
            "accepted": [d.accepted for d in self.drafted],
            "accepted_count": self.accepted_count,
            "bonus": self.bonus_token,
        }


@dataclass
class AcceptanceMetrics:
    """Acceptance counts pooled over rounds.

    ``verified[i]`` counts rounds whose verification reached draft position
    ``i`` and ``accepted[i]`` those that accepted it, so the empirical
    per-position acceptance rate is ``accepted[i] / verified[i]``.  All ``K``
    tokens are drafted every round, so ``total_drafted = K * rounds``.
    """

    K: int
    accepted: np.ndarray = None
    verified: np.ndarray = None
    rounds: int = 0

    def __post_init__(self):
        if self.accepted is None:
            self.accepted = np.zeros(self.K, dtype=np.int64)
        if self.verified is None:
            self.verified = np.zeros(self.K, dtype=np.int64)

    @property
    def total_accepted(self) -> int:
        return int(self.accepted.sum())

    @property
    def total_drafted(self) -> int:
        return self.K * self.rounds

    def add_round(self, accepted_count: int):
        self.add_counts(np.array([accepted_count]))

    def add_counts(self, accepted_counts):
        counts = np.asarray(accepted_counts, dtype=np.int64)
        pos = np.arange(self.K)
        self.verified += (counts[:, None] >= pos).sum(axis=0)
        self.accepted += (counts[:, None] > pos).sum(axis=0)
        self.rounds += len(counts)

    def merge(self, other: "AcceptanceMetrics") -> "AcceptanceMetrics":
        if other.K != self.K:
            raise ValueError("cannot merge metrics with different K")
        return AcceptanceMetrics(
            self.K, self.accepted + other.accepted, self.verified + other.verified, self.rounds + other.rounds
        )

    def per_position_alpha(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.verified > 0, self.accepted / np.maximum(self.verified, 1), np.nan)


def accept_prob(p, q, x: int) -> float:
    """``min(1, p(x) / q(x))`` for a token drafted from ``q``."""
    qx = float(q[x])
    if qx <= 0.0:
        raise ProtocolViolation(f"token {x} drafted with q(x) = 0")
    px = float(p[x])
    return 1.0 if px >= qx else px / qx


def greedy_accept_prob(p, q) -> float:
    """Acceptance probability when the draft always proposes ``argmax q``."""
    x = int(np.argmax(q))
    return min(1.0, float(p[x]))


def _bonus_from_residual(p, q, u):
    try:
        return sample_with(residual_distribution(p, q), u)
    except NoRejectionMass:
        return sample_with(p, u)


def run_round(
    target: SequenceModel,
    draft: SequenceModel,
    context: Sequence[int],
    cfg: SpecConfig,
    rng: np.random.Generator,
) -> RoundTrace:
    """One draft-then-verify round.

    Variates are consumed in a fixed order: one per drafted token (in
    stochastic mode), one per verified token, one for the bonus token.
    """
    ctx = tuple(context)
    greedy = cfg.draft_mode == GREEDY
    tokens, qs = [], []
    for _ in range(cfg.K):
        q = np.asarray(draft(ctx + tuple(tokens)), dtype=np.float64)
        x = int(np.argmax(q)) if greedy else sample_with(q, rng.random())
        tokens.append(x)
        qs.append(q)
    ps = [np.asarray(target(ctx + tuple(tokens[:i])), dtype=np.float64) for i in range(cfg.K + 1)]

    steps = []
    bonus = None
    for i, x in enumerate(tokens):
        beta = min(1.0, float(ps[i][x])) if greedy else accept_prob(ps[i], qs[i], x)
        ok = rng.random() < beta
        steps.append(DraftStep(x, qs[i], ps[i], beta, ok))
        if not ok:
            bonus = _bonus_from_residual(ps[i], qs[i], rng.random())
            break
    if bonus is None:
        bonus = sample_with(ps[cfg.K], rng.random())
    return RoundTrace(steps, bonus, sum(s.accepted for s in steps))


def generate(target, draft, prompt, cfg: SpecConfig, rng: np.random.Generator, trace=None):
    """Speculatively decode up to ``cfg.max_new_tokens`` tokens.

    Returns the new tokens and the pooled :class:`AcceptanceMetrics`.  When
    ``trace`` is a list, every :class:`RoundTrace` is appended to it.
    """
    out: list[int] = []
    metrics = AcceptanceMetrics(cfg.K)
    while len(out) < cfg.max_new_tokens:
        rt = run_round(target, draft, tuple(prompt) + tuple(out), cfg, rng)
        metrics.add_round(rt.accepted_count)
        if trace is not None:
            trace.append(rt)
        for tok in rt.emitted():
            out.append(tok)
            if len(out) >= cfg.max_new_tokens or tok == cfg.end_token:
                return out, metrics
    return out, metrics


def tau(metrics: AcceptanceMetrics, K: int | None = None) -> float:
    """Tokens per round: ``K * accepted / drafted + 1``."""
    K = metrics.K if K is None else K
    if metrics.total_drafted == 0:
        raise ValueError("no drafted tokens")
    return K * metrics.total_accepted / metrics.total_drafted + 1.0


def expected_tau_analytic(alphas) -> float:
    """Exact tau for i.i.d. rounds with per-position acceptance rates ``alphas``.

    Enumerates every accept/reject outcome path: the round accepts ``n``
    tokens with probability ``prod(alphas[:n]) * (1 - alphas[n])``.
    """
    alphas = [float(a) for a in alphas]
    K = len(alphas)
    if K == 0:
        raise ValueError("need at least one position")
    expected_acc = 0.0
    for outcome in itertools.product((True, False), repeat=K):
        weight = 1.0
        n = 0
        for a, ok in zip(alphas, outcome):
            weight *= a if ok else 1.0 - a
        # flags after the first rejection are marginalized out
        for ok in outcome:
            if not ok:
                break
            n += 1
        expected_acc += weight * n
    drafted = K
    return K * expected_acc / drafted + 1.0


# -- exact enumeration ---------------------------------------------------------


def _round_outcomes(target, draft, ctx, K, greedy):
    """Exact distribution over the token sequence emitted by one round."""
    out: dict[tuple, float] = {}

    def draft_paths(prefix, prob):
        if len(prefix) == K:
            yield prefix, prob
            return
        q = np.asarray(draft(ctx + prefix), dtype=np.float64)
        if greedy:
            yield from draft_paths(prefix + (int(np.argmax(q)),), prob)
            return
        for x in range(len(q)):
            if q[x] > 0:
                yield from draft_paths(prefix + (x,), prob * q[x])

    for tokens, w in draft_paths((), 1.0):
        reach = w
        for i, x in enumerate(tokens):
            p = np.asarray(target(ctx + tokens[:i]), dtype=np.float64)
            q = np.asarray(draft(ctx + tokens[:i]), dtype=np.float64)
            beta = min(1.0, p[x]) if greedy else accept_prob(p, q, x)
            try:
                resid = residual_distribution(p, q)
            except NoRejectionMass:
                resid = p
            rej = reach * (1.0 - beta)
            if rej > 0:
                for y in range(len(resid)):
                    if resid[y] > 0:
                        key = tokens[:i] + (y,)
                        out[key] = out.get(key, 0.0) + rej * resid[y]
            reach *= beta
            if reach == 0:
                break
        if reach > 0:
            p = np.asarray(target(ctx + tokens), dtype=np.float64)
            for y in range(len(p)):
                if p[y] > 0:
                    key = tokens + (y,)
                    out[key] = out.get(key, 0.0) + reach * p[y]
    return out


def exactness_enumerate(target, draft, prompt, K: int, draft_mode=STOCHASTIC, depth: int = 1, vocab=None):
    """Exact distribution of the first ``depth`` emitted tokens.

    Sums over every drafted sequence and accept/reject outcome, chaining
    further rounds when one round emits fewer than ``depth`` tokens.
    Returns an array of shape ``(V,) * depth``.
    """
    if vocab is None:
        vocab = len(np.asarray(target(tuple(prompt))))
    if vocab > 8 or K > 3:
        raise ValueError("exact enumeration is limited to V <= 8 and K <= 3")
    greedy = draft_mode == GREEDY
    result = np.zeros((vocab,) * depth)

    def expand(ctx, emitted, prob):
        for seq, w in _round_outcomes(target, draft, ctx, K, greedy).items():
            full = emitted + seq
            if len(full) >= depth:
                result[full[:depth]] += prob * w
            else:
                expand(ctx + seq, full, prob * w)

    expand(tuple(prompt), (), 1.0)
    return result


def target_marginal(target, prompt, depth: int = 1, vocab=None):
    """Joint distribution of the next ``depth`` tokens under plain sampling from the target."""
    if vocab is None:
        vocab = len(np.asarray(target(tuple(prompt))))
    out = np.zeros((vocab,) * depth)
    for seq in itertools.product(range(vocab), repeat=depth):
        w = 1.0
        for i, y in enumerate(seq):
            w *= target(tuple(prompt) + seq[:i])[y]
        out[seq] = w
    return out


# -- models --------------------------------------------------------------------


class TabularModel:
    """Context-indexed distributions with a default for unseen contexts."""

    def __init__(self, table: dict, default=None):
        self.table = {tuple(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.default = None if default is None else np.asarray(default, dtype=np.float64)

    def __call__(self, context):
        d = self.table.get(tuple(context), self.default)
        if d is None:
            raise KeyError(f"no distribution for context {tuple(context)}")
        return d


class ConstantModel:
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def __call__(self, context):
        return self.probs


class HashedDirichletModel:
    """Deterministic pseudo-random distribution for every context."""

    def __init__(self, V: int, seed: int, concentration: float = 1.0):
        self.V = V
        self.seed = seed
        self.concentration = concentration
        self._cache: dict[tuple, np.ndarray] = {}

    def __call__(self, context):
        ctx = tuple(int(t) for t in context)
        d = self._cache.get(ctx)
        if d is None:
            rng = np.random.default_rng([self.seed, len(ctx), *ctx])
            d = rng.dirichlet(np.full(self.V, self.concentration))
            d = d / d.sum()
            self._cache[ctx] = d
        return d


class PositionalModel:
    """Distribution fixed by the number of tokens after the prompt.

    Used to realize stationary per-position distributions inside one round
    (the prompt length is subtracted from the context length).
    """

    def __init__(self, table, prompt_len: int = 0):
        self.table = np.asarray(table, dtype=np.float64)
        self.prompt_len = prompt_len

    def __call__(self, context):
        i = min(len(context) - self.prompt_len, len(self.table) - 1)
        return self.table[i]


# -- vectorized stationary simulation -----------------------------------------


@dataclass
class SimResult:
    drafted: np.ndarray
    betas: np.ndarray
    accepted_count: np.ndarray
    bonus: np.ndarray
    metrics: AcceptanceMetrics = field(repr=False)
    ctx: np.ndarray | None = field(default=None, repr=False)

    def trace_records(self, limit: int | None = None):
        n = len(self.accepted_count) if limit is None else min(limit, len(self.accepted_count))
        for r in range(n):
            a = int(self.accepted_count[r])
            k = min(a + 1, self.drafted.shape[1])
            yield {
                "round": r,
                "drafted": [int(t) for t in self.drafted[r, :k]],
                "beta": [float(b) for b in self.betas[r, :k]],
                "accepted": [i < a for i in range(k)],
                "accepted_count": a,
                "bonus": int(self.bonus[r]),
            }


def find_protocol_violation(result: SimResult, q_tab):
    """First verified draft token that has zero draft probability, as a trace record."""
    q_tab = np.asarray(q_tab, dtype=np.float64)
    if q_tab.ndim == 2:
        q_tab = q_tab[None]
    ctx = np.zeros(len(result.accepted_count), np.int64) if result.ctx is None else result.ctx
    K = result.drafted.shape[1]
    reached = np.arange(K)[None, :] <= result.accepted_count[:, None]
    mass = q_tab[ctx[:, None], np.arange(K)[None, :], result.drafted]
    bad = np.argwhere(reached & (mass <= 0.0))
    if len(bad) == 0:
        return None
    r = int(bad[0, 0])
    return next(rec for rec in result.trace_records(r + 1) if rec["round"] == r)


def simulate_stationary(p_tab, q_tab, n_rounds: int, rng: np.random.Generator, draft_mode=STOCHASTIC, backend=None):
    """Simulate ``n_rounds`` i.i.d. rounds over per-position distributions.

    ``p_tab`` has shape ``(K+1, V)`` or ``(C, K+1, V)``; ``q_tab`` has
    ``(K, V)`` or ``(C, K, V)``.  With several contexts each round picks
    one uniformly at random.
    """
    p_tab = np.asarray(p_tab, dtype=np.float64)
    q_tab = np.asarray(q_tab, dtype=np.float64)
    if p_tab.ndim == 2:
        p_tab = p_tab[None]
        q_tab = q_tab[None]
    K = q_tab.shape[1]
    ctx = rng.integers(0, p_tab.shape[0], size=n_rounds) if p_tab.shape[0] > 1 else np.zeros(n_rounds, np.int64)
    u = rng.random((n_rounds, 2 * K + 1))
    drafted, betas, acc, bonus = _kernels.simulate_rounds(p_tab, q_tab, ctx, u, draft_mode == GREEDY, backend)
    metrics = AcceptanceMetrics(K)
    metrics.add_counts(acc)
    return SimResult(drafted, betas, acc, bonus, metrics, ctx)


def stationary_alphas(p_tab, q_tab, draft_mode=STOCHASTIC) -> np.ndarray:
    """Per-position acceptance rates of a single-context stationary table."""
    p_tab = np.asarray(p_tab)[: len(q_tab)]
    q_tab = np.asarray(q_tab)
    if draft_mode == GREEDY:
        return np.array([greedy_accept_prob(p, q) for p, q in zip(p_tab, q_tab)])
    return np.asarray(acceptance_rate(p_tab, q_tab))


def dump_trace(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
