"""Decoding strategies over an abstract autoregressive scorer.

Provides greedy decoding, temperature sampling, standard beam search, and
beam-search-NMS, all with grammar-constrained token masking.  A ``Scorer``
returns a normalized log-probability vector over the full vocabulary for a
given token prefix; ``SyntheticScorer`` builds smooth multi-peaked per-step
distributions for experiments, and ``replay_scorer`` wraps a recorded logit
dump so real model traces can be re-decoded offline.

Beam-search-NMS differs from standard beam search in one place: before the
top-n expansion at each step, every token that is not a local maximum of the
step distribution within a +-w window is suppressed (log-probability set to
-inf).  A point x is a local maximum when p(x) >= p(x') for all x' in
[x - w, x + w] intersected with the valid band; the >= keeps plateaus.  The
window is w=100 for position (loc) steps and 12 for the narrower angle (seg)
band by default.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d

from .codec import Grammar
from .errors import (
    DegenerateDistribution,
    DumpFormatError,
    StepOutOfRange,
    VocabMismatch,
)

DEFAULT_WINDOW_LOC = 100
DEFAULT_WINDOW_SEG = 12

NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------

class Scorer:
    """Interface: deterministic normalized log-probabilities per prefix.

    ``score(prefix)`` must return a vector of length ``vocab_size`` whose
    log-sum-exp is 0 (within 1e-6) and must be deterministic for a fixed
    prefix.  Implementations need only be safe for use from one decoding
    thread at a time.
    """

    vocab_size: int

    def score(self, prefix) -> np.ndarray:
        raise NotImplementedError


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x)
    z = x - m
    return z - np.log(np.sum(np.exp(z)))


class SyntheticScorer(Scorer):
    """Per-step mixture-of-bumps distributions over the grammar's bands.

    Each step's spec is a list of ``(center, width, weight)`` tuples, with
    ``center`` a bin offset inside that step's valid band.  The resulting
    densities are smooth and multi-peaked, mimicking the logit shape of
    dense position tokens.  Scores depend only on the prefix length, so
    exhaustive search over sequences factorizes step by step.
    """

    def __init__(self, grammar: Grammar, step_mixtures, vocab_size: int | None = None, seed: int = 0):
        if len(step_mixtures) != len(grammar):
            raise ValueError("need one mixture spec per grammar step")
        self.grammar = grammar
        self.seed = seed
        self.vocab_size = vocab_size or max(step.hi for step in grammar)
        self._tables = []
        for step, mixture in zip(grammar, step_mixtures):
            bins = np.arange(step.width, dtype=np.float64)
            density = np.zeros(step.width)
            for center, width, weight in mixture:
                density += weight * np.exp(-0.5 * ((bins - center) / width) ** 2)
            if not np.all(density >= 0) or density.sum() <= 0:
                raise ValueError("mixture must have positive total mass")
            row = np.full(self.vocab_size, NEG_INF)
            with np.errstate(divide="ignore"):  # zero density far from peaks
                row[step.lo:step.hi] = np.log(density / density.sum())
            self._tables.append(row)

    @classmethod
    def random(
        cls,
        grammar: Grammar,
        seed: int,
        n_peaks: tuple = (1, 3),
        width_range: tuple = (1.0, 4.0),
    ) -> "SyntheticScorer":
        """Random smooth multi-peaked scorer, reproducible per seed."""
        rng = np.random.default_rng(seed)
        mixtures = []
        for step in grammar:
            k = int(rng.integers(n_peaks[0], n_peaks[1] + 1))
            mixtures.append(
                [
                    (
                        float(rng.uniform(0, step.width - 1)),
                        float(rng.uniform(*width_range)),
                        float(rng.uniform(0.2, 1.0)),
                    )
                    for _ in range(k)
                ]
            )
        return cls(grammar, mixtures, seed=seed)

    def score(self, prefix) -> np.ndarray:
        k = len(prefix)
        if k >= len(self._tables):
            raise StepOutOfRange(f"step {k} beyond grammar length {len(self._tables)}")
        return self._tables[k]


# ---------------------------------------------------------------------------
# logit dumps (LGTD binary format)
# ---------------------------------------------------------------------------

LGTD_MAGIC = b"LGTD"
LGTD_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, vocab_size, num_steps


@dataclass(frozen=True, eq=False)
class LogitDump:
    """Raw per-step vocabulary logits recorded from a model."""

    vocab_size: int
    logits: np.ndarray  # (num_steps, vocab_size) float32, unnormalized

    @property
    def num_steps(self) -> int:
        return self.logits.shape[0]

    def log_probs(self, step: int) -> np.ndarray:
        if not 0 <= step < self.num_steps:
            raise StepOutOfRange(f"step {step} not in dump with {self.num_steps} steps")
        return _log_softmax(self.logits[step])


def write_dump(logits: np.ndarray, path) -> None:
    """Write a (steps, vocab) float matrix in LGTD layout (little-endian f32)."""
    arr = np.asarray(logits, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("logits must be a 2-D (steps, vocab) matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits must be finite")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(LGTD_MAGIC, LGTD_VERSION, arr.shape[1], arr.shape[0]))
        f.write(arr.astype("<f4").tobytes())


def read_dump(path) -> LogitDump:
    """Read an LGTD file; format errors carry the failing byte offset."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise DumpFormatError(
            f"file truncated at byte {len(data)}: header needs {_HEADER.size} bytes"
        )
    magic, version, vocab_size, num_steps = _HEADER.unpack_from(data, 0)
    if magic != LGTD_MAGIC:
        raise DumpFormatError(f"bad magic {magic!r} at byte 0, expected {LGTD_MAGIC!r}")
    if version != LGTD_VERSION:
        raise DumpFormatError(f"unsupported version {version} at byte 4")
    expected = _HEADER.size + 4 * vocab_size * num_steps
    if len(data) != expected:
        have_steps = (len(data) - _HEADER.size) // (4 * vocab_size) if vocab_size else 0
        raise DumpFormatError(
            f"payload ends at byte {len(data)}, expected {expected}: "
            f"step {have_steps} of {num_steps} is incomplete or missing"
        )
    logits = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return LogitDump(vocab_size=vocab_size, logits=logits.reshape(num_steps, vocab_size))


class ReplayScorer(Scorer):
    """Teacher-forced replay of a logit dump.

    ``score`` returns the recorded step-k log-probabilities regardless of the
    prefix content, so any decoding strategy can be re-run over a trace.
    """

    def __init__(self, dump: LogitDump, expected_vocab: int | None = None):
        if expected_vocab is not None and dump.vocab_size != expected_vocab:
            raise VocabMismatch(
                f"dump vocab {dump.vocab_size} != expected {expected_vocab}"
            )
        self._dump = dump
        self.vocab_size = dump.vocab_size

    def score(self, prefix) -> np.ndarray:
        return self._dump.log_probs(len(prefix))


def replay_scorer(dump: LogitDump, expected_vocab: int | None = None) -> ReplayScorer:
    return ReplayScorer(dump, expected_vocab)


# ---------------------------------------------------------------------------
# beams and shared step machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Beam:
    """A decoded hypothesis: token ids plus summed token log-probabilities."""

    tokens: tuple
    log_prob: float


def _masked_step(scorer: Scorer, grammar: Grammar, prefix, k: int) -> np.ndarray:
    """Grammar-masked log-probabilities for step k (full-vocab vector)."""
    step = grammar[k]
    if step.hi > scorer.vocab_size:
        raise VocabMismatch(
            f"grammar band [{step.lo}, {step.hi}) exceeds scorer vocab {scorer.vocab_size}"
        )
    logp = np.asarray(scorer.score(prefix), dtype=np.float64)
    masked = np.full(scorer.vocab_size, NEG_INF)
    masked[step.lo:step.hi] = logp[step.lo:step.hi]
    if not np.any(np.isfinite(masked)):
        raise DegenerateDistribution(f"no valid token has finite probability at step {k}")
    return masked


def _sorted_beams(beams) -> list:
    # Stable order: log_prob descending, token ids ascending on ties.
    return sorted(beams, key=lambda b: (-b.log_prob, b.tokens))


# ---------------------------------------------------------------------------
# decoding strategies
# ---------------------------------------------------------------------------

def decode_greedy(scorer: Scorer, grammar: Grammar) -> Beam:
    """Pick the argmax valid token at every step; ties go to the lowest id."""
    if len(grammar) == 0:
        raise ValueError("grammar must be nonempty")
    tokens = []
    total = 0.0
    for k in range(len(grammar)):
        logp = _masked_step(scorer, grammar, tokens, k)
        t = int(np.argmax(logp))  # first occurrence == lowest id on ties
        tokens.append(t)
        total += float(logp[t])
    return Beam(tuple(tokens), total)


def decode_sampling(
    scorer: Scorer,
    grammar: Grammar,
    temperature: float,
    seed: int,
    k: int,
) -> list:
    """Draw k independent sequences from the tempered token distributions.

    Invalid tokens are masked to -inf before sampling; the temperature is
    applied to the masked log-probabilities, which are then renormalized.
    Beam log_probs are the untempered model log-probabilities.  Reproducible
    for a fixed seed; returned beams are sorted by log_prob descending.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)
    beams = []
    for _ in range(k):
        tokens = []
        total = 0.0
        for step_idx in range(len(grammar)):
            logp = _masked_step(scorer, grammar, tokens, step_idx)
            scaled = logp / temperature
            scaled -= np.max(scaled)
            probs = np.exp(scaled)
            probs /= probs.sum()
            t = int(rng.choice(scorer.vocab_size, p=probs))
            tokens.append(t)
            total += float(logp[t])
        beams.append(Beam(tuple(tokens), total))
    return _sorted_beams(beams)


def _beam_expand(beams, logps, n: int) -> list:
    """Top-n expansion of beams by one step; deterministic tie-breaking.

    Per beam only the n best tokens can survive, so the candidate pool is
    each beam's stable-sorted top n (value descending, token id ascending on
    ties), globally re-sorted the same way.
    """
    candidates = []
    for beam, logp in zip(beams, logps):
        order = np.argsort(-logp, kind="stable")[:n]
        for t in order:
            lp = logp[t]
            if not np.isfinite(lp):
                break  # sorted descending: the rest are -inf too
            candidates.append(Beam(beam.tokens + (int(t),), beam.log_prob + float(lp)))
    candidates.sort(key=lambda b: (-b.log_prob, b.tokens))
    return candidates[:n]


def decode_beam(scorer: Scorer, grammar: Grammar, n: int) -> list:
    """Standard beam search with n beams, sorted by log_prob descending.

    No length normalization: every complete hypothesis has the same length.
    With n=1 this is exactly greedy decoding.
    """
    if n < 1:
        raise ValueError("beam count must be >= 1")
    beams = [Beam((), 0.0)]
    for k in range(len(grammar)):
        logps = [_masked_step(scorer, grammar, b.tokens, k) for b in beams]
        beams = _beam_expand(beams, logps, n)
    return _sorted_beams(beams)


def nms_1d(p: np.ndarray, w: int) -> np.ndarray:
    """Indices i with p[i] >= p[j] for all j in [i-w, i+w] (clipped to bounds).

    ``p`` is a 1-D probability (or any score) vector; returns the sorted
    surviving index array.  Plateaus survive in full because the comparison
    is >=.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("nms_1d expects a 1-D vector")
    if w < 1:
        raise ValueError("window must be >= 1")
    window_max = maximum_filter1d(p, size=2 * w + 1, mode="constant", cval=NEG_INF)
    return np.flatnonzero(p >= window_max)


def decode_beam_nms(
    scorer: Scorer,
    grammar: Grammar,
    n: int,
    window_loc: int = DEFAULT_WINDOW_LOC,
    window_seg: int = DEFAULT_WINDOW_SEG,
) -> list:
    """Beam search with per-step non-maximum suppression over the token band.

    At every step the valid-band distribution is reduced to its local maxima
    (window ``window_loc`` for loc steps, ``window_seg`` for seg steps, both
    inclusive in bins); all other tokens get log-probability -inf before the
    usual top-n expansion.
    """
    if n < 1:
        raise ValueError("beam count must be >= 1")
    if window_loc < 1 or window_seg < 1:
        raise ValueError("NMS windows must be >= 1")
    beams = [Beam((), 0.0)]
    for k in range(len(grammar)):
        step = grammar[k]
        w = window_loc if step.kind == "loc" else window_seg
        logps = []
        for b in beams:
            logp = _masked_step(scorer, grammar, b.tokens, k)
            band = np.exp(logp[step.lo:step.hi])
            keep = nms_1d(band, w) + step.lo
            suppressed = np.full_like(logp, NEG_INF)
            suppressed[keep] = logp[keep]
            if not np.any(np.isfinite(suppressed)):
                raise DegenerateDistribution(f"NMS left no maxima at step {k}")
            logps.append(suppressed)
        beams = _beam_expand(beams, logps, n)
    return _sorted_beams(beams)
