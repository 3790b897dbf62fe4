import itertools

import numpy as np
import pytest

from conftest import brute_force_nms
from keypose.codec import CodecConfig, Grammar, GrammarStep, SEG_BASE
from keypose.decoder import (
    Beam,
    LogitDump,
    SyntheticScorer,
    decode_beam,
    decode_beam_nms,
    decode_greedy,
    decode_sampling,
    nms_1d,
    read_dump,
    replay_scorer,
    write_dump,
)
from keypose.errors import (
    DegenerateDistribution,
    DumpFormatError,
    StepOutOfRange,
    VocabMismatch,
)

GRAMMAR_12 = CodecConfig().grammar()


def tiny_grammar(widths, kinds=None):
    steps = []
    lo = 0
    kinds = kinds or ["loc"] * len(widths)
    for width, kind in zip(widths, kinds):
        steps.append(GrammarStep(kind, lo, lo + width))
        lo += width
    return Grammar(tuple(steps))


def delta_scorer(grammar, peaks):
    """Very narrow peaks: essentially one high-probability bin per step."""
    return SyntheticScorer(
        grammar, [[(peak, 0.05, 1.0)] for peak in peaks]
    )


# ---------------------------------------------------------------------------
# scorer basics
# ---------------------------------------------------------------------------

def test_synthetic_scorer_is_normalized_and_deterministic():
    sc = SyntheticScorer.random(GRAMMAR_12, seed=3)
    for k in range(len(GRAMMAR_12)):
        logp = sc.score([0] * k)
        lse = np.logaddexp.reduce(logp[np.isfinite(logp)])
        assert abs(lse) < 1e-6
        np.testing.assert_array_equal(logp, sc.score([5] * k))
    step = GRAMMAR_12[0]
    assert np.all(~np.isfinite(sc.score([])[:step.lo])) or step.lo == 0
    assert np.all(~np.isfinite(sc.score([])[step.hi:]))


def test_synthetic_scorer_requires_mixture_per_step():
    with pytest.raises(ValueError):
        SyntheticScorer(GRAMMAR_12, [[(0, 1, 1)]])


# ---------------------------------------------------------------------------
# greedy
# ---------------------------------------------------------------------------

def test_greedy_delta_peaks():
    grammar = tiny_grammar([16, 16, 16])
    sc = delta_scorer(grammar, [3, 7, 11])
    beam = decode_greedy(sc, grammar)
    assert beam.tokens == (3, 16 + 7, 32 + 11)
    assert beam.log_prob > -0.1  # nearly all mass on the peaks


def test_greedy_uniform_tie_breaks_to_lowest_id():
    grammar = tiny_grammar([8, 8])
    sc = SyntheticScorer(grammar, [[(0, 1e6, 1.0)], [(0, 1e6, 1.0)]])
    beam = decode_greedy(sc, grammar)
    assert beam.tokens == (0, 8)


def test_greedy_bimodal_takes_dominant_mode():
    grammar = tiny_grammar([1024] * 3)
    mixtures = [[(200, 2.0, 0.6), (700, 2.0, 0.4)]] * 3
    sc = SyntheticScorer(grammar, mixtures)
    beam = decode_greedy(sc, grammar)
    for k, t in enumerate(beam.tokens):
        assert abs(t - (k * 1024 + 200)) <= 1


def test_greedy_respects_grammar_mask():
    grammar = tiny_grammar([8, 8])
    sc = delta_scorer(grammar, [2, 5])
    beam = decode_greedy(sc, grammar)
    assert 0 <= beam.tokens[0] < 8
    assert 8 <= beam.tokens[1] < 16


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sampling_low_temperature_equals_greedy():
    grammar = tiny_grammar([64] * 4)
    sc = SyntheticScorer.random(grammar, seed=11)
    greedy = decode_greedy(sc, grammar)
    beams = decode_sampling(sc, grammar, temperature=1e-4, seed=0, k=5)
    for beam in beams:
        assert beam.tokens == greedy.tokens


def test_sampling_reproducible_for_fixed_seed():
    sc = SyntheticScorer.random(GRAMMAR_12, seed=2)
    a = decode_sampling(sc, GRAMMAR_12, temperature=1.0, seed=42, k=4)
    b = decode_sampling(sc, GRAMMAR_12, temperature=1.0, seed=42, k=4)
    assert [x.tokens for x in a] == [x.tokens for x in b]
    c = decode_sampling(sc, GRAMMAR_12, temperature=1.0, seed=43, k=4)
    assert [x.tokens for x in a] != [x.tokens for x in c]


def test_sampling_balanced_bimodal_frequencies():
    grammar = tiny_grammar([1024])
    sc = SyntheticScorer(grammar, [[(200, 1.5, 0.5), (700, 1.5, 0.5)]])
    beams = decode_sampling(sc, grammar, temperature=1.0, seed=7, k=1000)
    near_a = sum(1 for b in beams if abs(b.tokens[0] - 200) < 50)
    assert 0.45 <= near_a / 1000 <= 0.55


def test_sampling_rejects_nonpositive_temperature():
    sc = SyntheticScorer.random(GRAMMAR_12, seed=0)
    with pytest.raises(ValueError):
        decode_sampling(sc, GRAMMAR_12, temperature=0.0, seed=0, k=1)


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------

def test_beam_n1_equals_greedy_over_100_random_scorers():
    grammar = tiny_grammar([64, 64, 64, 64])
    for seed in range(100):
        sc = SyntheticScorer.random(grammar, seed=seed)
        assert decode_beam(sc, grammar, 1)[0] == decode_greedy(sc, grammar)


def test_beam_single_peak_neighbors():
    grammar = tiny_grammar([1024])
    sc = SyntheticScorer(grammar, [[(500, 2.0, 1.0)]])
    beams = decode_beam(sc, grammar, 3)
    assert beams[0].tokens == (500,)
    assert {beams[1].tokens[0], beams[2].tokens[0]} == {499, 501}


def test_beam_clusters_on_dominant_mode():
    # the failure mode motivating NMS: narrow bimodal peaks, beams pile up
    grammar = tiny_grammar([1024] * 2)
    sc = SyntheticScorer(grammar, [[(300, 2.0, 0.6), (800, 2.0, 0.4)]] * 2)
    beams = decode_beam(sc, grammar, 3)
    for beam in beams:
        for k, t in enumerate(beam.tokens):
            assert abs(t - (k * 1024 + 300)) <= 2


def test_beam_exact_on_factorized_scorers():
    # per-step-independent scorers make beam search exact: compare against
    # exhaustive enumeration of all grammar-valid sequences
    grammar = tiny_grammar([6, 5, 4])
    for seed in range(100):
        sc = SyntheticScorer.random(grammar, seed=seed, width_range=(0.5, 3.0))
        tables = [sc.score([0] * k) for k in range(3)]
        scored = []
        for combo in itertools.product(*[range(s.lo, s.hi) for s in grammar]):
            total = sum(float(tables[k][t]) for k, t in enumerate(combo))
            scored.append(Beam(combo, total))
        scored.sort(key=lambda b: (-b.log_prob, b.tokens))
        beams = decode_beam(sc, grammar, 4)
        for ours, best in zip(beams, scored[:4]):
            assert ours.tokens == best.tokens
            assert ours.log_prob == pytest.approx(best.log_prob, abs=1e-9)


def test_beams_sorted_finite_and_grammar_valid():
    sc = SyntheticScorer.random(GRAMMAR_12, seed=5)
    for beams in (
        decode_beam(sc, GRAMMAR_12, 3),
        decode_beam_nms(sc, GRAMMAR_12, 3),
        decode_sampling(sc, GRAMMAR_12, temperature=1.0, seed=1, k=3),
    ):
        probs = [b.log_prob for b in beams]
        assert probs == sorted(probs, reverse=True)
        for beam in beams:
            assert np.isfinite(beam.log_prob) and beam.log_prob <= 0
            GRAMMAR_12.validate(beam.tokens)


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def test_nms_separated_peaks_both_survive():
    p = np.zeros(1024)
    p[100], p[500] = 0.5, 0.6
    survivors = set(nms_1d(p, 100))
    assert {100, 500} <= survivors


def test_nms_close_peaks_suppress_weaker():
    p = np.zeros(1024)
    p[100], p[150] = 0.6, 0.5
    survivors = set(nms_1d(p, 100))
    assert 100 in survivors and 150 not in survivors


def test_nms_constant_distribution_keeps_every_bin():
    p = np.full(64, 0.015625)
    np.testing.assert_array_equal(nms_1d(p, 10), np.arange(64))


def test_nms_matches_brute_force_small(rng):
    for w in (1, 3, 12, 50):
        for _ in range(50):
            p = rng.random(257)
            if rng.random() < 0.5:
                p = np.round(p, 2)  # force plateaus and ties
            np.testing.assert_array_equal(nms_1d(p, w), brute_force_nms(p, w))


def test_nms_window_extremes(rng):
    p = rng.random(512)
    # w >= band width: only the global maxima survive
    global_max = np.flatnonzero(p == p.max())
    np.testing.assert_array_equal(nms_1d(p, 512), global_max)
    # w = 1: strict-neighborhood local maxima
    expected = [
        i for i in range(512)
        if (i == 0 or p[i] >= p[i - 1]) and (i == 511 or p[i] >= p[i + 1])
    ]
    np.testing.assert_array_equal(nms_1d(p, 1), expected)


def test_nms_rejects_bad_args(rng):
    with pytest.raises(ValueError):
        nms_1d(rng.random(8), 0)
    with pytest.raises(ValueError):
        nms_1d(rng.random((4, 4)), 1)


def test_beam_nms_explores_both_modes():
    grammar = tiny_grammar([1024] * 2)
    sc = SyntheticScorer(grammar, [[(300, 2.0, 0.6), (800, 2.0, 0.4)]] * 2)
    beams = decode_beam_nms(sc, grammar, 3)
    assert beams[0].tokens == (300, 1024 + 300)
    flat = [t - 1024 * k for b in beams[1:] for k, t in enumerate(b.tokens)]
    assert any(abs(t - 800) <= 2 for t in flat)


def test_beam_nms_seg_window_narrower():
    # peaks 30 bins apart in the 128-wide seg band: the seg window (12) keeps
    # both, the loc window (100) would not
    grammar = Grammar((GrammarStep("seg", SEG_BASE, SEG_BASE + 128),))
    sc = SyntheticScorer(grammar, [[(40, 1.5, 0.6), (70, 1.5, 0.4)]])
    beams = decode_beam_nms(sc, grammar, 2)
    firsts = {b.tokens[0] - SEG_BASE for b in beams}
    assert firsts == {40, 70}
    beams_wide = decode_beam_nms(sc, grammar, 2, window_seg=100)
    firsts_wide = {b.tokens[0] - SEG_BASE for b in beams_wide}
    assert 70 not in firsts_wide


def test_beam_nms_uses_loc_window_for_depth_steps():
    # depth is a loc-band coordinate: peaks closer than window_loc collapse
    grammar = tiny_grammar([1024])
    sc = SyntheticScorer(grammar, [[(300, 2.0, 0.6), (360, 2.0, 0.4)]])
    beams = decode_beam_nms(sc, grammar, 2)
    assert all(abs(b.tokens[0] - 300) <= 2 for b in beams)


def test_degenerate_distribution_guard():
    grammar = tiny_grammar([8])

    class AllNegInf(SyntheticScorer):
        def __init__(self):
            self.vocab_size = 8

        def score(self, prefix):
            return np.full(8, -np.inf)

    with pytest.raises(DegenerateDistribution):
        decode_greedy(AllNegInf(), grammar)


# ---------------------------------------------------------------------------
# logit dumps and replay
# ---------------------------------------------------------------------------

def test_dump_roundtrip(tmp_path, rng):
    logits = rng.normal(size=(12, 1152)).astype(np.float32)
    path = tmp_path / "trace.lgtd"
    write_dump(logits, path)
    dump = read_dump(path)
    assert dump.vocab_size == 1152
    assert dump.num_steps == 12
    np.testing.assert_array_equal(dump.logits, logits)


def test_dump_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.lgtd"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(DumpFormatError) as exc:
        read_dump(path)
    assert "byte 0" in str(exc.value)


def test_dump_rejects_bad_version(tmp_path, rng):
    path = tmp_path / "v9.lgtd"
    write_dump(rng.normal(size=(1, 4)).astype(np.float32), path)
    data = bytearray(path.read_bytes())
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(DumpFormatError) as exc:
        read_dump(path)
    assert "version" in str(exc.value)


def test_dump_truncation_names_missing_step(tmp_path, rng):
    path = tmp_path / "t.lgtd"
    write_dump(rng.normal(size=(12, 64)).astype(np.float32), path)
    data = path.read_bytes()
    path.write_bytes(data[: 16 + 4 * 64 * 7 + 13])  # cut inside step 7
    with pytest.raises(DumpFormatError) as exc:
        read_dump(path)
    assert "step 7" in str(exc.value)


def test_dump_empty_steps_accepted(tmp_path):
    path = tmp_path / "empty.lgtd"
    write_dump(np.zeros((0, 16), dtype=np.float32), path)
    dump = read_dump(path)
    assert dump.num_steps == 0 and dump.vocab_size == 16


def test_dump_rejects_nonfinite():
    with pytest.raises(ValueError):
        write_dump(np.array([[np.nan, 0.0]]), "/dev/null")


def test_replay_reproduces_greedy_trace(tmp_path, rng):
    grammar = tiny_grammar([32, 32, 32])
    logits = rng.normal(size=(3, 96)).astype(np.float32)
    path = tmp_path / "g.lgtd"
    write_dump(logits, path)
    scorer = replay_scorer(read_dump(path))
    beam = decode_greedy(scorer, grammar)
    expected = tuple(
        int(step.lo + np.argmax(logits[k, step.lo:step.hi]))
        for k, step in enumerate(grammar)
    )
    assert beam.tokens == expected


def test_replay_vocab_mismatch():
    dump = LogitDump(vocab_size=8, logits=np.zeros((2, 8), dtype=np.float32))
    with pytest.raises(VocabMismatch):
        replay_scorer(dump, expected_vocab=1152)


def test_replay_step_out_of_range():
    dump = LogitDump(vocab_size=8, logits=np.zeros((1, 8), dtype=np.float32))
    scorer = replay_scorer(dump)
    grammar = tiny_grammar([4, 4])
    with pytest.raises(StepOutOfRange):
        decode_greedy(scorer, grammar)


def test_replay_log_probs_normalized(rng):
    dump = LogitDump(
        vocab_size=64, logits=rng.normal(size=(2, 64)).astype(np.float32)
    )
    lse = np.logaddexp.reduce(dump.log_probs(0))
    assert abs(lse) < 1e-6


def test_nms_over_dumped_bimodal_matches_oracle(tmp_path):
    vocab = 128
    logits = np.full((1, vocab), -8.0, dtype=np.float32)
    logits[0, 30] = 2.0
    logits[0, 90] = 1.5
    path = tmp_path / "bi.lgtd"
    write_dump(logits, path)
    dump = read_dump(path)
    grammar = tiny_grammar([vocab])
    probs = np.exp(dump.log_probs(0))
    np.testing.assert_array_equal(nms_1d(probs, 12), brute_force_nms(probs, 12))
    beams = decode_beam_nms(replay_scorer(dump), grammar, 2, window_loc=12)
    assert {b.tokens[0] for b in beams} == {30, 90}
