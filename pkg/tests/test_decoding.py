import itertools

import numpy as np
import pytest

from avsrkit.autodiff import Tensor
from avsrkit.decoder import TransformerDecoder, TransformerLM
from avsrkit.decoding import (CTCPrefixScorer, DecodeConfig, Hypothesis,
                              beam_search, cer, combine_scores,
                              ctc_prefix_score, evaluate, levenshtein,
                              lm_score, read_hypotheses, rover,
                              write_hypotheses)
from avsrkit.errors import ConfigurationError
from avsrkit.nn import Linear


def uniform_logp(t_len, n_class):
    return np.full((t_len, n_class), -np.log(n_class))


def collapse(path, blank):
    out = [k for k, _ in itertools.groupby(path)]
    return tuple(k for k in out if k != blank)


def enumerate_exact_probs(logp, blank):
    """Map collapsed sequence -> probability, by full path enumeration."""
    t_len, n_class = logp.shape
    table = {}
    for path in itertools.product(range(n_class), repeat=t_len):
        key = collapse(path, blank)
        p = np.exp(sum(logp[t, k] for t, k in enumerate(path)))
        table[key] = table.get(key, 0.0) + p
    return table


def prefix_prob(table, prefix):
    prefix = tuple(prefix)
    return sum(p for seq, p in table.items() if seq[:len(prefix)] == prefix)


def test_prefix_score_empty_prefix_is_zero():
    logp = uniform_logp(3, 4)
    assert ctc_prefix_score(logp, []) == 0.0


def test_prefix_score_two_frame_example():
    # uniform over {a, blank}: of the 4 paths, aa / a- / -a start with "a"
    logp = uniform_logp(2, 2)
    np.testing.assert_allclose(ctc_prefix_score(logp, [0]), np.log(3 / 4), atol=1e-12)


def test_prefix_score_matches_enumeration():
    rng = np.random.default_rng(0)
    for t_len in (1, 2, 3, 4):
        for vocab in (1, 2, 3):
            logits = rng.normal(size=(t_len, vocab + 1))
            logp = logits - _lse(logits)
            table = enumerate_exact_probs(logp, blank=vocab)
            for length in range(0, 3):
                for prefix in itertools.product(range(vocab), repeat=length):
                    want = prefix_prob(table, prefix)
                    got = np.exp(ctc_prefix_score(logp, prefix))
                    np.testing.assert_allclose(got, want, atol=1e-10,
                                               err_msg=str((t_len, vocab, prefix)))


def _lse(z):
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def test_prefix_score_conservation():
    # extending by every token plus stopping exactly recovers the prefix mass
    rng = np.random.default_rng(1)
    for t_len in (1, 2, 3, 4):
        for vocab in (2, 3):
            logits = rng.normal(size=(t_len, vocab + 1))
            logp = logits - _lse(logits)
            scorer = CTCPrefixScorer(logp, blank=vocab)
            for prefix in [(), (0,), (0, 1)]:
                state = scorer.initial_state()
                for token in prefix:
                    state = scorer.extend(state, token)
                mass = np.exp(scorer.final(state))
                for token in range(vocab):
                    mass += np.exp(scorer.extend(state, token)["log_psi"])
                np.testing.assert_allclose(mass, np.exp(state["log_psi"]),
                                           atol=1e-10)


def test_prefix_scorer_rejects_blank():
    scorer = CTCPrefixScorer(uniform_logp(2, 3), blank=2)
    with pytest.raises(ConfigurationError):
        scorer.extend(scorer.initial_state(), 2)


class SearchFixture:
    def __init__(self, seed=0, vocab=3, t_enc=2, d_model=8):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.t_enc = t_enc
        self.memory = Tensor(rng.normal(size=(1, t_enc, d_model)))
        self.ctc_head = Linear(d_model, vocab + 1, rng)
        self.decoder = TransformerDecoder(vocab, d_model, 2, 16, 1, rng)
        self.lm = TransformerLM(vocab, d_model, 2, 16, 1, rng)

    def att_score(self, tokens):
        ys_in = np.concatenate(([self.decoder.sos_id], tokens)).astype(np.int64)
        logits = self.decoder(ys_in[None], self.memory).data[0]
        logp = logits - _lse(logits)
        targets = np.concatenate((tokens, [self.decoder.eos_id])).astype(np.int64)
        return float(logp[np.arange(len(targets)), targets].sum())

    def ctc_exact_table(self):
        logits = self.ctc_head(self.memory).data[0]
        logp = logits - _lse(logits)
        return enumerate_exact_probs(logp, blank=self.vocab)

    def exhaustive_best(self, config, with_lm=False):
        table = self.ctc_exact_table()
        best = None
        for length in range(0, 2 * self.t_enc + 1):
            for tokens in itertools.product(range(self.vocab), repeat=length):
                tokens = np.array(tokens, dtype=np.int64)
                att = self.att_score(tokens)
                exact = table.get(tuple(tokens), 0.0)
                ctc = np.log(exact) if exact > 0 else -1e30
                lm = lm_score(self.lm, tokens) if with_lm else 0.0
                combined = combine_scores(att, ctc, lm, config)
                if best is None or combined > best[0]:
                    best = (combined, tuple(tokens))
        return best


def test_beam_search_matches_exhaustive_oracle():
    for seed in range(4):
        fx = SearchFixture(seed=seed)
        config = DecodeConfig(beam=128, w_ctc=0.3, w_lm=0.0)
        hyps = beam_search(fx.memory, fx.ctc_head, fx.decoder, config)
        want_score, want_tokens = fx.exhaustive_best(config)
        assert hyps[0].tokens == want_tokens, seed
        np.testing.assert_allclose(hyps[0].combined, want_score, atol=1e-8)


def test_beam_search_with_lm_matches_exhaustive_oracle():
    fx = SearchFixture(seed=5)
    config = DecodeConfig(beam=128, w_ctc=0.3, w_lm=0.2)
    hyps = beam_search(fx.memory, fx.ctc_head, fx.decoder, config, lm=fx.lm)
    want_score, want_tokens = fx.exhaustive_best(config, with_lm=True)
    assert hyps[0].tokens == want_tokens
    np.testing.assert_allclose(hyps[0].combined, want_score, atol=1e-8)


def test_pure_attention_scores_match_teacher_forcing():
    fx = SearchFixture(seed=6)
    config = DecodeConfig(beam=8, w_ctc=0.0, w_lm=0.0)
    hyps = beam_search(fx.memory, fx.ctc_head, fx.decoder, config)
    best = hyps[0]
    np.testing.assert_allclose(best.combined, best.score_att, atol=1e-12)
    np.testing.assert_allclose(best.score_att,
                               fx.att_score(np.array(best.tokens, dtype=np.int64)),
                               atol=1e-10)


def test_beam_search_nbest_sorted_and_consistent():
    fx = SearchFixture(seed=7)
    config = DecodeConfig(beam=6, w_ctc=0.3, w_lm=0.2)
    hyps = beam_search(fx.memory, fx.ctc_head, fx.decoder, config, lm=fx.lm)
    assert len(hyps) <= 6
    scores = [h.combined for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        np.testing.assert_allclose(
            h.combined, combine_scores(h.score_att, h.score_ctc, h.score_lm, config),
            atol=1e-12)


def test_beam_search_monotone_in_beam_width():
    for seed in range(6):
        fx = SearchFixture(seed=seed, t_enc=3)
        config = DecodeConfig(w_ctc=0.3, w_lm=0.0)
        prev = -np.inf
        for beam in (1, 2, 4, 8):
            config.beam = beam
            hyps = beam_search(fx.memory, fx.ctc_head, fx.decoder, config)
            assert hyps[0].combined >= prev - 1e-12, (seed, beam)
            prev = hyps[0].combined


def test_beam_search_rejects_empty_memory():
    fx = SearchFixture(seed=8)
    with pytest.raises(ConfigurationError):
        beam_search(fx.memory, fx.ctc_head, fx.decoder, DecodeConfig(),
                    memory_length=0)


def test_decode_config_validation():
    with pytest.raises(ConfigurationError):
        DecodeConfig(beam=0).validate()
    with pytest.raises(ConfigurationError):
        DecodeConfig(w_ctc=1.5).validate()
    with pytest.raises(ConfigurationError):
        DecodeConfig(w_lm=-0.1).validate()


def test_lm_score_uniform():
    lm = TransformerLM(4, 8, 2, 16, 1, np.random.default_rng(9))
    lm.out_proj.w.data[:] = 0.0
    lm.out_proj.b.data[:] = 0.0
    np.testing.assert_allclose(lm_score(lm, [0, 2]), 3 * np.log(1 / 5), atol=1e-12)


def test_lm_score_deterministic():
    lm = TransformerLM(4, 8, 2, 16, 1, np.random.default_rng(10))
    assert lm_score(lm, [1, 2, 3]) == lm_score(lm, [1, 2, 3])


def test_levenshtein_and_cer():
    assert levenshtein("abc", "abc") == 0
    assert levenshtein("abc", "axc") == 1
    assert levenshtein("ab", "") == 2
    assert levenshtein("abc", "bca") == levenshtein("bca", "abc")
    assert cer("abc", "abc") == 0.0
    np.testing.assert_allclose(cer(["a", "b", "c"], ["a", "x", "c"]), 1 / 3)
    np.testing.assert_allclose(cer("ab", ""), 1.0)
    with pytest.raises(ConfigurationError):
        cer("", "a")


def test_rover_majority_vote():
    out = rover([["a", "b", "c"], ["a", "x", "c"], ["a", "b", "d"]])
    assert out == ["a", "b", "c"]


def test_rover_identity():
    out = rover([["p", "q"], ["p", "q"], ["p", "q"]])
    assert out == ["p", "q"]


def test_rover_total_disagreement_prefers_first_system():
    assert rover([["p", "q"], ["r", "s"]]) == ["p", "q"]


def test_rover_null_majority_deletes_slot():
    out = rover([["a", "b"], ["a", "x", "b"], ["a", "b"]])
    assert out == ["a", "b"]


def test_rover_insertion_kept_when_majority():
    out = rover([["a", "x", "b"], ["a", "x", "b"], ["a", "b"]])
    assert out == ["a", "x", "b"]


def test_rover_empty_hypothesis_aligns_to_nulls():
    assert rover([["a"], []]) == ["a"]
    assert rover([[], [], ["a"]]) == []


def test_rover_needs_two_systems():
    with pytest.raises(ConfigurationError):
        rover([["a"]])


def test_hypothesis_file_round_trip(tmp_path):
    entries = [("utt-1", -3.25, [0, 2, 1]), ("utt-2", -0.5, [])]
    path = tmp_path / "hyp.txt"
    write_hypotheses(path, entries, meta={"config_hash": "abc123"})
    back, meta = read_hypotheses(path)
    assert back["utt-1"] == (-3.25, [0, 2, 1])
    assert back["utt-2"] == (-0.5, [])
    assert meta["config_hash"] == "abc123"


def test_evaluate_report():
    refs = {"u1": [0, 1, 2], "u2": [3, 3]}
    hyps = {"u1": [0, 1, 2], "u2": [3]}
    report = evaluate(refs, hyps)
    np.testing.assert_allclose(report["per_utt"]["u1"], 0.0)
    np.testing.assert_allclose(report["per_utt"]["u2"], 0.5)
    np.testing.assert_allclose(report["overall_cer"], 1 / 5)
    with pytest.raises(ConfigurationError):
        evaluate(refs, {"u1": [0]})
