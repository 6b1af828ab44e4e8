"""Joint CTC/attention beam search, CER scoring, and ROVER combination.

Search is attention-driven: partial hypotheses are expanded by decoder
log-probabilities, while a CTC prefix scorer tracks for each hypothesis the
probability that the CTC output begins with exactly those tokens.  The two
scores are interpolated with weight `w_ctc`, plus an optional shallow-fusion
language model weighted by `w_lm`.  Hypotheses finalize on end-of-sequence
(where the CTC term switches from prefix probability to exact-sequence
probability) or at twice the encoder length.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .corpus import _meta_line, parse_meta_line
from .errors import ConfigurationError
from .nn import lengths_to_mask

LOG_ZERO = -1.0e30


@dataclass
class DecodeConfig:
    beam: int = 4
    w_ctc: float = 0.3
    w_lm: float = 0.2

    def validate(self):
        if self.beam < 1:
            raise ConfigurationError(f"beam must be >= 1, got {self.beam}")
        if not 0.0 <= self.w_ctc <= 1.0:
            raise ConfigurationError(f"w_ctc must be in [0, 1], got {self.w_ctc}")
        if self.w_lm < 0.0:
            raise ConfigurationError(f"w_lm must be >= 0, got {self.w_lm}")
        return self


@dataclass
class Hypothesis:
    tokens: tuple
    score_att: float
    score_ctc: float
    score_lm: float
    combined: float


def combine_scores(score_att, score_ctc, score_lm, config):
    return ((1.0 - config.w_ctc) * score_att + config.w_ctc * score_ctc
            + config.w_lm * score_lm)


class CTCPrefixScorer(object):
    """Incremental prefix probabilities under a CTC output distribution.

    For each prefix g it maintains per-frame log-probabilities that the
    collapsed output so far equals g, split by whether the path currently
    ends in g's last token (r_n) or in blank (r_b).  `log_psi` of a state is
    the log-probability that the full collapsed output *begins with* g;
    `final` gives the log-probability that it *equals* g.
    """

    def __init__(self, logprobs, blank):
        logprobs = np.asarray(logprobs, dtype=np.float64)
        if logprobs.ndim != 2 or logprobs.shape[0] < 1:
            raise ConfigurationError(f"need (T, C) log-probs, got {logprobs.shape}")
        self.logp = logprobs
        self.blank = blank
        self.t_len = logprobs.shape[0]

    def initial_state(self):
        """State for the empty prefix: only all-blank paths emit nothing."""
        r_b = np.cumsum(self.logp[:, self.blank])
        r_n = np.full(self.t_len, LOG_ZERO)
        return {"r_n": r_n, "r_b": r_b, "last": None, "log_psi": 0.0}

    def extend(self, state, token):
        """State for prefix+token; its log_psi is the new prefix score."""
        if token == self.blank:
            raise ConfigurationError("prefixes never contain the blank token")
        emit = self.logp[:, token]
        r_n_prev, r_b_prev = state["r_n"], state["r_b"]
        # phi_t: mass of the old prefix at frame t-1 that may start this token
        # (an identical final token must pass through a blank first)
        phi = np.empty(self.t_len)
        phi[0] = 0.0 if state["last"] is None else LOG_ZERO
        if state["last"] == token:
            phi[1:] = r_b_prev[:-1]
        else:
            phi[1:] = np.logaddexp(r_b_prev[:-1], r_n_prev[:-1])

        r_n = np.empty(self.t_len)
        r_b = np.empty(self.t_len)
        r_n[0] = emit[0] + phi[0]
        r_b[0] = LOG_ZERO
        for t in range(1, self.t_len):
            r_n[t] = emit[t] + np.logaddexp(phi[t], r_n[t - 1])
            r_b[t] = self.logp[t, self.blank] + np.logaddexp(r_b[t - 1], r_n[t - 1])
        log_psi = np.logaddexp.reduce(phi + emit)
        return {"r_n": r_n, "r_b": r_b, "last": token, "log_psi": float(log_psi)}

    def final(self, state):
        """Log-probability that the collapsed output equals this prefix."""
        if state["last"] is None:
            return float(state["r_b"][-1])
        return float(np.logaddexp(state["r_n"][-1], state["r_b"][-1]))


def ctc_prefix_score(ctc_logprobs, prefix, blank=None):
    """Log-probability that CTC output begins with `prefix`."""
    ctc_logprobs = np.asarray(ctc_logprobs, dtype=np.float64)
    blank = ctc_logprobs.shape[1] - 1 if blank is None else blank
    scorer = CTCPrefixScorer(ctc_logprobs, blank)
    state = scorer.initial_state()
    for token in prefix:
        state = scorer.extend(state, int(token))
    return state["log_psi"]


def lm_score(lm, tokens):
    """Autoregressive log-probability of `tokens` plus end-of-sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    ys_in = np.concatenate(([lm.sos_id], tokens))[None]
    logits = lm(ys_in).data[0]
    logp = logits - _lse(logits)
    targets = np.concatenate((tokens, [lm.eos_id]))
    return float(logp[np.arange(len(targets)), targets].sum())


def _lse(z):
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _last_step_logp(decoder, tokens, memory, memory_mask, memory2, memory2_mask):
    ys_in = np.concatenate(([decoder.sos_id], tokens)).astype(np.int64)[None]
    logits = decoder(ys_in, memory, memory_mask=memory_mask,
                     memory2=memory2, memory2_mask=memory2_mask).data[0, -1]
    return logits - _lse(logits)


def _lm_last_step_logp(lm, tokens):
    ys_in = np.concatenate(([lm.sos_id], tokens)).astype(np.int64)[None]
    logits = lm(ys_in).data[0, -1]
    return logits - _lse(logits)


@dataclass
class _Beam:
    tokens: tuple
    score_att: float
    score_lm: float
    ctc_state: dict


def beam_search(memory, ctc_head, decoder, config, lm=None, memory_length=None,
                memory2=None):
    """N-best joint CTC/attention decoding of one utterance.

    memory: (T, d) or (1, T, d) encoder output; memory2 feeds the second
    cross-attention of a dual-memory decoder.  Returns Hypothesis list sorted
    by combined score, descending (at most `config.beam` entries).
    """
    config.validate()
    if memory.ndim == 2:
        memory = memory.reshape((1,) + memory.shape)
        if memory2 is not None:
            memory2 = memory2.reshape((1,) + memory2.shape)
    t_enc = memory.shape[1] if memory_length is None else int(memory_length)
    if t_enc < 1:
        raise ConfigurationError("empty encoder output")
    memory_mask = lengths_to_mask([t_enc], memory.shape[1])
    memory2_mask = None
    if memory2 is not None:
        memory2_mask = lengths_to_mask([t_enc], memory2.shape[1])

    ctc_logits = ctc_head(memory[:, :t_enc]).data[0]
    ctc_logp = ctc_logits - _lse(ctc_logits)
    vocab = ctc_logits.shape[1] - 1              # trailing class is the blank
    scorer = CTCPrefixScorer(ctc_logp, blank=vocab)
    eos = decoder.eos_id
    max_len = 2 * t_enc

    beams = [_Beam((), 0.0, 0.0, scorer.initial_state())]
    finals = []

    def finalize(beam, att_eos, lm_eos):
        att = beam.score_att + att_eos
        ctc = scorer.final(beam.ctc_state)
        lm_total = beam.score_lm + lm_eos
        finals.append(Hypothesis(beam.tokens, att, ctc, lm_total,
                                 combine_scores(att, ctc, lm_total, config)))

    for _ in range(max_len + 1):
        candidates = []
        for beam in beams:
            att_logp = _last_step_logp(decoder, beam.tokens, memory, memory_mask,
                                       memory2, memory2_mask)
            lm_logp = np.zeros(vocab + 1)
            if lm is not None and config.w_lm > 0.0:
                lm_logp = _lm_last_step_logp(lm, beam.tokens)
            if len(beam.tokens) >= max_len:
                finalize(beam, att_logp[eos], lm_logp[eos])
                continue
            for token in range(vocab):
                state = scorer.extend(beam.ctc_state, token)
                att = beam.score_att + att_logp[token]
                lm_total = beam.score_lm + lm_logp[token]
                combined = combine_scores(att, state["log_psi"], lm_total, config)
                candidates.append((combined, _Beam(beam.tokens + (token,),
                                                   att, lm_total, state)))
            finalize(beam, att_logp[eos], lm_logp[eos])
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1].tokens))
        beams = [beam for _, beam in candidates[:config.beam]]

    finals.sort(key=lambda h: (-h.combined, h.tokens))
    return finals[:config.beam]


def levenshtein(a, b):
    """Edit distance with unit substitution/insertion/deletion costs."""
    a, b = list(a), list(b)
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return int(prev[-1])


def cer(ref, hyp):
    """Edit distance normalized by reference length."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ConfigurationError("reference transcript is empty")
    return levenshtein(ref, hyp) / len(ref)


NULL = None   # the absent-token candidate in a transition-network slot


@dataclass
class _Slot:
    counts: dict = field(default_factory=dict)   # token (or NULL) -> count
    first_seen: dict = field(default_factory=dict)   # token -> system index

    def add(self, token, system):
        self.counts[token] = self.counts.get(token, 0) + 1
        self.first_seen.setdefault(token, system)

    def vote(self):
        # highest count wins; ties go to the earliest contributing system
        return min(self.counts,
                   key=lambda tok: (-self.counts[tok], self.first_seen[tok]))


def _align_into(slots, tokens, system):
    """Edit-distance alignment of one hypothesis into the network (in place)."""
    n, m = len(slots), len(tokens)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    back = np.zeros((n + 1, m + 1), dtype=np.int8)   # 0 diag, 1 skip-slot, 2 insert
    back[1:, 0] = 1
    back[0, 1:] = 2
    for i in range(1, n + 1):
        hits = slots[i - 1].counts
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (0 if tokens[j - 1] in hits else 1)
            skip = cost[i - 1, j] + 1
            ins = cost[i, j - 1] + 1
            best = min(diag, skip, ins)
            cost[i, j] = best
            back[i, j] = 0 if best == diag else (1 if best == skip else 2)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        move = back[i, j]
        if move == 0:
            i, j = i - 1, j - 1
            ops.append(("match", i, tokens[j]))
        elif move == 1:
            i -= 1
            ops.append(("null", i, NULL))
        else:
            j -= 1
            ops.append(("insert", i, tokens[j]))
    out = []
    for op, slot_index, token in reversed(ops):
        if op == "insert":
            # a brand-new slot: every earlier system abstained here
            slot = _Slot()
            for earlier in range(system):
                slot.add(NULL, earlier)
            slot.add(token, system)
            out.append(slot)
        elif op == "match":
            slots[slot_index].add(token, system)
            out.append(slots[slot_index])
        else:
            slots[slot_index].add(NULL, system)
            out.append(slots[slot_index])
    return out


def rover(hyp_lists):
    """Majority-vote combination of several systems' token sequences.

    Hypotheses are aligned one at a time into a word transition network
    (first system verbatim); each slot then votes by count with ties broken
    toward the earliest system, and winning nulls delete their slot.

    Worked example: the first system seeds slots a|b|c.  The second aligns
    diagonally, leaving slot votes {a:2}, {b:1, x:1}, {c:2}; the third turns
    them into {a:3}, {b:2, x:1}, {c:2, d:1}, so every majority (ties broken
    toward system order) restores the first reading:

    >>> rover([["a", "b", "c"], ["a", "x", "c"], ["a", "b", "d"]])
    ['a', 'b', 'c']
    """
    if len(hyp_lists) < 2:
        raise ConfigurationError(f"need at least 2 systems, got {len(hyp_lists)}")
    slots = []
    first = _Slot()
    for token in hyp_lists[0]:
        slot = _Slot()
        slot.add(token, 0)
        slots.append(slot)
    for system, tokens in enumerate(hyp_lists[1:], start=1):
        slots = _align_into(slots, list(tokens), system)
    winners = [slot.vote() for slot in slots]
    return [tok for tok in winners if tok is not NULL]


def write_hypotheses(path, entries, meta=None):
    """entries: list of (utt_id, score, tokens); one line per utterance."""
    with open(path, "w") as f:
        if meta:
            f.write(_meta_line(meta))
        for utt_id, score, tokens in entries:
            toks = " ".join(str(int(t)) for t in tokens)
            f.write(f"{utt_id} {float(score)!r}{' ' if toks else ''}{toks}\n")


def read_hypotheses(path):
    """Returns (dict utt_id -> (score, token list), meta dict)."""
    out, meta = {}, {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#meta"):
                meta = parse_meta_line(line)
                continue
            parts = line.split()
            out[parts[0]] = (float(parts[1]), [int(t) for t in parts[2:]])
    return out, meta


def evaluate(references, hypotheses):
    """Corpus CER report: {"overall_cer": ..., "per_utt": {id: cer}}.

    overall_cer pools edit operations over utterances (total errors over
    total reference tokens), so long utterances weigh more than short ones.
    """
    missing = sorted(set(references) - set(hypotheses))
    if missing:
        raise ConfigurationError(f"hypotheses missing for {missing[:5]} "
                                 f"({len(missing)} of {len(references)})")
    per_utt = {}
    errors = 0
    total = 0
    for utt_id in sorted(references):
        ref = list(references[utt_id])
        hyp = list(hypotheses[utt_id])
        if not ref:
            raise ConfigurationError(f"{utt_id}: reference transcript is empty")
        d = levenshtein(ref, hyp)
        per_utt[utt_id] = d / len(ref)
        errors += d
        total += len(ref)
    return {"overall_cer": errors / total, "per_utt": per_utt}


def decode_corpus(utterances, encode_fn, ctc_head, decoder, config, lm=None):
    """Decode a list of utterances; returns list of (utt_id, score, tokens).

    encode_fn maps one utterance to (memory, memory_length) or
    ((audio_memory, visual_memory), memory_length) for dual-memory decoders.
    """
    entries = []
    for utt in utterances:
        memory, memory_length = encode_fn(utt)
        memory2 = None
        if isinstance(memory, tuple):
            memory, memory2 = memory
        hyps = beam_search(memory, ctc_head, decoder, config, lm=lm,
                           memory_length=memory_length, memory2=memory2)
        best = hyps[0]
        entries.append((utt.id, best.combined, list(best.tokens)))
    return entries
