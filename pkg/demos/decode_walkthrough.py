"""How a hypothesis earns its score, worked at paper-and-pencil size.

Three stops: the CTC prefix scorer on a two-frame example small enough to
check by hand, beam search against literal enumeration of every candidate
sequence, and ROVER voting over three systems that disagree.

    python demos/decode_walkthrough.py
"""

import itertools

import numpy as np

from avsrkit.autodiff import Tensor
from avsrkit.decoder import TransformerDecoder
from avsrkit.decoding import (DecodeConfig, CTCPrefixScorer, beam_search,
                              combine_scores, ctc_prefix_score, rover)
from avsrkit.nn import Linear

# -- 1. the prefix scorer, by hand -------------------------------------------
#
# Two frames, alphabet {a, blank}, uniform probabilities.  The four frame
# paths are aa, a-, -a, --; the first three all begin emitting "a", so the
# probability that the output starts with "a" is 3/4.
logp = np.full((2, 2), np.log(0.5))
score = ctc_prefix_score(logp, [0])
print(f"prefix 'a' on uniform 2-frame lattice: exp({score:.4f}) = "
      f"{np.exp(score):.4f} (hand count: 3/4)")

# The scorer is incremental: extending a prefix one token at a time and
# stopping must account for exactly the prefix's probability mass.
scorer = CTCPrefixScorer(logp, blank=1)
state = scorer.extend(scorer.initial_state(), 0)
leftover = np.exp(scorer.final(state)) + np.exp(scorer.extend(state, 0)["log_psi"])
print(f"mass conservation: finish + extend = {leftover:.4f} "
      f"= prefix mass {np.exp(state['log_psi']):.4f}")

# -- 2. beam search vs writing every sequence down ---------------------------

rng = np.random.default_rng(7)
vocab, t_enc, d = 3, 2, 8
memory = Tensor(rng.normal(size=(1, t_enc, d)) * 1.5)
ctc_head = Linear(d, vocab + 1, rng)
decoder = TransformerDecoder(vocab, d, 2, 16, 1, rng)
config = DecodeConfig(beam=64, w_ctc=0.3, w_lm=0.0)


def lse(z):
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def att_score(tokens):
    ys = np.concatenate(([decoder.sos_id], tokens)).astype(np.int64)
    lp = decoder(ys[None], memory).data[0]
    lp = lp - lse(lp)
    targets = np.concatenate((tokens, [decoder.eos_id])).astype(np.int64)
    return float(lp[np.arange(len(targets)), targets].sum())


ctc_logits = ctc_head(memory).data[0]
ctc_logp = ctc_logits - lse(ctc_logits)
exact = {}
for path in itertools.product(range(vocab + 1), repeat=t_enc):
    key = tuple(k for k, _ in itertools.groupby(path) if k != vocab)
    exact[key] = exact.get(key, 0.0) + np.exp(sum(ctc_logp[t, k]
                                                  for t, k in enumerate(path)))

best = None
for length in range(0, t_enc + 1):
    for tokens in itertools.product(range(vocab), repeat=length):
        mass = exact.get(tokens, 0.0)
        ctc = np.log(mass) if mass > 0 else -1e30
        combined = combine_scores(att_score(np.array(tokens)), ctc, 0.0, config)
        if best is None or combined > best[0]:
            best = (combined, tokens)

hyps = beam_search(memory, ctc_head, decoder, config)
print(f"\nbrute force best: {best[1]} at {best[0]:.4f}")
print(f"beam search best: {hyps[0].tokens} at {hyps[0].combined:.4f}")

# A width-1 beam is greedy search: here it commits to the wrong first token
# and cannot recover.  The best combined score never drops as the beam widens.
print("beam width sweep:", end="")
for beam in (1, 2, 4, 8):
    config.beam = beam
    print(f"  {beam}: {beam_search(memory, ctc_head, decoder, config)[0].combined:.4f}",
          end="")
print()

# -- 3. three systems walk into a vote ---------------------------------------
#
# Aligned slot by slot: a|b|c vs a|x|c vs a|b|d.  "a" is unanimous, "b" beats
# "x" two to one, "c" beats "d" two to one.
systems = [["a", "b", "c"], ["a", "x", "c"], ["a", "b", "d"]]
print(f"\nrover{tuple(map(tuple, systems))} = {rover(systems)}")

# A system that inserts a token the others lack loses the vote 2:1 against
# the empty slot, so the insertion is dropped.
systems = [["a", "b"], ["a", "q", "b"], ["a", "b"]]
print(f"rover{tuple(map(tuple, systems))} = {rover(systems)}")
