"""Monophone GMM-HMM training and Viterbi forced alignment.

Models are 3-state strictly left-to-right (self-loop or advance, no skips)
with diagonal-covariance GMM emissions.  Training is Viterbi-style EM: align
every utterance with the current model, then re-estimate emissions (soft
component responsibilities within the hard state assignment) and transition
probabilities from counts.  At fixed mixture structure the Viterbi-path
log-likelihood is non-decreasing across iterations.

The per-frame labels produced by `forced_align` are "senones": dense ids for
(unit, state) pairs, the classification targets of visual pre-training.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.special import logsumexp

from .container import save_arrays, load_arrays
from .errors import AlignmentInfeasibleError, ConfigurationError, TrainingError

log = logging.getLogger(__name__)

LOG_ZERO = -1e30


@dataclass
class HMMConfig:
    states_per_unit: int = 3
    var_floor: float = 1e-3
    trans_floor: float = 1e-3
    self_loop_init: float = 0.5


@dataclass
class HMMModel:
    """Parameter bundle for U units x S states, each with a K-component GMM."""

    num_units: int
    states_per_unit: int
    trans: np.ndarray       # (U, S, 2): (self-loop, forward) probabilities
    weights: np.ndarray     # (U, S, K)
    means: np.ndarray       # (U, S, K, D)
    variances: np.ndarray   # (U, S, K, D)
    var_floor: float = 1e-3
    trans_floor: float = 1e-3

    @property
    def num_components(self):
        return self.weights.shape[2]

    @property
    def feature_dim(self):
        return self.means.shape[3]

    def validate(self):
        if not np.allclose(self.trans.sum(axis=2), 1.0, atol=1e-10):
            raise ConfigurationError("self-loop + forward must equal 1 per state")
        live = self.weights.sum(axis=2)
        if not np.allclose(live, 1.0, atol=1e-8):
            raise ConfigurationError("GMM weights must sum to 1 per state")
        if np.any(self.variances < self.var_floor - 1e-12):
            raise ConfigurationError("variances below floor")
        return self

    def state_log_likelihood(self, frames):
        """Log-likelihood of every frame under every (unit, state) GMM.

        frames: (T, D) -> returns (T, U, S).
        """
        u, s, k, d = self.means.shape
        means = self.means.reshape(u * s * k, d)
        variances = self.variances.reshape(u * s * k, d)
        inv = 1.0 / variances
        const = -0.5 * (d * np.log(2.0 * np.pi) + np.log(variances).sum(axis=1))
        # -(x-m)^2/(2v) expanded into three matmuls over the frame matrix
        quad = (frames ** 2) @ (-0.5 * inv).T + frames @ (means * inv).T \
            - 0.5 * np.sum(means ** 2 * inv, axis=1)
        comp_ll = quad + const                                    # (T, U*S*K)
        with np.errstate(divide="ignore"):
            logw = np.where(self.weights > 0, np.log(np.maximum(self.weights, 1e-300)),
                            LOG_ZERO).reshape(u * s * k)
        comp_ll = comp_ll.reshape(-1, u, s, k)
        return logsumexp(comp_ll + logw.reshape(u, s, k), axis=3)

    def component_log_likelihood(self, frames, unit, state):
        """Per-component log w_k + log N_k for one state; frames (T, D) -> (T, K)."""
        m = self.means[unit, state]
        v = self.variances[unit, state]
        w = self.weights[unit, state]
        diff = frames[:, None, :] - m[None, :, :]
        ll = -0.5 * (m.shape[1] * np.log(2.0 * np.pi)
                     + np.log(v).sum(axis=1)[None, :]
                     + (diff ** 2 / v[None, :, :]).sum(axis=2))
        with np.errstate(divide="ignore"):
            logw = np.where(w > 0, np.log(np.maximum(w, 1e-300)), LOG_ZERO)
        return ll + logw[None, :]


@dataclass
class AlignmentLabels:
    utt_id: str
    labels: np.ndarray      # (T,) senone ids
    num_senones: int
    score: float = 0.0      # joint log-prob of the Viterbi path

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and not (0 <= self.labels.min() and self.labels.max() < self.num_senones):
            raise ConfigurationError(f"{self.utt_id}: labels outside [0, {self.num_senones})")


@dataclass
class SenoneInventory:
    """Dense bijection (unit, state) <-> senone id, row-major by (unit, state)."""

    num_units: int
    states_per_unit: int

    @property
    def size(self):
        return self.num_units * self.states_per_unit

    def senone_id(self, unit, state):
        if not (0 <= unit < self.num_units and 0 <= state < self.states_per_unit):
            raise ConfigurationError(f"no senone for unit={unit}, state={state}")
        return unit * self.states_per_unit + state

    def unit_state(self, senone):
        if not (0 <= senone < self.size):
            raise ConfigurationError(f"senone id {senone} outside [0, {self.size})")
        return divmod(senone, self.states_per_unit)


def build_inventory(model):
    return SenoneInventory(model.num_units, model.states_per_unit)


def viterbi_path(emission_ll, log_self, log_fwd):
    """Best strictly left-to-right path through all states.

    emission_ll: (T, J) per-frame state log-likelihoods for the J concatenated
    states; log_self/log_fwd: (J,) transition log-probs.  The path starts in
    state 0, ends in state J-1, and advances by 0 or 1 per frame.  Ties prefer
    the self-loop.  Returns (path (T,), score).
    """
    t_len, j_len = emission_ll.shape
    if t_len < j_len:
        raise AlignmentInfeasibleError(
            f"cannot fit {j_len} states into {t_len} frames")
    delta = np.full(j_len, LOG_ZERO)
    delta[0] = emission_ll[0, 0]
    back = np.zeros((t_len, j_len), dtype=np.int8)
    for t in range(1, t_len):
        stay = delta + log_self
        move = np.full(j_len, LOG_ZERO)
        move[1:] = delta[:-1] + log_fwd[:-1]
        choose_move = move > stay
        back[t] = choose_move
        delta = np.where(choose_move, move, stay) + emission_ll[t]
    path = np.empty(t_len, dtype=np.int64)
    j = j_len - 1
    score = float(delta[j])
    for t in range(t_len - 1, -1, -1):
        path[t] = j
        if t > 0 and back[t, j]:
            j -= 1
    return path, score


def _transcript_state_table(states_per_unit, transcript):
    """Per-position (unit, state) pairs for a transcript's concatenated HMMs."""
    units = np.repeat(np.asarray(transcript, dtype=np.int64), states_per_unit)
    states = np.tile(np.arange(states_per_unit, dtype=np.int64), len(transcript))
    return units, states


def forced_align(model, utterance):
    """Viterbi forced alignment of one utterance; returns AlignmentLabels."""
    transcript = np.asarray(utterance.transcript, dtype=np.int64)
    if transcript.size == 0:
        raise AlignmentInfeasibleError(f"{utterance.id}: empty transcript")
    frames = utterance.audio.frames
    t_len = frames.shape[0]
    j_len = transcript.size * model.states_per_unit
    if t_len < j_len:
        raise AlignmentInfeasibleError(
            f"{utterance.id}: T={t_len} too short for {j_len} mandatory states")
    units, states = _transcript_state_table(model.states_per_unit, transcript)
    state_ll = model.state_log_likelihood(frames)      # (T, U, S)
    emission = state_ll[:, units, states]              # (T, J)
    with np.errstate(divide="ignore"):
        log_self = np.log(np.maximum(model.trans[units, states, 0], 1e-300))
        log_fwd = np.log(np.maximum(model.trans[units, states, 1], 1e-300))
    path, score = viterbi_path(emission, log_self, log_fwd)
    labels = units[path] * model.states_per_unit + states[path]
    return AlignmentLabels(utt_id=utterance.id, labels=labels,
                           num_senones=model.num_units * model.states_per_unit,
                           score=score)


def flat_start(corpus, config=None):
    """Initialize a single-Gaussian model by uniform utterance segmentation.

    Every training utterance is split uniformly across its transcript's
    states; each (unit, state) Gaussian starts from the pooled statistics of
    its segments.  Transitions start at (self_loop_init, 1 - self_loop_init).
    """
    config = config or HMMConfig()
    num_units = corpus.spec.num_units
    s = config.states_per_unit
    d = corpus.spec.feature_dim
    count = np.zeros((num_units, s))
    acc = np.zeros((num_units, s, d))
    acc2 = np.zeros((num_units, s, d))
    for utt in corpus.train:
        frames = utt.audio.frames
        units, states = _transcript_state_table(s, utt.transcript)
        segments = np.array_split(np.arange(frames.shape[0]), len(units))
        for (u, st), idx in zip(zip(units, states), segments):
            if idx.size == 0:
                continue
            seg = frames[idx]
            count[u, st] += idx.size
            acc[u, st] += seg.sum(axis=0)
            acc2[u, st] += (seg ** 2).sum(axis=0)
    unseen = np.nonzero(count.sum(axis=1) == 0)[0]
    if unseen.size:
        raise TrainingError(f"units never observed in corpus: {unseen.tolist()}")
    if np.any(count == 0):
        raise TrainingError("some HMM states received no frames in flat start")
    means = acc / count[:, :, None]
    variances = acc2 / count[:, :, None] - means ** 2
    variances = np.maximum(variances, config.var_floor)
    trans = np.empty((num_units, s, 2))
    trans[:, :, 0] = config.self_loop_init
    trans[:, :, 1] = 1.0 - config.self_loop_init
    return HMMModel(num_units=num_units, states_per_unit=s, trans=trans,
                    weights=np.ones((num_units, s, 1)),
                    means=means[:, :, None, :], variances=variances[:, :, None, :],
                    var_floor=config.var_floor, trans_floor=config.trans_floor).validate()


def _split_mixtures(model, target, rng):
    """Split the largest-weight component until each state has `target` components."""
    while model.num_components < target:
        u, s, k, d = model.means.shape
        weights = np.zeros((u, s, k + 1))
        means = np.zeros((u, s, k + 1, d))
        variances = np.zeros((u, s, k + 1, d))
        for ui in range(u):
            for si in range(s):
                w = model.weights[ui, si].copy()
                m = model.means[ui, si].copy()
                v = model.variances[ui, si].copy()
                j = int(np.argmax(w))
                offset = 0.1 * np.sqrt(v[j])
                weights[ui, si, :k] = w
                weights[ui, si, j] = w[j] / 2.0
                weights[ui, si, k] = w[j] / 2.0
                means[ui, si, :k] = m
                means[ui, si, j] = m[j] + offset
                means[ui, si, k] = m[j] - offset
                variances[ui, si, :k] = v
                variances[ui, si, k] = v[j]
        model = HMMModel(model.num_units, model.states_per_unit, model.trans.copy(),
                         weights, means, variances,
                         var_floor=model.var_floor, trans_floor=model.trans_floor)
    return model


def em_train(model, corpus, iters, mix_schedule=None, rng=None):
    """Viterbi-style EM.

    mix_schedule maps iteration index -> total component count to split to at
    the start of that iteration (e.g. {2: 2, 4: 4} for a 1->2->4 ramp).
    Returns (model, history); history records per iteration the total
    Viterbi-path log-likelihood under that iteration's parameters, the mixture
    size, and whether a split happened (splits may dip the objective once).
    """
    if iters < 1:
        raise ConfigurationError("iters must be >= 1")
    mix_schedule = mix_schedule or {}
    rng = rng or np.random.default_rng(0)
    history = []
    for it in range(iters):
        split = False
        target = mix_schedule.get(it)
        if target and target > model.num_components:
            model = _split_mixtures(model, target, rng)
            split = True
        u, s, k, d = model.means.shape
        gamma = np.zeros((u, s, k))
        gx = np.zeros((u, s, k, d))
        gx2 = np.zeros((u, s, k, d))
        stay = np.zeros((u, s))
        fwd = np.zeros((u, s))
        total = 0.0
        for utt in corpus.train:
            alignment = forced_align(model, utt)
            total += alignment.score
            units = alignment.labels // model.states_per_unit
            states = alignment.labels % model.states_per_unit
            frames = utt.audio.frames
            # transition counts from the hard path
            same = (alignment.labels[1:] == alignment.labels[:-1])
            np.add.at(stay, (units[:-1][same], states[:-1][same]), 1.0)
            np.add.at(fwd, (units[:-1][~same], states[:-1][~same]), 1.0)
            # soft component responsibilities within each assigned state
            for ui, si in {(int(a), int(b)) for a, b in zip(units, states)}:
                sel = (units == ui) & (states == si)
                x = frames[sel]
                comp = model.component_log_likelihood(x, ui, si)
                comp -= logsumexp(comp, axis=1, keepdims=True)
                resp = np.exp(comp)
                gamma[ui, si] += resp.sum(axis=0)
                gx[ui, si] += resp.T @ x
                gx2[ui, si] += resp.T @ (x ** 2)
        occupied = gamma.sum(axis=2)
        if np.any(occupied == 0):
            raise TrainingError("a state received no frames during EM")
        # drop starved components, renormalize weights
        dead = gamma < 1e-8
        if np.any(dead & (model.weights > 0)):
            log.warning("dropping %d starved GMM component(s)", int((dead & (model.weights > 0)).sum()))
        gamma_safe = np.where(dead, 1.0, gamma)
        new_means = gx / gamma_safe[..., None]
        new_vars = gx2 / gamma_safe[..., None] - new_means ** 2
        new_vars = np.maximum(new_vars, model.var_floor)
        new_weights = np.where(dead, 0.0, gamma)
        new_weights = new_weights / new_weights.sum(axis=2, keepdims=True)
        keep = ~dead
        model.means = np.where(keep[..., None], new_means, model.means)
        model.variances = np.where(keep[..., None], new_vars, model.variances)
        model.weights = new_weights
        denom = stay + fwd
        self_prob = np.where(denom > 0, stay / np.maximum(denom, 1.0), model.trans[:, :, 0])
        self_prob = np.clip(self_prob, model.trans_floor, 1.0 - model.trans_floor)
        model.trans = np.stack([self_prob, 1.0 - self_prob], axis=2)
        history.append({"iteration": it, "objective": total,
                        "num_components": model.num_components, "split": split})
    return model, history


def align_corpus(model, utterances):
    """Forced-align a list of utterances; returns {utt_id: AlignmentLabels}."""
    return {utt.id: forced_align(model, utt) for utt in utterances}


def boundary_accuracy(ref_labels, hyp_labels, tol=2):
    """Fraction of state boundaries within +/-`tol` frames of the reference.

    Both inputs must be label paths of the same transcript (same number of
    state segments); a boundary is the first frame of each new segment.
    """
    def boundaries(labels):
        labels = np.asarray(labels)
        return np.nonzero(labels[1:] != labels[:-1])[0] + 1

    ref_b = boundaries(ref_labels)
    hyp_b = boundaries(hyp_labels)
    if len(ref_b) != len(hyp_b):
        raise ConfigurationError(
            f"boundary count mismatch: {len(ref_b)} vs {len(hyp_b)} (different paths?)")
    if len(ref_b) == 0:
        return 1.0
    return float(np.mean(np.abs(ref_b - hyp_b) <= tol))


def save_hmm(path, model, meta=None):
    meta = dict(meta or {})
    meta.update({"states_per_unit": model.states_per_unit,
                 "var_floor": model.var_floor, "trans_floor": model.trans_floor})
    save_arrays(path, {"trans": model.trans, "weights": model.weights,
                       "means": model.means, "variances": model.variances}, meta=meta)


def load_hmm(path):
    arrays, meta = load_arrays(path, with_meta=True)
    model = HMMModel(num_units=arrays["weights"].shape[0],
                     states_per_unit=int(meta["states_per_unit"]),
                     trans=arrays["trans"], weights=arrays["weights"],
                     means=arrays["means"], variances=arrays["variances"],
                     var_floor=float(meta["var_floor"]),
                     trans_floor=float(meta["trans_floor"]))
    return model.validate(), meta
