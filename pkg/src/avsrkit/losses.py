"""Training losses: CTC, teacher-forced attention NLL, frame CE, joint mix.

The CTC loss is a custom graph node with an analytic gradient: with z the
unnormalized logits, p = softmax(z), and q the per-frame posterior over
classes aggregated from the alpha-beta occupancies of the blank-augmented
label lattice, dLoss/dz = p - q.  Everything runs in the log domain.

Blank is the LAST class index (vocab_size), matching the CTC head layout.
"""

import numpy as np

from .autodiff import Tensor, log_softmax
from .errors import AlignmentInfeasibleError, ConfigurationError

LOG_ZERO = -1e30


def _extended_labels(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_ctc_length(target):
    """Fewest frames that can emit `target` (adjacent repeats need a blank)."""
    target = np.asarray(target)
    return len(target) + int(np.sum(target[1:] == target[:-1]))


def ctc_alpha_beta(logp, target, blank):
    """Forward/backward log occupancies over the extended label sequence.

    logp: (T, C) log class probabilities.  Returns (alpha, beta, loglik) with
    alpha_t(s) including the emission at t and beta_t(s) excluding it, so
    logsumexp(alpha_t + beta_t) = loglik for every t.
    """
    t_len = logp.shape[0]
    ext = _extended_labels(target, blank)
    s_len = len(ext)
    # positions allowed to transition from s-2: label positions with a
    # different previous label (skipping the blank between distinct labels)
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), LOG_ZERO)
    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        prev = np.full(s_len, LOG_ZERO)
        prev[1:] = alpha[t - 1, :-1]
        skip = np.full(s_len, LOG_ZERO)
        skip[can_skip] = alpha[t - 1, np.flatnonzero(can_skip) - 2]
        alpha[t] = np.logaddexp(np.logaddexp(stay, prev), skip) + logp[t, ext]

    beta = np.full((t_len, s_len), LOG_ZERO)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    emit = logp[:, ext]
    for t in range(t_len - 2, -1, -1):
        future = beta[t + 1] + emit[t + 1]
        stay = future
        nxt = np.full(s_len, LOG_ZERO)
        nxt[:-1] = future[1:]
        skip = np.full(s_len, LOG_ZERO)
        skip[np.flatnonzero(can_skip) - 2] = future[can_skip]
        beta[t] = np.logaddexp(np.logaddexp(stay, nxt), skip)

    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, s_len - 2])
    return alpha, beta, tail


def ctc_loss(logits, target, blank=None):
    """Negative log-probability of `target` under CTC; one utterance.

    logits: Tensor (T, C) unnormalized; blank defaults to the last class.
    Raises when the target cannot fit in T frames.
    """
    if logits.ndim != 2:
        raise ConfigurationError(f"ctc_loss expects (T, C) logits, got {logits.shape}")
    target = np.asarray(target, dtype=np.int64)
    t_len, n_class = logits.shape
    blank = n_class - 1 if blank is None else blank
    if target.size and (target.min() < 0 or target.max() >= n_class):
        raise ConfigurationError("target ids outside logit classes")
    if np.any(target == blank):
        raise ConfigurationError("target contains the blank id")
    need = min_ctc_length(target)
    if t_len < max(need, 1):
        raise AlignmentInfeasibleError(
            f"target needs >= {max(need, 1)} frames, got {t_len}")

    logp = logits.data - _np_logsumexp(logits.data)
    alpha, beta, loglik = ctc_alpha_beta(logp, target, blank)
    ext = _extended_labels(target, blank)
    # per-frame class posteriors q: scatter lattice occupancies onto classes
    occupancy = np.exp(alpha + beta - loglik)          # (T, S)
    q = np.zeros((t_len, n_class))
    np.add.at(q.T, ext, occupancy.T)
    p = np.exp(logp)

    out = Tensor(-loglik, parents=(logits,))
    out._backward = lambda g: logits.accumulate(g * (p - q))
    return out


def _np_logsumexp(z):
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def ctc_loss_batch(logits, logit_lengths, targets):
    """Sum of per-utterance CTC losses over a padded batch.

    logits: Tensor (B, T, C); targets: list of int arrays.  Returns
    (total_loss Tensor, per-item float list).
    """
    items = []
    for i, target in enumerate(targets):
        items.append(ctc_loss(logits[i, :int(logit_lengths[i])], target))
    total = items[0]
    for item in items[1:]:
        total = total + item
    return total, [float(i.data) for i in items]


def attention_nll(logits, ys_out, out_lengths, label_smoothing=0.0):
    """Teacher-forcing negative log-likelihood, summed over valid steps.

    logits: Tensor (B, L, C); ys_out: (B, L) target ids (eos-terminated,
    padded arbitrarily past each length); out_lengths: (B,) valid steps.
    Label smoothing mixes the one-hot target with the uniform distribution.
    """
    ys_out = np.asarray(ys_out, dtype=np.int64)
    if logits.ndim != 3 or ys_out.shape != logits.shape[:2]:
        raise ConfigurationError(
            f"logits {logits.shape} do not match targets {ys_out.shape}")
    lengths = np.asarray(out_lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise ConfigurationError("empty target sequence")
    b, l, c = logits.shape
    logp = log_softmax(logits, axis=-1)
    mask = (np.arange(l)[None, :] < lengths[:, None]).astype(np.float64)
    bi = np.repeat(np.arange(b), l)
    li = np.tile(np.arange(l), b)
    picked = logp[bi, li, ys_out.reshape(-1)].reshape(b, l)
    nll = -(picked * Tensor(mask)).sum()
    if label_smoothing > 0.0:
        uniform = -(logp.sum(axis=-1) * Tensor(mask)).sum() * (1.0 / c)
        nll = nll * (1.0 - label_smoothing) + uniform * label_smoothing
    return nll


def visual_pretrain_loss(frame_logits, labels, mask=None):
    """Sum over frames of cross-entropy against per-frame senone labels.

    frame_logits: Tensor (B, T, S); labels: (B, T) int.  Lengths must agree.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if frame_logits.ndim != 3 or labels.shape != frame_logits.shape[:2]:
        raise ConfigurationError(
            f"frame count mismatch: {frame_logits.shape[1]} logit frames vs "
            f"{labels.shape[-1]} label frames")
    b, t, _ = frame_logits.shape
    logp = log_softmax(frame_logits, axis=-1)
    bi = np.repeat(np.arange(b), t)
    ti = np.tile(np.arange(t), b)
    picked = logp[bi, ti, labels.reshape(-1)].reshape(b, t)
    if mask is None:
        mask = np.ones((b, t))
    return -(picked * Tensor(mask)).sum()


def joint_loss(logp_ctc, logp_att, lambda_ctc):
    """Negated interpolation of the two log-probabilities."""
    if not 0.0 <= lambda_ctc <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lambda_ctc}")
    return -(lambda_ctc * logp_ctc + (1.0 - lambda_ctc) * logp_att)
