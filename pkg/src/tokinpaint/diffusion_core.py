"""Absorbing-state continuous-time Markov chain over token sequences.

Conventions
-----------
* Clean tokens are ``0..N-1``; MASK is ``N``.
* Rate matrices are indexed ``Q[y, x]`` = rate of jumping *from* ``x`` *to*
  ``y``; columns sum to zero. The second index is always the source state.
* ``Q_t = sigma(t) * Q`` and the total noise ``int_0^t sigma`` is written
  ``total(t)``; a token survives unmasked to time ``t`` with probability
  ``exp(-total(t))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    InconsistentCorruption,
    InvalidCleanToken,
    InvalidSchedule,
    InvalidScore,
    InvalidTime,
    NumericalFailure,
    StepTooLarge,
)
from .rng import as_generator

EPS_TIME = 1e-4
LOG_RATIO_FLOOR = 1e-30
TERMINAL_SURVIVAL = 1e-3
JUMP_CAP = 1.0 - 1e-6
# StepTooLarge is raised when the jump cap binds on more than this fraction of positions
CAP_TOLERANCE = 0.01
_TIME_SLACK = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Scalar noise rate ``sigma(t)`` on ``[0, T]``.

    ``log-linear`` is geometric in total noise,
    ``total(t) = sigma_min * ((sigma_max / sigma_min) ** t - 1)``, so that
    ``total(0) = 0``. ``constant`` uses ``sigma(t) = sigma_min`` and exists
    for analytic checks; it is exempt from the terminal-survival bound.
    """

    kind: str = "log-linear"
    sigma_min: float = 0.1
    sigma_max: float = 0.1 + math.log(1.0 / TERMINAL_SURVIVAL)
    T: float = 1.0
    eps: float = EPS_TIME

    def __post_init__(self):
        if self.kind not in ("log-linear", "constant"):
            raise InvalidSchedule(f"unknown schedule kind {self.kind!r}")
        if self.T != 1.0:
            raise InvalidSchedule("the time horizon T is fixed to 1.0")
        if not 0 < self.eps < self.T:
            raise InvalidSchedule(f"eps must lie in (0, T), got {self.eps}")
        if not self.sigma_min > 0:
            raise InvalidSchedule("sigma_min must be positive")
        if self.kind == "log-linear":
            if not self.sigma_max > self.sigma_min:
                raise InvalidSchedule("log-linear schedule needs sigma_max > sigma_min")
            if self.survival(self.T) > TERMINAL_SURVIVAL * (1 + 1e-9):
                raise InvalidSchedule(
                    f"terminal survival {self.survival(self.T):.3g} exceeds {TERMINAL_SURVIVAL}"
                )

    @classmethod
    def log_linear(cls, sigma_min=0.1, terminal_survival=TERMINAL_SURVIVAL, eps=EPS_TIME):
        """Log-linear schedule whose survival at ``T`` is exactly ``terminal_survival``."""
        return cls("log-linear", sigma_min, sigma_min + math.log(1.0 / terminal_survival), eps=eps)

    @classmethod
    def constant(cls, sigma=1.0, eps=EPS_TIME):
        return cls("constant", sigma, sigma, eps=eps)

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T) or not np.all(np.isfinite(t)):
            raise InvalidTime(f"t must lie in [0, {self.T}]")
        return t

    def rate(self, t):
        """sigma(t)."""
        t = self._check(t)
        if self.kind == "constant":
            return np.full_like(t, self.sigma_min)
        log_r = math.log(self.sigma_max / self.sigma_min)
        return self.sigma_min * np.exp(t * log_r) * log_r

    def total(self, t):
        """int_0^t sigma(s) ds."""
        t = self._check(t)
        if self.kind == "constant":
            return self.sigma_min * t
        return self.sigma_min * np.expm1(t * math.log(self.sigma_max / self.sigma_min))

    def survival(self, t):
        return np.exp(-self.total(t))

    def mask_probability(self, t):
        return -np.expm1(-self.total(t))

    def odds(self, t):
        """survival / (1 - survival), the clean-to-masked probability ratio."""
        return 1.0 / np.expm1(self.total(t))

    def to_dict(self):
        return {"kind": self.kind, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "eps": self.eps}


def survival(t, schedule):
    return schedule.survival(t)


@dataclass(frozen=True)
class TransitionModel:
    """Absorbing corruption structure over ``N`` clean tokens plus MASK."""

    vocab_size: int

    @property
    def mask_id(self):
        return self.vocab_size

    def generator(self):
        """Dense ``(N+1, N+1)`` base rate matrix ``Q[y, x]``."""
        n = self.vocab_size
        q = np.zeros((n + 1, n + 1))
        q[n, :n] = 1.0
        q[np.arange(n), np.arange(n)] = -1.0
        return q

    def rate_matrix(self, t, schedule):
        return float(schedule.rate(t)) * self.generator()

    def transition_matrix(self, t, schedule):
        """Closed-form ``P[y, x] = p_{t|0}(y | x)``."""
        n = self.vocab_size
        alpha = float(schedule.survival(t))
        p = np.zeros((n + 1, n + 1))
        p[np.arange(n), np.arange(n)] = alpha
        p[n, :n] = 1.0 - alpha
        p[n, n] = 1.0
        return p


def forward_marginal(x0_token, t, model, schedule):
    """``(P(stay at x0), P(MASK))`` after time ``t``; all other states have probability 0."""
    if not 0 <= int(x0_token) < model.vocab_size:
        raise InvalidCleanToken(f"clean token must lie in [0, {model.vocab_size}), got {x0_token}")
    alpha = float(schedule.survival(t))
    return alpha, float(schedule.mask_probability(t))


def _ids(x):
    return np.asarray(getattr(x, "ids", x), dtype=np.int64)


def _rewrap(template, ids):
    if hasattr(template, "with_ids"):
        return template.with_ids(ids)
    return ids


def corrupt(x0, t, schedule, rng, vocab_size=None, span=False):
    """Independently replace each token by MASK with probability ``1 - survival(t)``.

    ``x0`` is a :class:`TokenSequence` or an integer array (``vocab_size``
    required); batched arrays take ``t`` per row. With ``span=True`` a single
    contiguous run of ``round((1 - survival) * L)`` positions is masked per
    row instead.
    """
    ids = _ids(x0)
    n = getattr(x0, "vocab_size", vocab_size)
    if n is None:
        raise ValueError("vocab_size is required for raw arrays")
    if np.any(ids >= n) or np.any(ids < 0):
        raise InvalidCleanToken("corrupt expects a clean sequence (no MASK)")
    rng = as_generator(rng)
    move = np.asarray(schedule.mask_probability(t), dtype=np.float64)
    if ids.ndim == 2 and move.ndim == 1:
        move = move[:, None]
    if span:
        mask = _span_mask(ids.shape, move, rng)
    else:
        mask = rng.random(ids.shape) < move
    return _rewrap(x0, np.where(mask, n, ids))


def _span_mask(shape, move, rng):
    rows = np.atleast_2d(np.zeros(shape))
    length = rows.shape[1]
    move = np.broadcast_to(np.asarray(move).reshape(-1), (rows.shape[0],))
    mask = np.zeros(rows.shape, dtype=bool)
    for r in range(rows.shape[0]):
        k = int(round(float(move[r]) * length))
        start = int(rng.integers(0, length - k + 1))
        mask[r, start : start + k] = True
    return mask.reshape(shape)


def true_concrete_score(x_t, x0, t, schedule):
    """Ratios ``p_{t|0}(y | x0) / p_{t|0}(x_t | x0)`` per position, shape ``(..., L, N+1)``.

    Column ``y`` is the candidate replacement at that position (column ``N``
    is MASK). Non-neighbour entries are exact zeros; the entry for
    ``y == x_t[i]`` is the trivial ratio 1.
    """
    xt = _ids(x_t)
    clean = _ids(x0)
    n = getattr(x0, "vocab_size", None) or getattr(x_t, "vocab_size", None)
    if n is None:
        raise ValueError("token sequences with a vocab_size are required")
    if xt.shape != clean.shape:
        raise InconsistentCorruption("x_t and x0 differ in shape")
    if np.any(clean >= n):
        raise InvalidCleanToken("x0 contains MASK")
    masked = xt == n
    if np.any(~masked & (xt != clean)):
        raise InconsistentCorruption("x_t disagrees with x0 at an unmasked position")
    odds = float(schedule.odds(t))
    out = np.zeros(xt.shape + (n + 1,))
    m_idx = np.nonzero(masked)
    out[m_idx + (clean[m_idx],)] = odds
    out[m_idx + (np.full(len(m_idx[0]), n),)] = 1.0
    u_idx = np.nonzero(~masked)
    out[u_idx + (np.full(len(u_idx[0]), n),)] = 1.0 / odds
    out[u_idx + (clean[u_idx],)] = 1.0
    return out


def score_entropy(score, ratio):
    """Per-candidate ``s - a log s + a log a - a``; zero iff ``s == a``.

    Works on tensors and arrays. Scores and ratios are floored at 1e-30
    inside the logarithms.
    """
    if isinstance(score, torch.Tensor):
        ratio = torch.as_tensor(ratio, dtype=score.dtype)
        log_s = torch.log(torch.clamp(score, min=LOG_RATIO_FLOOR))
        log_a = torch.log(torch.clamp(ratio, min=LOG_RATIO_FLOOR))
        return score - ratio * log_s + ratio * log_a - ratio
    score = np.asarray(score, dtype=np.float64)
    ratio = np.asarray(ratio, dtype=np.float64)
    log_s = np.log(np.maximum(score, LOG_RATIO_FLOOR))
    log_a = np.log(np.maximum(ratio, LOG_RATIO_FLOOR))
    return score - ratio * log_s + ratio * log_a - ratio


def dwdse_terms(x0, x_t, t, scores, schedule):
    """Rate-weighted score entropy per position, shape ``(B, L)``.

    ``scores`` has shape ``(B, L, N)`` over clean candidates. Only masked
    positions contribute: the only nonzero rate into MASK comes from clean
    tokens, while nothing flows out of MASK into a clean state.
    """
    x0 = torch.as_tensor(x0)
    x_t = torch.as_tensor(x_t)
    scores = torch.as_tensor(scores)
    n = scores.shape[-1]
    t_np = np.asarray(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype=np.float64)
    t_np = np.broadcast_to(t_np.reshape(-1), (x0.shape[0],))
    odds = torch.as_tensor(schedule.odds(t_np), dtype=scores.dtype)[:, None]
    sigma = torch.as_tensor(schedule.rate(t_np), dtype=scores.dtype)[:, None]

    masked = x_t == n
    s_true = torch.gather(scores, -1, x0.clamp(max=n - 1).unsqueeze(-1)).squeeze(-1)
    log_s_true = torch.log(torch.clamp(s_true, min=LOG_RATIO_FLOOR))
    log_odds = torch.log(torch.clamp(odds, min=LOG_RATIO_FLOOR))
    # candidates other than x0 have ratio 0 and contribute just s_y
    per_pos = scores.sum(-1) - odds * log_s_true + odds * log_odds - odds
    return torch.where(masked, sigma * per_pos, torch.zeros_like(per_pos))


def dwdse_loss(x0, score_fn, schedule, time_samples=1, rng=None, vocab_size=None, span=False, return_info=False):
    """Monte-Carlo estimate of the diffusion-weighted denoising score entropy.

    ``t`` is drawn uniformly on ``[eps, T]`` (no importance weighting) and
    ``x_t ~ p_{t|0}``; each sequence of the batch is replicated
    ``time_samples`` times. ``score_fn(x_t, t)`` maps a ``(B, L)`` long
    tensor and a ``(B,)`` time tensor to ``(B, L, N)`` scores; gradients flow
    through whatever autograd graph it builds.

    The estimate is the mean over rows of the summed per-position integrand,
    times the interval length ``T - eps``.
    """
    rng = as_generator(rng)
    clean = _ids(x0)
    if clean.ndim == 1:
        clean = clean[None]
    n = getattr(x0, "vocab_size", vocab_size)
    if n is None:
        raise ValueError("vocab_size is required for raw arrays")
    if time_samples < 1:
        raise ValueError("time_samples must be >= 1")
    clean = np.repeat(clean, time_samples, axis=0)
    t = rng.uniform(schedule.eps, schedule.T, size=clean.shape[0])
    noisy = corrupt(clean, t, schedule, rng, vocab_size=n, span=span)

    x0_t = torch.as_tensor(clean)
    xt_t = torch.as_tensor(noisy)
    scores = score_fn(xt_t, torch.as_tensor(t))
    scores = torch.as_tensor(scores)
    if scores.shape != (clean.shape[0], clean.shape[1], n):
        raise InvalidScore(f"score_fn returned shape {tuple(scores.shape)}, expected {(*clean.shape, n)}")
    with torch.no_grad():
        bad = ~torch.isfinite(scores) | (scores < 0)
        if bool(bad.any()):
            raise InvalidScore("score_fn returned negative or non-finite scores", {"t": t})
    terms = dwdse_terms(x0_t, xt_t, t, scores, schedule)
    loss = terms.sum(-1).mean() * (schedule.T - schedule.eps)
    if not bool(torch.isfinite(loss)):
        raise NumericalFailure("non-finite DWDSE estimate", {"t": t.tolist()})
    if return_info:
        return loss, {"t": t, "x_t": noisy}
    return loss


# -- reverse process -------------------------------------------------------------


def reverse_generator(p_t, q_t):
    """Dense reverse rate matrix ``Qbar[y, x] = p_t(y) / p_t(x) * Q_t[x, y]``.

    States with ``p_t(x) = 0`` get an all-zero column.
    """
    p = np.asarray(p_t, dtype=np.float64)
    q = np.asarray(q_t, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p[None, :] > 0, p[:, None] / p[None, :], 0.0)
    qbar = ratio * q.T
    np.fill_diagonal(qbar, 0.0)
    qbar[np.diag_indices_from(qbar)] = -qbar.sum(axis=0)
    return qbar


def reverse_transition_probs(scores, t, dt, schedule):
    """Euler jump kernel out of MASK over ``[t - dt, t]``.

    ``scores`` has shape ``(..., N)``. Returns ``(probs, capped)`` where
    ``probs[..., y]`` for ``y < N`` is ``sigma(t) * s_y * dt`` and
    ``probs[..., N]`` is the probability of staying masked. Total jump
    probability is capped at ``1 - 1e-6`` with the jump vector rescaled.
    """
    scores = np.asarray(scores, dtype=np.float64)
    jump = float(schedule.rate(t)) * dt * scores
    total = jump.sum(axis=-1, keepdims=True)
    capped = total[..., 0] > JUMP_CAP
    scale = np.where(total > JUMP_CAP, JUMP_CAP / np.where(total > 0, total, 1.0), 1.0)
    jump = jump * scale
    stay = 1.0 - jump.sum(axis=-1, keepdims=True)
    return np.concatenate([jump, stay], axis=-1), capped


def _clamp_mask(clamp, shape):
    if clamp is None:
        return np.zeros(shape, dtype=bool)
    clamp = np.asarray(clamp, dtype=bool)
    return np.broadcast_to(clamp, shape)


def reverse_step(x_t, t, dt, score, schedule, rng, clamp=None, vocab_size=None, saturate=False):
    """One Euler step of the reverse chain from ``t`` to ``t - dt``.

    Only masked, unclamped positions move; the reverse rate out of a clean
    token is zero under absorbing corruption, so clean tokens never re-mask.
    ``score`` has shape ``x_t.shape + (N,)``. All positions draw one uniform,
    keeping rng consumption independent of the mask pattern.

    ``saturate=True`` accepts a binding jump cap at any number of positions;
    the sampler uses it for the step that lands on ``eps``, where the exact
    kernel unmasks almost surely.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t - dt < schedule.eps - _TIME_SLACK:
        raise InvalidTime(f"t - dt = {t - dt} is below the time floor {schedule.eps}")
    ids = _ids(x_t)
    score = np.asarray(score, dtype=np.float64)
    n = getattr(x_t, "vocab_size", vocab_size) or score.shape[-1]
    if score.shape != ids.shape + (n,):
        raise InvalidScore(f"score shape {score.shape} does not match {ids.shape + (n,)}")
    rng = as_generator(rng)
    u = rng.random(ids.shape)
    active = (ids == n) & ~_clamp_mask(clamp, ids.shape)
    if not active.any():
        return _rewrap(x_t, ids.copy())
    probs, capped = reverse_transition_probs(score[active], t, dt, schedule)
    if not saturate and capped.sum() > CAP_TOLERANCE * ids.size:
        raise StepTooLarge(
            f"jump probability exceeds 1 at {int(capped.sum())} of {ids.size} positions; reduce dt"
        )
    cdf = np.cumsum(probs, axis=-1)
    choice = np.minimum((cdf < u[active][:, None]).sum(axis=-1), n)
    out = ids.copy()
    out[active] = choice
    return _rewrap(x_t, out)


def time_grid(schedule, steps):
    """Uniform grid ``T = t_0 > t_1 > ... > t_steps = eps``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.linspace(schedule.T, schedule.eps, steps + 1)


def sample_reverse(x_T, score_fn, schedule, steps, rng, clamp=None, vocab_size=None):
    """Run the reverse chain from ``T`` down to ``eps`` and clean up residual masks.

    ``score_fn(ids, t)`` takes an integer array shaped like ``x_T`` and a
    float time, returning ``ids.shape + (N,)`` positive scores. Positions
    still masked at ``eps`` (and not clamped) take the argmax-score token.
    """
    ids = _ids(x_T).copy()
    n = getattr(x_T, "vocab_size", vocab_size)
    if n is None:
        raise ValueError("vocab_size is required for raw arrays")
    rng = as_generator(rng)
    fixed = _clamp_mask(clamp, ids.shape)
    grid = time_grid(schedule, steps)
    for k, (t, t_next) in enumerate(zip(grid[:-1], grid[1:])):
        if not ((ids == n) & ~fixed).any():
            break
        score = score_fn(ids, float(t))
        last = k == steps - 1
        ids = reverse_step(ids, float(t), float(t - t_next), score, schedule, rng, fixed, vocab_size=n, saturate=last)
    residual = (ids == n) & ~fixed
    if residual.any():
        score = np.asarray(score_fn(ids, float(schedule.eps)))
        ids[residual] = np.argmax(score[residual], axis=-1)
    return _rewrap(x_T, ids)


def exact_score_fn(support, probs, schedule, vocab_size):
    """Exact marginal concrete score for a small enumerated data distribution.

    ``support`` is a ``(K, L)`` array of clean sequences with probabilities
    ``probs``. At a masked position the score toward ``y`` is
    ``odds(t) * P(x0_i = y | the unmasked positions of x)``; entries at
    unmasked positions are 1 and unused by the sampler.
    """
    support = np.asarray(support, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    n = vocab_size

    def score_fn(ids, t):
        ids = np.asarray(ids)
        flat = ids.reshape(-1, ids.shape[-1])
        out = np.ones(flat.shape + (n,))
        odds = float(schedule.odds(t))
        for r, x in enumerate(flat):
            masked = x == n
            agree = np.all((support == x) | masked, axis=1)
            w = probs * agree
            z = w.sum()
            if z <= 0:
                raise InvalidScore("state has zero probability under the data distribution")
            for i in np.flatnonzero(masked):
                post = np.bincount(support[:, i], weights=w, minlength=n) / z
                out[r, i] = odds * post
        return out.reshape(ids.shape + (n,))

    return score_fn
