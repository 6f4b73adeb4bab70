"""SI-SNR with permutation-invariant training and the power-law spectral term."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsp import StftConfig, stft_magnitude

EPS = 1e-8
TINY = 1e-30  # keeps 0/0 finite for an all-zero estimate


@dataclass
class LossConfig:
    beta: float = 0.01
    alpha: float = 0.5
    eps: float = EPS
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)


def _tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def si_snr(est, ref, eps: float = EPS) -> Tensor:
    """Scale-invariant SNR in dB between 1-D signals; differentiable w.r.t. ``est``.

    ``eps`` is a relative floor on both energies, so the value is clamped to
    ``±10 log10(1/eps)`` dB (80 dB at the default) and stays exactly
    scale-invariant; between the clamps no bias is added.
    """
    est = _tensor(est)
    ref = _tensor(ref, est)
    if est.shape != ref.shape or est.ndim != 1:
        raise ag.ShapeError(f"si_snr expects equal-length 1-D signals, got {est.shape} and {ref.shape}")
    if not np.any(ref.data):
        raise ValueError("si_snr reference is identically zero")
    est = est - ag.mean(est)
    ref = ref - ag.mean(ref)
    if not np.any(ref.data):
        raise ValueError("si_snr reference is constant, so it has no energy after mean removal")
    scale = ag.dot(est, ref) / ag.l2_norm_sq(ref)
    target = scale * ref
    noise = est - target
    t, n = ag.l2_norm_sq(target), ag.l2_norm_sq(noise)
    ratio = (ag.maximum(t, ag.scalar_mul(n, eps)) + TINY) / (ag.maximum(n, ag.scalar_mul(t, eps)) + TINY)
    return ag.scalar_mul(ag.log10(ratio), 10.0)


def _rows(x) -> list:
    if isinstance(x, Tensor):
        return [x[i] for i in range(x.shape[0])]
    return list(x)


def pit_si_snr(ests, refs, eps: float = EPS) -> tuple[Tensor, tuple[int, ...]]:
    """Negative mean SI-SNR minimized over assignments.

    Returns ``(loss, perm)`` where estimate ``c`` is matched to reference
    ``perm[c]``. Ties go to the lexicographically smallest permutation.
    """
    ests, refs = _rows(ests), _rows(refs)
    C = len(ests)
    if len(refs) != C:
        raise ValueError(f"{C} estimates but {len(refs)} references")
    if C < 2:
        raise ValueError("permutation-invariant training needs C >= 2")
    pair = [[si_snr(ests[i], refs[j], eps) for j in range(C)] for i in range(C)]
    best, best_perm = None, None
    for perm in itertools.permutations(range(C)):
        # fsum is exactly rounded, so equal multisets of terms tie exactly
        score = -math.fsum(float(pair[c][perm[c]].data) for c in range(C)) / C
        if best is None or score < best:
            best, best_perm = score, perm
    total = pair[0][best_perm[0]]
    for c in range(1, C):
        total = total + pair[c][best_perm[c]]
    return ag.scalar_mul(total, -1.0 / C), best_perm


def p_law(est, ref, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean absolute difference of alpha-compressed STFT magnitudes."""
    est = _tensor(est)
    ref = _tensor(ref, est)
    a = ag.pow(stft_magnitude(est, cfg.stft), cfg.alpha)
    b = ag.pow(stft_magnitude(ref, cfg.stft), cfg.alpha)
    return ag.mean(ag.abs(a - b))


def combined_loss(ests, refs, cfg: LossConfig = LossConfig()) -> tuple[Tensor, tuple[int, ...]]:
    """``-SI-SNR`` (PIT) plus ``beta`` times the mean power-law term of the aligned pairs."""
    ests, refs = _rows(ests), _rows(refs)
    loss, perm = pit_si_snr(ests, refs, cfg.eps)
    if cfg.beta == 0:
        return loss, perm
    terms = [p_law(ests[c], refs[perm[c]], cfg) for c in range(len(ests))]
    plaw = terms[0]
    for t in terms[1:]:
        plaw = plaw + t
    return loss + ag.scalar_mul(plaw, cfg.beta / len(terms)), perm


def batch_loss(ests: Tensor, refs, cfg: LossConfig = LossConfig()) -> tuple[Tensor, list[tuple[int, ...]]]:
    """Mean of :func:`combined_loss` over a batch of ``[B, C, T]`` estimates."""
    refs = refs.data if isinstance(refs, Tensor) else np.asarray(refs)
    total, perms = None, []
    for b in range(ests.shape[0]):
        loss, perm = combined_loss(ests[b], refs[b].astype(ests.dtype), cfg)
        perms.append(perm)
        total = loss if total is None else total + loss
    return ag.scalar_mul(total, 1.0 / ests.shape[0]), perms
