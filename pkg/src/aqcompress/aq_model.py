"""Additive quantization of parameter pages.

Each codebook ``m`` owns a two-layer encoder that maps a page ``w`` to
positive scores ``alpha = softplus(theta2^T tanh(theta1^T w + b1) + b2)``.
Scores become a relaxed one-hot distribution via Gumbel-softmax over
``log(alpha + eps)``, and the decoder sums codebook rows weighted by those
distributions.  Gradients are written out by hand so the whole graph runs on
numpy in either float32 (training) or float64 (gradient checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit, softmax

EPS = 1e-10


class NumericError(FloatingPointError):
    """Non-finite value in the encoder forward pass."""


class TrainingError(RuntimeError):
    """Reconstruction training diverged."""


@dataclass(frozen=True)
class AqHyper:
    D: int
    M: int
    K: int
    H: int = 32
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("D", "M", "K", "H"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    def to_dict(self) -> dict:
        return {"D": self.D, "M": self.M, "K": self.K, "H": self.H, "tau": self.tau, "seed": self.seed}


@dataclass
class EncoderParams:
    """Stacked per-codebook encoder weights; slice ``[m]`` is codebook m's encoder.

    Shapes: theta1 (M, D, H), b1 (M, H), theta2 (M, H, K), b2 (M, K).
    """

    theta1: np.ndarray
    b1: np.ndarray
    theta2: np.ndarray
    b2: np.ndarray

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(*(np.array(a, dtype=dtype) for a in self.as_tuple()))

    def as_tuple(self):
        return (self.theta1, self.b1, self.theta2, self.b2)

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(a.copy() for a in self.as_tuple()))


@dataclass
class OptimConfig:
    """Adam settings for reconstruction training."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 500
    patience: Optional[int] = None  # epochs without improvement before stopping
    min_delta: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainLog:
    losses: List[float] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, size) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=size)


def init_model(hyper: AqHyper, page_stats: Tuple[float, float]) -> Tuple[EncoderParams, np.ndarray]:
    """Random encoder (Glorot-uniform weights, zero biases) and Gaussian codebooks.

    Codebook entries get std ``std / sqrt(M)`` so a sum of M rows has roughly
    the spread of the pages; ``std == 0`` falls back to 0.01.
    """
    _, std = page_stats
    if std < 0:
        raise ValueError("page std must be non-negative")
    D, M, K, H = hyper.D, hyper.M, hyper.K, hyper.H
    rng = np.random.default_rng(hyper.seed)
    enc = EncoderParams(
        theta1=_glorot(rng, D, H, (M, D, H)).astype(np.float32),
        b1=np.zeros((M, H), np.float32),
        theta2=_glorot(rng, H, K, (M, H, K)).astype(np.float32),
        b2=np.zeros((M, K), np.float32),
    )
    book_std = std / math.sqrt(M) if std > 0 else 0.01
    books = rng.normal(0.0, book_std, size=(M, K, D)).astype(np.float32)
    return enc, books


def _softplus(x):
    # non-finite inputs are reported by _check_finite with the page index
    with np.errstate(invalid="ignore"):
        return np.logaddexp(0, x)


def encoder_scores(pages: np.ndarray, enc: EncoderParams):
    """Forward through the encoder; returns ``(alpha, cache)``, alpha of shape (B, M, K)."""
    alpha, cache = _scores_mbk(pages, enc)
    return alpha.transpose(1, 0, 2), cache


def _scores_mbk(pages, enc):
    # codebook-major (M, B, .) layout so every product is one batched matmul
    h = np.tanh(pages @ enc.theta1 + enc.b1[:, None, :])
    z2 = h @ enc.theta2 + enc.b2[:, None, :]
    return _softplus(z2), (h, z2)


def _check_finite(x: np.ndarray, what: str):
    bad = ~np.isfinite(x)
    if bad.any():
        page = int(np.argwhere(bad)[0][0])
        raise NumericError(f"non-finite {what} at page {page}")


def sample_gumbel(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    return rng.gumbel(size=shape).astype(dtype)


def encode_soft(
    pages: np.ndarray,
    enc: EncoderParams,
    hyper: AqHyper,
    rng: Optional[np.random.Generator] = None,
    noise_on: bool = True,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Relaxed code distributions ``d`` of shape (B, M, K); rows sum to one.

    Pass ``noise`` to reuse a fixed Gumbel sample; otherwise it is drawn from
    ``rng`` when ``noise_on``.
    """
    alpha, _ = encoder_scores(pages, enc)
    _check_finite(alpha, "encoder activation")
    logits = np.log(alpha + EPS)
    if noise is not None:
        logits = logits + noise
    elif noise_on:
        if rng is None:
            raise ValueError("noise_on requires an rng")
        logits = logits + sample_gumbel(rng, logits.shape, logits.dtype)
    return softmax(logits / hyper.tau, axis=-1)


def decode_soft(d: np.ndarray, books: np.ndarray) -> np.ndarray:
    """``w~_p = sum_m A^m^T d_p^m``, accumulated in ascending m.

    The fixed order makes one-hot inputs reproduce :func:`reconstruct_hard` exactly.
    """
    d = np.asarray(d)
    out = np.zeros((d.shape[0], books.shape[2]), dtype=np.result_type(d, books))
    for m in range(books.shape[0]):
        out += d[:, m, :] @ books[m]
    return out


def recon_loss(pages: np.ndarray, recon: np.ndarray) -> float:
    """Mean over pages of the squared L2 error."""
    pages, recon = np.asarray(pages), np.asarray(recon)
    if pages.shape != recon.shape:
        raise ValueError(f"shape mismatch {pages.shape} vs {recon.shape}")
    if pages.shape[0] == 0:
        return 0.0
    diff = pages - recon
    return float(np.einsum("pd,pd->", diff, diff) / pages.shape[0])


def loss_and_grads(
    pages: np.ndarray, enc: EncoderParams, books: np.ndarray, noise: Optional[np.ndarray], tau: float
):
    """Soft reconstruction loss and exact gradients for a fixed Gumbel sample.

    Returns ``(loss, EncoderParams-of-grads, books_grad)``.  Computation runs in
    the dtype of the inputs.
    """
    B = pages.shape[0]
    alpha, (h, z2) = _scores_mbk(pages, enc)
    _check_finite(alpha.transpose(1, 0, 2), "encoder activation")
    logits = np.log(alpha + EPS)
    if noise is not None:
        logits = logits + noise.transpose(1, 0, 2)
    d = softmax(logits / tau, axis=-1)
    recon = np.zeros_like(pages, dtype=np.result_type(d, books))
    for m in range(books.shape[0]):
        recon += d[m] @ books[m]
    diff = recon - pages
    loss = float(np.einsum("bd,bd->", diff, diff) / B)

    d_recon = (2.0 / B) * diff
    g_books = d.transpose(0, 2, 1) @ d_recon
    g_d = d_recon @ books.transpose(0, 2, 1)
    g_logits = d * (g_d - np.sum(d * g_d, axis=-1, keepdims=True))
    g_z2 = g_logits / tau / (alpha + EPS) * expit(z2)
    g_theta2 = h.transpose(0, 2, 1) @ g_z2
    g_b2 = g_z2.sum(axis=1)
    g_z1 = (g_z2 @ enc.theta2.transpose(0, 2, 1)) * (1.0 - h * h)
    g_theta1 = pages.T @ g_z1
    g_b1 = g_z1.sum(axis=1)
    return loss, EncoderParams(g_theta1, g_b1, g_theta2, g_b2), g_books


class Adam:
    def __init__(self, params: List[np.ndarray], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= (c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)).astype(p.dtype)


def train_aq(
    matrix: np.ndarray,
    hyper: AqHyper,
    opt: Optional[OptimConfig] = None,
    init: Optional[Tuple[EncoderParams, np.ndarray]] = None,
) -> Tuple[EncoderParams, np.ndarray, TrainLog]:
    """Fit encoder and codebooks to ``matrix`` by minibatch Adam on the soft loss.

    Gumbel noise is drawn once per minibatch.  Deterministic given ``hyper.seed``.
    """
    opt = opt or OptimConfig()
    W = np.asarray(matrix, dtype=np.float32)
    if W.ndim != 2 or W.shape[1] != hyper.D:
        raise ValueError(f"page matrix must have {hyper.D} columns, got shape {W.shape}")
    if init is None:
        enc, books = init_model(hyper, (float(W.mean()), float(W.std())))
    else:
        enc, books = init[0].astype(np.float32), np.array(init[1], dtype=np.float32)
    # the init stream and the training stream are kept apart
    rng = np.random.default_rng([hyper.seed, 1])
    params = [enc.theta1, enc.b1, enc.theta2, enc.b2, books]
    adam = Adam(params, opt)
    log = TrainLog(metadata={"optimizer": "adam", **opt.to_dict(), "hyper": hyper.to_dict()})

    P = W.shape[0]
    bs = max(1, min(opt.batch_size, P))
    best, stale = math.inf, 0
    for epoch in range(opt.epochs):
        order = rng.permutation(P)
        total = 0.0
        for lo in range(0, P, bs):
            batch = W[order[lo : lo + bs]]
            noise = sample_gumbel(rng, (batch.shape[0], hyper.M, hyper.K))
            try:
                loss, g_enc, g_books = loss_and_grads(batch, enc, books, noise, hyper.tau)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            adam.step([*g_enc.as_tuple(), g_books])
            total += loss * batch.shape[0]
        epoch_loss = total / P
        log.losses.append(epoch_loss)
        if opt.patience is not None:
            if epoch_loss < best - opt.min_delta:
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= opt.patience:
                    break
    log.metadata["epochs_run"] = len(log.losses)
    return enc, books, log


def extract_codes(matrix: np.ndarray, enc: EncoderParams, hyper: Optional[AqHyper] = None,
                  batch_size: int = 4096) -> np.ndarray:
    """Hard codes ``argmax alpha`` per page and codebook, shape (P, M).

    Noise-free, so this equals the argmax of the noise-free distribution.
    ``np.argmax`` returns the first maximum, i.e. ties go to the lowest index.
    """
    W = np.asarray(matrix, dtype=enc.theta1.dtype)
    out = []
    for lo in range(0, W.shape[0], batch_size):
        alpha, _ = encoder_scores(W[lo : lo + batch_size], enc)
        _check_finite(alpha, "encoder activation")
        out.append(np.argmax(alpha, axis=-1))
    M = enc.theta1.shape[0]
    if not out:
        return np.zeros((0, M), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def reconstruct_hard(codes: np.ndarray, books: np.ndarray) -> np.ndarray:
    """Sum the selected basis vector of every codebook, in ascending codebook order."""
    codes = np.asarray(codes)
    M, K, D = books.shape
    if codes.ndim != 2 or codes.shape[1] != M:
        raise ValueError(f"codes must have shape (P, {M}), got {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise ValueError(f"codes out of range [0, {K})")
    out = np.zeros((codes.shape[0], D), dtype=books.dtype)
    for m in range(M):
        out += books[m][codes[:, m]]
    return out


def one_hot(codes: np.ndarray, K: int, dtype=np.float32) -> np.ndarray:
    codes = np.asarray(codes)
    d = np.zeros(codes.shape + (K,), dtype=dtype)
    np.put_along_axis(d, codes[..., None], 1, axis=-1)
    return d


def with_seed(hyper: AqHyper, seed: int) -> AqHyper:
    return replace(hyper, seed=seed)
