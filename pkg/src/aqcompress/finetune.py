"""Codebook finetuning against a task loss with the discrete codes frozen.

The task gradient with respect to each reconstructed page, ``g_p``, is
treated as a constant and the codebooks minimize ``sum_p g_p . w~_p``.
Because ``w~_p`` is a sum of selected codebook rows, the gradient of that
surrogate with respect to row ``k`` of codebook ``m`` is the sum of ``g_p``
over the pages whose m-th code is ``k``, which is exactly the chain-rule
gradient of the task loss itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .aq_model import OptimConfig, Adam, reconstruct_hard
from .pager import LayoutError, PageManifest
from .task_zoo import Dataset, MlpSpec, TaskModel, evaluate, loss_and_backward


class FinetuneError(RuntimeError):
    pass


@dataclass
class FinetuneConfig:
    lr: float = 0.01
    optimizer: str = "sgd"  # "sgd" or "adam"
    steps: int = 200
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 20

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("invalid finetune configuration")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def scatter_to_model(recon: np.ndarray, manifest: PageManifest, spec: MlpSpec) -> TaskModel:
    """Place reconstructed pages into the task model's parameter tensors.

    Keeps the dtype of ``recon`` so 64-bit checks stay 64-bit.
    """
    if manifest.mask_digest is not None:
        raise LayoutError("masked manifests are not supported for finetuning")
    if recon.shape != (manifest.page_count, manifest.page_size):
        raise LayoutError(f"pages have shape {recon.shape}, manifest expects "
                          f"{(manifest.page_count, manifest.page_size)}")
    expected = spec.param_shapes()
    table = [(r.name, tuple(r.shape)) for r in manifest.tensor_table]
    if table != expected:
        raise LayoutError(f"manifest layout {table} does not match the task model {expected}")
    stream = recon.reshape(-1)
    params = [stream[r.offset : r.offset + r.size].reshape(r.shape).copy() for r in manifest.tensor_table]
    return TaskModel(spec, params)


def gradient_pages(grads: List[np.ndarray], manifest: PageManifest) -> np.ndarray:
    """Flatten per-tensor gradients in manifest order and zero-pad to P x D."""
    stream = np.concatenate([np.asarray(g).reshape(-1) for g in grads])
    if stream.size != manifest.total_scalars:
        raise LayoutError(f"{stream.size} gradient scalars, manifest expects {manifest.total_scalars}")
    G = np.zeros(manifest.page_count * manifest.page_size, dtype=stream.dtype)
    G[: stream.size] = stream
    return G.reshape(manifest.page_count, manifest.page_size)


def task_loss_and_grad_pages(spec: MlpSpec, X, y, recon: np.ndarray, manifest: PageManifest):
    model = scatter_to_model(recon, manifest, spec)
    loss, grads = loss_and_backward(model, X, y)
    return loss, gradient_pages(grads, manifest)


def task_grad_pages(spec: MlpSpec, X, y, recon: np.ndarray, manifest: PageManifest) -> np.ndarray:
    """``G[p] = dL_task / d w~_p`` with the model parameters set to ``recon``."""
    return task_loss_and_grad_pages(spec, X, y, recon, manifest)[1]


def finetune_loss(G: np.ndarray, codes: np.ndarray, books: np.ndarray) -> float:
    """``sum_p g_p . w~_p`` with ``G`` held constant."""
    return float(np.sum(G * reconstruct_hard(codes, books)))


def codebook_grad(G: np.ndarray, codes: np.ndarray, K: int) -> np.ndarray:
    """Gradient of :func:`finetune_loss` w.r.t. the codebooks, shape (M, K, D).

    Scatter-add of page gradients onto the rows they selected.
    """
    codes = np.asarray(codes)
    M = codes.shape[1]
    out = np.zeros((M, K, G.shape[1]), dtype=G.dtype)
    for m in range(M):
        np.add.at(out[m], codes[:, m], G)
    return out


def sgd_step(books: np.ndarray, codes: np.ndarray, manifest: PageManifest, spec: MlpSpec, X, y,
             lr: float) -> Tuple[np.ndarray, float]:
    """One plain gradient step on the codebooks; returns ``(new_books, task_loss)``."""
    loss, G = task_loss_and_grad_pages(spec, X, y, reconstruct_hard(codes, books), manifest)
    return books - np.asarray(lr, dtype=books.dtype) * codebook_grad(G, codes, books.shape[1]), loss


def _batch_indices(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def finetune_loop(
    books: np.ndarray,
    codes: np.ndarray,
    manifest: PageManifest,
    spec: MlpSpec,
    train: Dataset,
    cfg: FinetuneConfig,
    heldout: Optional[Dataset] = None,
) -> Tuple[np.ndarray, List[dict]]:
    """Update codebooks only; returns the best codebooks by held-out accuracy and the history.

    Each step reconstructs pages, scatters them into the model, computes ``G``
    on a fresh minibatch and takes one optimizer step on the codebooks.  The
    initial codebooks count as a checkpoint, so the returned accuracy is never
    below the starting one; ties keep the earliest checkpoint.
    """
    heldout = heldout if heldout is not None else train
    books = np.array(books, dtype=np.float32)
    codes = np.asarray(codes)
    K = books.shape[1]
    rng = np.random.default_rng(cfg.seed)
    adam = Adam([books], OptimConfig(lr=cfg.lr)) if cfg.optimizer == "adam" else None

    def record(step, loss):
        acc = evaluate(scatter_to_model(reconstruct_hard(codes, books), manifest, spec), heldout)
        history.append({"step": step, "loss": loss, "accuracy": acc})
        return acc

    history: List[dict] = []
    best_acc = record(0, None)
    best_books = books.copy()
    for step in range(1, cfg.steps + 1):
        idx = _batch_indices(rng, len(train), cfg.batch_size)
        if adam is not None:
            loss, G = task_loss_and_grad_pages(spec, train.features[idx], train.labels[idx],
                                               reconstruct_hard(codes, books), manifest)
            adam.step([codebook_grad(G, codes, K)])
        else:
            books, loss = sgd_step(books, codes, manifest, spec, train.features[idx], train.labels[idx], cfg.lr)
        if not math.isfinite(loss):
            raise FinetuneError(f"task loss is {loss} at step {step}")
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = record(step, loss)
            if acc > best_acc:
                best_acc, best_books = acc, books.copy()
    return best_books, history
