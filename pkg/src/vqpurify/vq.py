"""Codebook, nearest-prototype quantisation and the codebook/commitment loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

# relative slack under which float32 expansion distances are re-checked exactly
_TIE_SLACK = 1e-4


class Codebook:
    """K learnable d-dimensional prototypes."""

    def __init__(self, K: int, d: int, seed: int = 0, vectors: np.ndarray | None = None):
        if K < 1 or d < 1:
            raise ConfigError(f"codebook needs K >= 1 and d >= 1, got K={K}, d={d}")
        if vectors is None:
            rng = np.random.default_rng(seed)
            vectors = rng.uniform(-1.0 / K, 1.0 / K, size=(K, d))
        self.vectors = Tensor(vectors, requires_grad=True, name="codebook")
        if self.vectors.shape != (K, d):
            raise DimensionError(f"codebook vectors have shape {self.vectors.shape}, expected {(K, d)}")

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def named_parameters(self):
        return {"vectors": self.vectors}


@dataclass
class QuantizationResult:
    indices: np.ndarray          # integer grid, shape z_e.shape[:-1]
    quantized: np.ndarray        # prototypes copied from the codebook, shape z_e.shape
    encoder_output: Tensor       # z_e, channel-last
    codebook: Codebook


def nearest_indices(z: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``vectors`` for each row of ``z``; ties go to the lowest index.

    Candidates are found with the ||a||^2 - 2ab + ||b||^2 expansion and any
    row whose runner-up lies within rounding slack of the best is re-decided
    with exact float64 differences.
    """
    if vectors.shape[0] == 0:
        raise ConfigError("empty codebook")
    z = np.asarray(z)
    zz = np.einsum("ij,ij->i", z, z)[:, None]
    ee = np.einsum("ij,ij->i", vectors, vectors)[None, :]
    dist = zz - 2.0 * (z @ vectors.T) + ee
    idx = dist.argmin(axis=1)
    best = dist[np.arange(len(z)), idx][:, None]
    slack = _TIE_SLACK * (zz + ee.max()) + 1e-30
    close = dist <= best + slack
    ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
    if ambiguous.size:
        za = z[ambiguous].astype(np.float64)
        diff = za[:, None, :] - vectors.astype(np.float64)[None, :, :]
        exact = np.sum(diff * diff, axis=2)
        exact[~close[ambiguous]] = np.inf
        idx[ambiguous] = exact.argmin(axis=1)
    return idx


def quantize(z_e: Tensor, codebook: Codebook) -> QuantizationResult:
    """Replace each channel-last vector of ``z_e`` by its nearest prototype."""
    if z_e.shape[-1] != codebook.d:
        raise DimensionError(f"latent dim {z_e.shape[-1]} != codebook dim {codebook.d}")
    flat = z_e.data.reshape(-1, codebook.d)
    idx = nearest_indices(flat, codebook.vectors.data)
    quantized = codebook.vectors.data[idx].reshape(z_e.shape)
    return QuantizationResult(idx.reshape(z_e.shape[:-1]), quantized, z_e, codebook)


def vq_loss_terms(z_e: Tensor, e_q: Tensor, beta: float = 0.25) -> Tensor:
    """beta * |z_e - sg(e_q)|^2 + |sg(z_e) - e_q|^2, squared norms averaged over positions."""
    if z_e.shape != e_q.shape:
        raise DimensionError(f"z_e {z_e.shape} and e_q {e_q.shape} differ")
    positions = int(np.prod(z_e.shape[:-1])) or 1
    commit = T.square(z_e - Tensor(e_q.data, dtype=e_q.dtype)).sum()
    book = T.square(Tensor(z_e.data, dtype=z_e.dtype) - e_q).sum()
    return (commit * beta + book) / positions


def vq_loss(result: QuantizationResult, beta: float = 0.25) -> Tensor:
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    z = result.encoder_output
    e_q = T.gather_rows(result.codebook.vectors, result.indices).reshape(z.shape)
    return vq_loss_terms(z, e_q, beta)


def straight_through(result: QuantizationResult) -> Tensor:
    """Quantised values forward, identity gradient to the encoder output backward."""
    return T.straight_through(result.encoder_output, result.quantized)


@dataclass
class CodebookUsage:
    counts: np.ndarray
    distinct_used: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def usage_stats(indices_stream: Iterable[np.ndarray], K: int) -> CodebookUsage:
    counts = np.zeros(K, dtype=np.int64)
    for grid in indices_stream:
        flat = np.asarray(grid).ravel()
        if flat.size and (flat.min() < 0 or flat.max() >= K):
            raise DataError(f"code index out of range [0, {K}): {flat.min()}..{flat.max()}")
        counts += np.bincount(flat, minlength=K)
    return CodebookUsage(counts, int(np.count_nonzero(counts)))


def reinit_dead_codes(codebook: Codebook, counts: np.ndarray, encoder_outputs: np.ndarray,
                      rng: np.random.Generator) -> int:
    """Move every unused prototype onto a random encoder output. Returns how many moved."""
    dead = np.flatnonzero(counts == 0)
    if dead.size == 0 or len(encoder_outputs) == 0:
        return 0
    picks = rng.integers(0, len(encoder_outputs), size=dead.size)
    codebook.vectors.data[dead] = encoder_outputs[picks]
    return int(dead.size)
