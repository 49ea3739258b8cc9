"""Discrete codebook, exact nearest / top-k matching and candidate fusion.

Latent grids are channel-last tensors ``(..., n_z)``; any number of leading
axes (batch, h, w) is accepted and preserved in the returned index grids.
"""

from __future__ import annotations

import csv
import math
import statistics
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np
import torch
import torch.nn as nn

CODEBOOK_MAGIC = b"CPCB"
CODEBOOK_VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}



class CodebookFormatError(ValueError):
    pass


@dataclass
class Codebook:
    """K code vectors of dimension n_z, stored row-major."""

    entries: torch.Tensor

    def __post_init__(self):
        if self.entries.ndim != 2:
            raise ValueError(f"codebook entries must be 2-D (K, n_z), got {tuple(self.entries.shape)}")
        if self.entries.shape[0] < 1 or self.entries.shape[1] < 1:
            raise ValueError("codebook needs K >= 1 and n_z >= 1")
        if not torch.isfinite(self.entries).all():
            raise ValueError("codebook entries must be finite")

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def n_z(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def random(cls, K: int, n_z: int, seed: int = 0, dtype=torch.float32) -> "Codebook":
        g = torch.Generator().manual_seed(seed)
        return cls(torch.randn(K, n_z, generator=g, dtype=dtype))

    def to_bytes(self) -> bytes:
        """Serialise as ``magic | version | K | n_z | dtype | little-endian rows``."""
        entries = self.entries.detach().cpu().contiguous()
        if entries.dtype not in _DTYPE_CODES:
            raise CodebookFormatError(f"unsupported dtype {entries.dtype}")
        header = CODEBOOK_MAGIC + struct.pack("<IIIB", CODEBOOK_VERSION, self.K, self.n_z, _DTYPE_CODES[entries.dtype])
        arr = entries.numpy()
        return header + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Codebook":
        if blob[:4] != CODEBOOK_MAGIC:
            raise CodebookFormatError("not a codebook container (bad magic)")
        version, K, n_z, code = struct.unpack("<IIIB", blob[4:17])
        if version != CODEBOOK_VERSION:
            raise CodebookFormatError(f"unsupported codebook version {version}")
        if code not in _CODE_DTYPES:
            raise CodebookFormatError(f"unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        np_dtype = np.dtype("<f4") if dtype == torch.float32 else np.dtype("<f8")
        payload = blob[17:]
        if len(payload) != K * n_z * np_dtype.itemsize:
            raise CodebookFormatError("payload size does not match header")
        arr = np.frombuffer(payload, dtype=np_dtype).reshape(K, n_z).astype(np_dtype.newbyteorder("="))
        return cls(torch.from_numpy(arr.copy()))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class MatchResult:
    indices: torch.Tensor
    candidate_indices: torch.Tensor | None = None
    candidate_distances: torch.Tensor | None = None


@dataclass
class HitRateReport:
    k: int
    hits: int
    total: int

    @property
    def rate(self) -> float:
        return self.hits / self.total if self.total else 0.0


def _entries(codebook) -> torch.Tensor:
    return codebook.entries if isinstance(codebook, Codebook) else codebook


def _check_latents(latents: torch.Tensor, entries: torch.Tensor) -> None:
    if latents.shape[-1] != entries.shape[-1]:
        raise ValueError(
            f"latent dimension {latents.shape[-1]} does not match codebook n_z {entries.shape[-1]}"
        )
    if not torch.isfinite(latents).all():
        raise ValueError("latents contain non-finite values")


@numba.njit(cache=True, nogil=True)
def _scan_topk(flat, entries, k, out_idx, out_dist):
    # Exhaustive scan keeping a sorted buffer of the k best codes per row.
    # Codes are visited in index order and only a strictly smaller distance
    # displaces a buffered code, so equal distances keep the lower index.
    n, d = flat.shape
    K = entries.shape[0]
    bd = np.empty(k, dtype=flat.dtype)
    bi = np.empty(k, dtype=np.int64)
    for i in range(n):
        bd[:] = np.inf
        bi[:] = 0
        for j in range(K):
            s = flat.dtype.type(0.0)
            for c in range(d):
                diff = flat[i, c] - entries[j, c]
                s += diff * diff
            if s < bd[k - 1]:
                p = k - 1
                while p > 0 and bd[p - 1] > s:
                    bd[p] = bd[p - 1]
                    bi[p] = bi[p - 1]
                    p -= 1
                bd[p] = s
                bi[p] = j
        for p in range(k):
            out_idx[i, p] = bi[p]
            out_dist[i, p] = np.sqrt(bd[p])


def _nearest_k(flat: torch.Tensor, entries: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """k nearest codes per row: exact Euclidean distances, ascending, ties by lowest index."""
    f = np.ascontiguousarray(flat.detach().cpu().numpy())
    e = np.ascontiguousarray(entries.detach().cpu().numpy().astype(f.dtype, copy=False))
    idx = np.empty((f.shape[0], k), dtype=np.int64)
    dist = np.empty((f.shape[0], k), dtype=f.dtype)
    _scan_topk(f, e, k, idx, dist)
    return torch.from_numpy(dist), torch.from_numpy(idx)


def quantize_nearest(latents: torch.Tensor, codebook) -> tuple[MatchResult, torch.Tensor]:
    """Replace every latent vector by its nearest code (ties -> lowest index).

    Returns the match (``indices`` shaped like ``latents.shape[:-1]``) and the
    quantized grid. No gradient flows through the result; callers wanting a
    straight-through estimator use :func:`straight_through`.
    """
    entries = _entries(codebook)
    _check_latents(latents, entries)
    lead = latents.shape[:-1]
    with torch.no_grad():
        flat = latents.detach().reshape(-1, entries.shape[1]).to(entries.dtype)
        dist, idx = _nearest_k(flat, entries, 1)
        quant = entries.detach()[idx[:, 0]]
    return (
        MatchResult(
            indices=idx[:, 0].reshape(lead),
            candidate_indices=idx.reshape(*lead, 1),
            candidate_distances=dist.reshape(*lead, 1),
        ),
        quant.reshape(*lead, entries.shape[1]),
    )


def topk_candidates(latents: torch.Tensor, codebook, k: int) -> MatchResult:
    """The k nearest distinct codes per cell, ascending, ties by lowest index."""
    entries = _entries(codebook)
    K = entries.shape[0]
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1, {K}], got {k}")
    _check_latents(latents, entries)
    lead = latents.shape[:-1]
    with torch.no_grad():
        flat = latents.detach().reshape(-1, entries.shape[1]).to(entries.dtype)
        dist, idx = _nearest_k(flat, entries, k)
    return MatchResult(
        indices=idx[:, 0].reshape(lead),
        candidate_indices=idx.reshape(*lead, k),
        candidate_distances=dist.reshape(*lead, k),
    )


def straight_through(continuous: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value of ``quantized``, gradient of ``continuous``."""
    return continuous + (quantized - continuous).detach()


class CandidateFusion(nn.Module):
    """Attention over the k candidate codes of each cell.

    ``a = softmax((W_q q) . (W_c c_j) / sqrt(n_z))`` over the candidates, the
    attention output ``sum_j a_j c_j`` is blended with the nearest candidate
    through a clamped gate ``g`` in [0, 1]. ``g`` starts at 0 so a fresh module
    returns the nearest code unchanged.
    """

    def __init__(self, n_z: int, k: int):
        super().__init__()
        self.n_z = n_z
        self.k = k
        self.query_proj = nn.Linear(n_z, n_z, bias=False)
        self.cand_proj = nn.Linear(n_z, n_z, bias=False)
        nn.init.eye_(self.query_proj.weight)
        nn.init.eye_(self.cand_proj.weight)
        self.gate = nn.Parameter(torch.zeros(()))

    @property
    def g(self) -> torch.Tensor:
        return self.gate.clamp(0.0, 1.0)

    def set_uniform(self) -> None:
        """Equal attention to every candidate and a fully open gate."""
        with torch.no_grad():
            self.query_proj.weight.zero_()
            self.gate.fill_(1.0)

    def attention(self, query: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        q = self.query_proj(query)[..., None, :]
        c = self.cand_proj(candidates)
        return torch.softmax((q * c).sum(-1) / math.sqrt(self.n_z), dim=-1)

    def forward(self, query: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        if candidates.shape[-2] != self.k:
            raise ValueError(f"expected {self.k} candidates per cell, got {candidates.shape[-2]}")
        if candidates.shape[-1] != self.n_z or query.shape[-1] != self.n_z:
            raise ValueError("query/candidate dimension does not match fusion n_z")
        attn = self.attention(query, candidates)
        mixed = (attn[..., None] * candidates).sum(-2)
        g = self.g
        return (1.0 - g) * candidates[..., 0, :] + g * mixed


def fuse_candidates(query: torch.Tensor, candidates: torch.Tensor, fusion: CandidateFusion) -> torch.Tensor:
    return fusion(query, candidates)


def quantize_topk(latents: torch.Tensor, codebook, k: int, fusion: CandidateFusion) -> tuple[MatchResult, torch.Tensor]:
    """Top-k retrieval, fusion, then nearest-code re-quantization of the fused vector.

    The returned grid carries the selected codes in the forward pass and routes
    gradients into the fused vector (straight-through), so the fusion
    parameters remain trainable.
    """
    entries = _entries(codebook)
    cands = topk_candidates(latents, entries, k)
    cand_vecs = entries.detach()[cands.candidate_indices]
    fused = fusion(latents.to(entries.dtype), cand_vecs)
    with torch.no_grad():
        _, final = _nearest_k(fused.detach().reshape(-1, entries.shape[1]), entries, 1)
        final = final[:, 0]
        quant = entries.detach()[final].reshape(fused.shape)
    return (
        MatchResult(
            indices=final.reshape(fused.shape[:-1]),
            candidate_indices=cands.candidate_indices,
            candidate_distances=cands.candidate_distances,
        ),
        straight_through(fused, quant),
    )


def hit_rate(lq_latents: torch.Tensor, gt_indices: torch.Tensor, codebook, k: int) -> HitRateReport:
    """Count cells whose ground-truth code is among the k nearest candidates."""
    if tuple(lq_latents.shape[:-1]) != tuple(gt_indices.shape):
        raise ValueError(
            f"latent grid {tuple(lq_latents.shape[:-1])} and gt index grid {tuple(gt_indices.shape)} differ"
        )
    cands = topk_candidates(lq_latents, codebook, k)
    hits = (cands.candidate_indices == gt_indices[..., None].to(cands.candidate_indices.dtype)).any(-1)
    return HitRateReport(k=k, hits=int(hits.sum()), total=hits.numel())


def hit_rates(lq_latents, gt_indices, codebook, ks: Iterable[int]) -> list[HitRateReport]:
    return [hit_rate(lq_latents, gt_indices, codebook, k) for k in ks]


def write_hit_rate_csv(reports: Sequence[HitRateReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "hits", "total", "rate"])
        for r in reports:
            w.writerow([r.k, r.hits, r.total, f"{r.rate:.6f}"])


# ---------------------------------------------------------------------------
# matching-cost benchmark


class GlobalAttentionMatcher(nn.Module):
    """Transformer-style global matcher used as the timing baseline.

    Latent cells and codebook entries form one token sequence that goes
    through a full self-attention layer, so every cell attends to every code
    and every code to every other code; each cell is then classified by a
    softmax over all K codes. Cost per image is O((h*w + K)^2 * n_z).
    """

    def __init__(self, n_z: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.n_z = n_z
        self.w_qkv = nn.Parameter(torch.randn(n_z, 3 * n_z, generator=g) / math.sqrt(n_z), requires_grad=False)

    @torch.no_grad()
    def forward(self, latents: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
        lead = latents.shape[:-1]
        tokens = latents.reshape(-1 if latents.ndim < 4 else latents.shape[0], *([] if latents.ndim < 4 else [-1]), self.n_z)
        if tokens.ndim == 2:
            tokens = tokens[None]
        B, N, _ = tokens.shape
        seq = torch.cat([tokens, entries[None].expand(B, -1, -1)], dim=1)
        q, k, v = (seq @ self.w_qkv).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.n_z), dim=-1)
        out = seq + attn @ v
        logits = out[:, :N] @ out[:, N:].transpose(1, 2)
        return logits.argmax(-1).reshape(lead)


def _time_call(fn, repetitions: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass
class BenchRow:
    matcher: str
    K: int
    median_seconds: float
    slope: float


def bench_matching(
    codebook_sizes: Sequence[int] = (64, 128, 256, 512, 1024),
    grid_size: int = 4,
    repetitions: int = 5,
    n_z: int = 64,
    batch: int = 64,
    k: int = 3,
    seed: int = 0,
) -> list[BenchRow]:
    """Median wall time of the top-k matcher and the global-attention matcher per K.

    The workload is ``batch`` latent grids of ``grid_size x grid_size`` cells.
    Timing is pinned to one intra-op thread; the previous setting is restored
    on exit.
    """
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        g = torch.Generator().manual_seed(seed)
        latents = torch.randn(batch, grid_size, grid_size, n_z, generator=g)
        fusion = CandidateFusion(n_z, k)
        fusion.set_uniform()
        global_matcher = GlobalAttentionMatcher(n_z, seed=seed)
        times: dict[str, list[float]] = {"topk": [], "global_attention": []}
        for K in codebook_sizes:
            entries = torch.randn(K, n_z, generator=g)

            def run_topk():
                with torch.no_grad():
                    quantize_topk(latents, entries, k, fusion)

            times["topk"].append(_time_call(run_topk, repetitions))
            times["global_attention"].append(_time_call(lambda: global_matcher(latents, entries), repetitions))
    finally:
        torch.set_num_threads(prev_threads)
    rows = []
    for name, ts in times.items():
        slope = loglog_slope(codebook_sizes, ts) if len(codebook_sizes) > 1 else float("nan")
        rows.extend(BenchRow(name, K, t, slope) for K, t in zip(codebook_sizes, ts))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["matcher", "K", "median_seconds", "slope"])
        for r in rows:
            w.writerow([r.matcher, r.K, f"{r.median_seconds:.9g}", f"{r.slope:.6f}"])


def read_bench_csv(path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        return [
            BenchRow(row["matcher"], int(row["K"]), float(row["median_seconds"]), float(row["slope"]))
            for row in csv.DictReader(fh)
        ]
