"""Differentiable narrowing of the SuperNet skip space with selection matrices.

Every searching block (stages 2..2T) owns an ``N x (N - 2)`` logit matrix,
``N = L + 1`` being the number of blocks in the previous stage. Each column
of its hard Gumbel-Softmax sample picks one incoming stream; the distinct
picks are averaged. The forward value is therefore exactly the mean used by
an instantiated sub-network, so search-time and inference-time outputs agree
bit for bit, while the straight-through estimator feeds gradients back into
the logits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .arch import CompGraph, Runner, SkipEdge, Topology, _check_input, execute
from .data import Dataset
from .errors import ContractError, NumericError, ShapeError
from .tensor import (Tensor, backward, gumbel_softmax, matmul, reshape,
                     straight_through)
from .train import OptimConfig, Optimizer, batches, graph_dtype


def phi_with_selection(streams: Sequence[Tensor], logits: Tensor, rng: np.random.Generator | None,
                       temperature: float = 1.0, noise: bool = True) -> tuple[Tensor, tuple[int, ...]]:
    """Fused stream plus the sorted indices of the distinct selected streams."""
    N = len(streams)
    if N < 3:
        raise ContractError(f"selection needs at least 3 streams, got {N}")
    if logits.shape != (N, N - 2):
        raise ShapeError(f"selection logits must be {N} x {N - 2}, got {logits.shape}")
    if noise and rng is None:
        raise ContractError("Gumbel noise requires an rng")
    G = gumbel_softmax(logits, temperature, hard=True, rng=rng, noise=noise)
    picks = G.data.argmax(axis=0)
    chosen = tuple(sorted(set(int(p) for p in picks)))
    counts = np.bincount(picks, minlength=N)
    dtype = streams[0].dtype
    # column k contributes 1 / (|U| * multiplicity) so each distinct pick totals 1/|U|
    col_w = np.array([1.0 / (len(chosen) * counts[p]) for p in picks], dtype=dtype).reshape(-1, 1)
    soft = matmul(G, Tensor(col_w))
    exact = np.zeros((N, 1), dtype=dtype)
    exact[list(chosen), 0] = 1.0 / len(chosen)
    weights = reshape(straight_through(exact, soft), (N,))
    return nn.weighted_sum(streams, weights), chosen


def phi(streams: Sequence[Tensor], logits: Tensor, rng: np.random.Generator | None,
        temperature: float = 1.0, noise: bool = True) -> Tensor:
    return phi_with_selection(streams, logits, rng, temperature, noise)[0]


def attach_selection(g: CompGraph, seed: int = 0, init_std: float = 1e-3) -> dict:
    """Create a logit matrix for every searching block of a dense SuperNet."""
    cfg = g.config
    N = cfg.L + 1
    if N < 3:
        raise ContractError("selection matrices need L >= 2")
    dtype = graph_dtype(g)
    g.selection = {}
    for s in range(2, cfg.n_stages + 1):
        for lv in range(N):
            rng = np.random.default_rng([seed, 101, s, lv])
            g.selection[(s, lv)] = Tensor(rng.normal(0.0, init_std, (N, N - 2)).astype(dtype),
                                          requires_grad=True, name=f"select{(s, lv)}")
    return g.selection


class Selector:
    """Callable handed to the stage runner; samples and records selections."""

    def __init__(self, g: CompGraph, rng: np.random.Generator | None, temperature: float = 1.0,
                 noise: bool = True):
        self.g, self.rng, self.temperature, self.noise = g, rng, temperature, noise
        self.record: dict[tuple[int, int], tuple[int, ...]] = {}

    def __call__(self, s: int, lv: int, streams):
        out, chosen = phi_with_selection(streams, self.g.selection[(s, lv)], self.rng,
                                         self.temperature, self.noise)
        self.record[(s, lv)] = chosen
        return out


def search_forward(g: CompGraph, x: Tensor, training: bool, selector: Selector) -> Tensor:
    if not g.selection:
        raise ContractError("SuperNet has no selection matrices; call attach_selection first")
    _check_input(g.config, x.shape)
    return execute(g, x, Runner(training), phi=selector)


def extract_candidates(g: CompGraph, name: str = "phase1") -> Topology:
    """Noise-free argmax per column; distinct picks become the block's candidate edges."""
    edges = []
    for (s, lv), logits in sorted(g.selection.items()):
        picks = gumbel_softmax(logits, 1.0, hard=True, rng=None, noise=False).data.argmax(axis=0)
        for j in sorted(set(int(p) for p in picks)):
            edges.append(SkipEdge(s - 1, j, s, lv))
    return Topology(g.config, tuple(edges), name)


@dataclass
class Phase1Config:
    epochs: int = 8
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    temperature: float = 1.0
    anneal_to: float | None = None
    init_std: float = 1e-3
    seed: int = 0


@dataclass
class Phase1Result:
    topology: Topology
    frequencies: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def temperature_at(cfg: Phase1Config, epoch: int) -> float:
    if cfg.anneal_to is None or cfg.epochs <= 1:
        return cfg.temperature
    frac = epoch / (cfg.epochs - 1)
    return cfg.temperature + frac * (cfg.anneal_to - cfg.temperature)


def phase1_search(g: CompGraph, train_ds: Dataset, cfg: Phase1Config, on_epoch=None) -> Phase1Result:
    """Jointly optimise SuperNet weights and selection logits with one Adam optimizer."""
    if not g.selection:
        attach_selection(g, cfg.seed, cfg.init_std)
    keys = sorted(g.selection)
    opt = Optimizer(g.parameters() + [g.selection[k] for k in keys],
                    OptimConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    gumbel_rng = np.random.default_rng([cfg.seed, 1])
    dtype = graph_dtype(g)
    N = g.config.L + 1
    result = Phase1Result(topology=None)
    for epoch in range(cfg.epochs):
        tau = temperature_at(cfg, epoch)
        counts = {k: np.zeros(N) for k in keys}
        losses = []
        steps = 0
        for idx in batches(len(train_ds), cfg.batch_size, np.random.default_rng([cfg.seed, epoch])):
            sel = Selector(g, gumbel_rng, tau)
            try:
                logits = search_forward(g, Tensor(train_ds.images[idx].astype(dtype)), True, sel)
                loss = nn.softmax_cross_entropy(logits, train_ds.masks[idx])
                opt.zero_grad()
                backward(loss)
                opt.step()
            except NumericError as exc:
                raise NumericError(f"phase 1 diverged at epoch {epoch}: {exc}") from exc
            losses.append(loss.item())
            for k, chosen in sel.record.items():
                counts[k][list(chosen)] += 1
            steps += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "temperature": tau}
        result.history.append(row)
        for (s, lv) in keys:
            for j in range(N):
                result.frequencies.append({"epoch": epoch, "stage": s, "level": lv, "stream": j,
                                           "freq": counts[(s, lv)][j] / max(steps, 1)})
        if on_epoch:
            on_epoch(row)
    result.topology = extract_candidates(g)
    return result


def write_selection_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "block", "stream", "freq"])
        for r in rows:
            w.writerow([r["epoch"], f"s{r['stage']}l{r['level']}", r["stream"], f"{r['freq']:.6f}"])
    return path
