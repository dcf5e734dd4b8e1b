"""Progressive evolutionary search over the Phase-1 candidate skips.

Stage pairs are searched from the deepest (2T-1, joining stages 2T-1 and 2T)
down to 1. While pair ``t`` is searched, stages 1..t form a *head* that is
forwarded once per step with the candidate skips, and every member of the
sampled population gets its own *tail* (stages t+1..2T) fed from the very
same head tensors. The tails' losses are averaged and a single backward pass
updates the shared weights. Candidates are then scored by validation IoU and
MACs, and the Pareto front (ranked by IoU, capped) seeds the next pair.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .arch import (ArchConfig, CompGraph, ForwardHooks, Runner, SkipEdge, Topology, build_bionet_pp,
                   instantiate_subnet, liveness, run_post, run_pre, run_stage,
                   supernet_config)
from .cost import count_macs
from .data import Dataset
from .errors import NumericError, SearchError, TopologyError
from .tensor import Tensor, add, backward, scale
from .train import (OptimConfig, Optimizer, ScheduleConfig, batches, evaluate, graph_dtype,
                    recalibrate_bn, schedule)

# a block's skip subset: target level -> sorted source levels
Subsets = dict[int, tuple[int, ...]]


@dataclass(frozen=True)
class CandidateSample:
    parent: int
    subsets: tuple  # ((to_level, (from_levels...)), ...) sorted by level

    def as_dict(self) -> Subsets:
        return dict(self.subsets)


@dataclass(frozen=True)
class ParetoPoint:
    cid: str
    iou: float
    macs: int


@dataclass
class Architecture:
    """Chosen skip subsets for the already-searched stage pairs (t -> subsets)."""

    pairs: dict = field(default_factory=dict)

    def key(self) -> tuple:
        return tuple((t, tuple(sorted(sub.items()))) for t, sub in sorted(self.pairs.items()))


def candidate_sets(topo: Topology, t: int) -> Subsets:
    """Per target block of stage t+1, the candidate source levels of pair t."""
    out: dict[int, list[int]] = {}
    for e in topo.pair_edges(t):
        out.setdefault(e.to_level, []).append(e.from_level)
    return {lv: tuple(sorted(v)) for lv, v in sorted(out.items())}


def sample_subset(cands: Sequence[int], rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform over the 2^n - 1 non-empty subsets."""
    n = len(cands)
    mask = int(rng.integers(1, 2 ** n))
    return tuple(c for i, c in enumerate(cands) if mask >> i & 1)


def sample_population(C_t: Subsets, s: int, retained: Sequence,
                      rng: np.random.Generator) -> list[CandidateSample]:
    """``s`` samples per retained architecture; each block draws a non-empty subset of its C."""
    if not C_t:
        raise SearchError("stage pair has no candidate skips")
    for lv, c in C_t.items():
        if not c:
            raise SearchError(f"block at level {lv} has no candidate skips")
    out = []
    for p in range(len(retained)):
        for _ in range(s):
            out.append(CandidateSample(p, tuple((lv, sample_subset(c, rng)) for lv, c in sorted(C_t.items()))))
    return out


def compose(cfg: ArchConfig, base: Topology, pairs: dict, name: str = "candidate") -> Topology:
    """``base`` edges for pairs not in ``pairs``; the chosen subsets elsewhere."""
    edges = [e for e in base.edges if e.from_stage not in pairs]
    for t, subsets in pairs.items():
        edges += [SkipEdge(t, j, t + 1, lv) for lv, srcs in subsets.items() for j in srcs]
    return Topology(cfg, tuple(edges), name)


def digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def dominates(p: ParetoPoint, q: ParetoPoint) -> bool:
    return p.iou >= q.iou and p.macs <= q.macs and (p.iou > q.iou or p.macs < q.macs)


def pareto_front(points: Sequence[ParetoPoint], cap: int | None = 3) -> list[ParetoPoint]:
    """Non-dominated points (higher IoU, lower MACs), ranked by IoU descending."""
    order = sorted(range(len(points)), key=lambda i: (points[i].macs, -points[i].iou, i))
    front = []
    best_cheaper = -np.inf  # best IoU among strictly cheaper points
    i = 0
    while i < len(order):
        j = i
        macs = points[order[i]].macs
        while j < len(order) and points[order[j]].macs == macs:
            j += 1
        group = [order[k] for k in range(i, j)]
        top = points[group[0]].iou
        for k in group:
            if points[k].iou == top and not best_cheaper >= top:
                front.append(k)
        best_cheaper = max(best_cheaper, top)
        i = j
    front.sort(key=lambda k: (-points[k].iou, points[k].macs, k))
    ranked = [points[k] for k in front]
    return ranked if cap is None else ranked[:cap]


def check_skip_fairness(trace: Sequence[Sequence[dict]]) -> bool:
    """True iff, at every step, tails consuming the same head feature saw identical bytes."""
    for step in trace:
        seen: dict = {}
        for tail in step:
            for level, d in tail.items():
                if seen.setdefault(level, d) != d:
                    return False
    return True


@dataclass
class StepResult:
    loss: float
    tail_losses: list[float]
    digests: list[dict]


def _tail_plan(cfg: ArchConfig, topo: Topology):
    return topo.incoming(), liveness(cfg, topo)


def evaluate_step(g: CompGraph, t: int, head_topo: Topology, tails: Sequence[Topology],
                  images: np.ndarray, masks: np.ndarray, stage_counter: list | None = None) -> StepResult:
    """Forward the head once, every tail on the same head tensors, one backward of the mean loss."""
    cfg = g.config
    R = Runner(True, ForwardHooks(stage_forwards=stage_counter))
    x = Tensor(images.astype(graph_dtype(g)))
    full = R.spatial(x)
    head_inc, head_alive = _tail_plan(cfg, head_topo)
    pre = run_pre(g, x, R)
    outs = None
    for s in range(1, t + 1):
        outs = run_stage(g, R, s, outs, full, pre_out=pre, incoming=head_inc, alive=head_alive)
    head = outs
    losses, digests = [], []
    for i, topo in enumerate(tails):
        inc, alive = _tail_plan(cfg, topo)
        used = sorted({j for lv in range(cfg.L + 1) if alive[(t + 1, lv)] for j in inc.get((t + 1, lv), ())})
        digests.append({lv: digest(head[lv].data) for lv in used})
        try:
            o = head
            for s in range(t + 1, cfg.n_stages + 1):
                o = run_stage(g, R, s, o, full, incoming=inc, alive=alive)
            loss = nn.softmax_cross_entropy(run_post(g, o[0], R), masks)
        except NumericError as exc:
            raise NumericError(f"tail {i} of stage pair {t}: {exc}") from exc
        if not np.isfinite(loss.item()):
            raise NumericError(f"tail {i} of stage pair {t} produced a non-finite loss")
        losses.append(loss)
    total = scale(reduce(add, losses), 1.0 / len(losses))
    backward(total)
    return StepResult(total.item(), [l.item() for l in losses], digests)


def independent_step(g: CompGraph, opt: Optimizer, t: int, head_topo: Topology,
                     tails: Sequence[Topology], images, masks, stage_counter=None) -> StepResult:
    """Ablation: each candidate gets its own full forward, backward and update in turn."""
    losses, digests = [], []
    for topo in tails:
        opt.zero_grad()
        step = evaluate_step(g, t, head_topo, [topo], images, masks, stage_counter)
        opt.step()
        losses.append(step.loss)
        digests.extend(step.digests)
    return StepResult(float(np.mean(losses)), losses, digests)


@dataclass
class Phase2Config:
    samples: int = 4
    cap: int = 3
    epochs_per_iter: int = 2
    batch_size: int = 8
    lr: float = 1e-3
    decay_every: int = 10
    decay_factor: float = 0.1
    search_width_mult: float = 1.0
    recalib_batches: int = 4
    mac_input: tuple = (512, 512)
    mode: str = "progressive"
    seed: int = 0


@dataclass
class Phase2Result:
    topology: Topology
    log: list[dict] = field(default_factory=list)
    train_log: list[dict] = field(default_factory=list)
    trace: list = field(default_factory=list)
    stage_forwards: list[dict] = field(default_factory=list)
    iterations: int = 0

    @property
    def fair(self) -> bool:
        return check_skip_fairness(self.trace)


def _score(sub: CompGraph, full_cfg: ArchConfig, topo: Topology, train_ds: Dataset, val_ds: Dataset,
           cfg: Phase2Config) -> tuple[float, int]:
    if cfg.recalib_batches:
        recalibrate_bn(sub, train_ds, cfg.recalib_batches, cfg.batch_size)
    iou = evaluate(sub, val_ds)["mIoU"]
    macs = count_macs(instantiate_subnet(full_cfg, topo, seed=0), cfg.mac_input)
    return iou, macs


def progressive_search(supernet_cfg: ArchConfig, candidates: Topology, train_ds: Dataset,
                       val_ds: Dataset, cfg: Phase2Config, on_event=None) -> Phase2Result:
    """Search every stage pair from deepest to shallowest; returns the top-ranked topology."""
    if cfg.mode not in ("progressive", "independent"):
        raise SearchError(f"unknown phase-2 mode {cfg.mode!r}")
    full_cfg = supernet_config(supernet_cfg)
    if (candidates.config.T, candidates.config.L) != (full_cfg.T, full_cfg.L):
        raise TopologyError("candidate topology does not match the SuperNet depth")
    candidates = Topology(full_cfg, candidates.edges, candidates.name)
    search_cfg = full_cfg.replace(N_mult=full_cfg.N_mult * cfg.search_width_mult)
    g = build_bionet_pp(search_cfg, seed=cfg.seed)
    opt = Optimizer(g.parameters(), OptimConfig(lr=cfg.lr))
    sched = ScheduleConfig("step_decay", lr0=cfg.lr, factor=cfg.decay_factor, every=cfg.decay_every)
    result = Phase2Result(topology=None)
    retained = [Architecture()]
    T2 = full_cfg.n_stages
    for t in range(T2 - 1, 0, -1):
        C_t = candidate_sets(candidates, t)
        try:
            pop = sample_population(C_t, cfg.samples, retained, np.random.default_rng([cfg.seed, 2, t]))
        except SearchError as exc:
            raise SearchError(f"stage pair {t}: {exc}") from exc
        children = [Architecture({**retained[c.parent].pairs, t: c.as_dict()}) for c in pop]
        tails = [compose(search_cfg, candidates, ch.pairs) for ch in children]
        for epoch in range(cfg.epochs_per_iter):
            opt.lr = schedule(sched, epoch)
            losses = []
            parent_losses = np.zeros(len(retained))
            for idx in batches(len(train_ds), cfg.batch_size, np.random.default_rng([cfg.seed, 3, t, epoch])):
                counter: list = []
                imgs, msks = train_ds.images[idx], train_ds.masks[idx]
                if cfg.mode == "progressive":
                    opt.zero_grad()
                    step = evaluate_step(g, t, candidates, tails, imgs, msks, counter)
                    opt.step()
                else:
                    step = independent_step(g, opt, t, candidates, tails, imgs, msks, counter)
                result.trace.append(step.digests)
                result.stage_forwards.append({"pair": t, "population": len(tails), "count": len(counter)})
                losses.append(step.loss)
                for c, l in zip(pop, step.tail_losses):
                    parent_losses[c.parent] += l / cfg.samples
            row = {"pair": t, "epoch": epoch, "lr": opt.lr, "loss": float(np.mean(losses)),
                   "parent_losses": [float(v / max(len(losses), 1)) for v in parent_losses]}
            result.train_log.append(row)
            if on_event:
                on_event(row)
        points, seen, by_id = [], set(), {}
        for k, ch in enumerate(children):
            if ch.key() in seen:
                continue
            seen.add(ch.key())
            cid = f"t{t}-p{pop[k].parent}-c{k}"
            topo = compose(search_cfg, candidates, ch.pairs)
            sub = instantiate_subnet(search_cfg, topo, source=g)
            iou, macs = _score(sub, full_cfg, compose(full_cfg, candidates, ch.pairs), train_ds, val_ds, cfg)
            points.append(ParetoPoint(cid, iou, macs))
            by_id[cid] = ch
        front = pareto_front(points, cfg.cap)
        kept = {p.cid for p in front}
        for p in points:
            result.log.append({"pair": t, "candidate": p.cid, "IoU": p.iou, "MACs": p.macs,
                               "retained": p.cid in kept})
        if on_event:
            on_event({"pair": t, "front": [(p.cid, p.iou, p.macs) for p in front]})
        retained = [by_id[p.cid] for p in front]
        result.iterations += 1
    best = retained[0]
    result.topology = compose(full_cfg, candidates, best.pairs, name="bix")
    return result


def random_search(supernet_cfg: ArchConfig, candidates: Topology, train_ds: Dataset, val_ds: Dataset,
                  cfg: Phase2Config, n_candidates: int = 8, epochs: int = 2) -> Phase2Result:
    """Baseline: random full topologies from the candidates, trained with shared weights."""
    full_cfg = supernet_config(supernet_cfg)
    candidates = Topology(full_cfg, candidates.edges, candidates.name)
    search_cfg = full_cfg.replace(N_mult=full_cfg.N_mult * cfg.search_width_mult)
    g = build_bionet_pp(search_cfg, seed=cfg.seed)
    opt = Optimizer(g.parameters(), OptimConfig(lr=cfg.lr))
    rng = np.random.default_rng([cfg.seed, 4])
    archs = []
    for _ in range(n_candidates):
        pairs = {t: {lv: sample_subset(c, rng) for lv, c in candidate_sets(candidates, t).items()}
                 for t in range(1, full_cfg.n_pairs + 1)}
        archs.append(Architecture(pairs))
    result = Phase2Result(topology=None)
    for epoch in range(epochs):
        for idx in batches(len(train_ds), cfg.batch_size, np.random.default_rng([cfg.seed, 5, epoch])):
            arch = archs[int(rng.integers(len(archs)))]
            topo = compose(search_cfg, candidates, arch.pairs)
            opt.zero_grad()
            step = evaluate_step(g, 1, topo, [topo], train_ds.images[idx], train_ds.masks[idx])
            opt.step()
            result.train_log.append({"pair": 0, "epoch": epoch, "loss": step.loss})
    points = []
    for k, arch in enumerate(archs):
        sub = instantiate_subnet(search_cfg, compose(search_cfg, candidates, arch.pairs), source=g)
        iou, macs = _score(sub, full_cfg, compose(full_cfg, candidates, arch.pairs), train_ds, val_ds, cfg)
        points.append(ParetoPoint(f"r{k}", iou, macs))
    front = pareto_front(points, cfg.cap)
    kept = {p.cid for p in front}
    result.log = [{"pair": 0, "candidate": p.cid, "IoU": p.iou, "MACs": p.macs, "retained": p.cid in kept}
                  for p in points]
    best = archs[int(front[0].cid[1:])]
    result.topology = compose(full_cfg, candidates, best.pairs, name="random")
    return result


def write_search_log(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage_pair", "candidate", "IoU", "MACs", "retained"])
        for r in rows:
            w.writerow([r["pair"], r["candidate"], f"{r['IoU']:.6f}", r["MACs"], int(r["retained"])])
    return path


def write_fairness_trace(trace: Sequence, path) -> Path:
    path = Path(path)
    steps = [[{str(k): v for k, v in sorted(tail.items())} for tail in step] for step in trace]
    path.write_text(json.dumps({"fair": check_skip_fairness(trace), "steps": steps}) + "\n")
    return path
