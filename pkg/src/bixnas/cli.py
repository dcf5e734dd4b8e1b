"""``engine`` command line: build, train, search and eval."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor
from .arch import (CompGraph, backward_fusion_sites, build_bionet, build_bionet_pp,
                   instantiate_subnet, load_topology, save_topology, supernet_config)
from .config import ExperimentConfig, load_config
from .cost import conv_param_count, cost_report, count_macs, reference_comparison
from .data import make_splits
from .errors import (CheckpointError, ConfigError, EngineError, NumericError, SearchError,
                     TopologyError)
from .phase1 import attach_selection, phase1_search, write_selection_csv
from .phase2 import progressive_search, random_search, write_fairness_trace, write_search_log
from .train import (CheckpointInfo, Optimizer, evaluate, load_checkpoint, save_checkpoint, train,
                    write_history_csv)

EXIT_CODES = [(ConfigError, 2), (TopologyError, 3), (NumericError, 4), (SearchError, 5),
              (CheckpointError, 6)]


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 2 if isinstance(exc, EngineError) else 1


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfg.resolved_json())
    return out


def _data(cfg: ExperimentConfig):
    d = cfg.data
    return make_splits(d.n_train, d.n_val, H=d.H, W=d.W, K=d.K, noise_level=d.noise_level, seed=cfg.seed,
                       channels=d.channels, divisor=2 ** cfg.arch.L)


def _build(cfg: ExperimentConfig, arch: str, topology: str | None) -> CompGraph:
    ac = cfg.arch_config()
    if arch == "bionet":
        return build_bionet(ac, seed=cfg.seed)
    if arch == "bionetpp":
        return build_bionet_pp(ac, seed=cfg.seed)
    if not topology:
        raise ConfigError("--topology is required for arch 'sub'")
    return instantiate_subnet(supernet_config(ac), load_topology(topology), seed=cfg.seed)


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_build(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    arch = args.arch or cfg.train.arch
    g = _build(cfg, arch, args.topology or cfg.train.topology)
    shape = tuple(args.input or cfg.search.mac_input)
    rep = cost_report(g, shape)
    payload = rep.to_dict()
    payload.update({
        "arch": arch,
        "T": g.config.T,
        "L": g.config.L,
        "stage_pairs": g.config.n_pairs,
        "conv_params": conv_param_count(g),
        "skip_edges": len(g.topology.edges),
    })
    if g.kind == "bionet":
        payload["backward_fusion_sites"] = backward_fusion_sites(g)
    _json(out / f"cost_{arch}.json", payload)
    print(rep.to_table())
    print(f"params {rep.params}")
    print(f"conv_params {payload['conv_params']}")
    print(f"macs {rep.macs}")
    print(f"stage_pairs {g.config.n_pairs}")
    if args.reference:
        cmp = reference_comparison()
        _json(out / "complexity_reference.json", cmp)
        fmt = lambda v: f"{v:,}" if isinstance(v, int) else f"{v:.2f}"
        for it in cmp["items"]:
            print(f"{it['item']}: measured {fmt(it['measured'])} vs reference {fmt(it['reference'])} "
                  f"({it['deviation']:+.1%})")
    return 0


def _plot_history(history, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "engine"
    fig, ax = plt.subplots(figsize=(6, 4))
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [h["train_loss"] for h in history], label="train loss")
    vals = [(h["epoch"], h["val_mIoU"]) for h in history if h["val_mIoU"] is not None]
    if vals:
        ax.plot([v[0] for v in vals], [v[1] for v in vals], label="val mIoU")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    train_ds, val_ds = _data(cfg)
    g = _build(cfg, cfg.train.arch, cfg.train.topology)
    tc = cfg.train_config()
    opt = Optimizer(g.parameters(), tc.optim)
    resume = load_checkpoint(args.resume, g, opt) if args.resume else None
    start = time.perf_counter()

    def report(row):
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  lr {row['lr']:.2e}  "
              f"val mIoU {row['val_mIoU']:.4f}  ({time.perf_counter() - start:.0f}s)", flush=True)

    res = train(g, train_ds, val_ds, tc, resume=resume, optimizer=opt, on_epoch=report)
    write_history_csv(res.history, out / "history.csv")
    _plot_history(res.history, out / "curve.svg")
    save_checkpoint(out / "last.ckpt", g, opt, epoch=len(res.history), history=res.history,
                    extra={"arch": cfg.train.arch})
    if res.best_state is not None:
        res.restore_best()
        save_checkpoint(out / "best.ckpt", g, None, epoch=res.best_epoch + 1, history=res.history,
                        extra={"arch": cfg.train.arch, "best_mIoU": res.best_mIoU})
    print(f"best val mIoU {res.best_mIoU:.4f} at epoch {res.best_epoch}")
    return 0


def cmd_search(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    train_ds, val_ds = _data(cfg)
    ac = supernet_config(cfg.arch_config())
    mac_in = tuple(cfg.search.mac_input)
    summary: dict = {"supernet_macs": count_macs(build_bionet_pp(ac), mac_in)}
    candidates = None
    if args.phase in ("1", "both"):
        g = build_bionet_pp(ac, seed=cfg.seed)
        attach_selection(g, cfg.seed)
        r1 = phase1_search(g, train_ds, cfg.phase1_config(),
                           on_epoch=lambda r: print(f"phase1 epoch {r['epoch']} loss {r['loss']:.4f}", flush=True))
        candidates = r1.topology
        save_topology(candidates, out / "phase1_topology.json")
        write_selection_csv(r1.frequencies, out / "selection_freq.csv")
        summary["phase1_edges"] = len(candidates.edges)
        summary["phase1_macs"] = count_macs(instantiate_subnet(ac, candidates), mac_in)
    if args.phase in ("2", "both"):
        if candidates is None:
            path = args.candidates or out / "phase1_topology.json"
            if not Path(path).exists():
                raise SearchError(f"phase 2 needs phase-1 candidates; {path} not found")
            candidates = load_topology(path)
        summary.setdefault("phase1_macs", count_macs(instantiate_subnet(ac, candidates), mac_in))
        if args.baseline == "random":
            s = cfg.search
            r2 = random_search(ac, candidates, train_ds, val_ds, cfg.phase2_config(),
                               n_candidates=s.random_candidates, epochs=s.random_epochs)
        else:
            mode = "independent" if args.baseline == "independent" else "progressive"
            r2 = progressive_search(ac, candidates, train_ds, val_ds, cfg.phase2_config(mode),
                                    on_event=lambda e: print(f"phase2 {e}", flush=True))
        tag = "bix" if args.baseline == "none" else f"baseline_{args.baseline}"
        save_topology(r2.topology, out / f"{tag}_topology.json")
        write_search_log(r2.log, out / f"{tag}_search_log.csv")
        write_fairness_trace(r2.trace, out / f"{tag}_fairness.json")
        with (out / f"{tag}_stage_forwards.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "stage_pair", "population", "stage_forwards"])
            for i, row in enumerate(r2.stage_forwards):
                w.writerow([i, row["pair"], row["population"], row["count"]])
        summary.update({
            "baseline": args.baseline,
            "iterations": r2.iterations,
            "skip_fairness": r2.fair,
            "final_edges": len(r2.topology.edges),
            "final_macs": count_macs(instantiate_subnet(ac, r2.topology), mac_in),
        })
    _json(out / f"search_summary_{args.phase}_{args.baseline}.json", summary)
    for k, v in summary.items():
        print(f"{k} {v}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    train_ds, val_ds = _data(cfg)
    g = _build(cfg, args.arch or cfg.train.arch, args.topology or cfg.train.topology)
    info: CheckpointInfo = load_checkpoint(ckpt, g)
    ds = train_ds if args.split == "train" else val_ds
    m = evaluate(g, ds)
    names = ["IoU", "DICE", "sensitivity", "specificity"]
    rows = [[f"class{k}"] + [f"{m['per_class'][n][k]:.6f}" for n in names] for k in range(ds.num_classes)]
    rows.append(["mean"] + [f"{m[n]:.6f}" for n in names])
    with (out / f"metrics_{args.split}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + names)
        w.writerows(rows)
    print(f"{'class':<10}" + "".join(f"{n:>13}" for n in names))
    for r in rows:
        print(f"{r[0]:<10}" + "".join(f"{v:>13}" for v in r[1:]))
    if m["empty_classes"]:
        print(f"classes absent from prediction and target (excluded from mean): {m['empty_classes']}")
    print(f"checkpoint epoch {info.epoch}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="engine", description="BiO-Net / BiX-NAS segmentation engine")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML experiment config")
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, reproducible)")

    b = sub.add_parser("build", help="build a network and report params/MACs")
    common(b)
    b.add_argument("--arch", choices=["bionet", "bionetpp", "sub"])
    b.add_argument("--topology")
    b.add_argument("--input", type=int, nargs=2, metavar=("H", "W"))
    b.add_argument("--reference", action="store_true",
                   help="also compare canonical (base 32, L=4, T=3) param counts with the reference figures")

    t = sub.add_parser("train", help="train the configured network")
    common(t)
    t.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("search", help="run the skip search")
    common(s)
    s.add_argument("--phase", choices=["1", "2", "both"], default="both")
    s.add_argument("--baseline", choices=["none", "random", "independent"], default="none")
    s.add_argument("--candidates", help="phase-1 topology for --phase 2")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--arch", choices=["bionet", "bionetpp", "sub"])
    e.add_argument("--topology")
    e.add_argument("--split", choices=["val", "train"], default="val")
    return p


COMMANDS = {"build": cmd_build, "train": cmd_train, "search": cmd_search, "eval": cmd_eval}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        tensor.set_default_dtype(np.dtype(cfg.train.dtype))
        # non-finite values are caught and reported as NumericError, so numpy's own warnings are noise
        with threadpool_limits(limits=max(1, args.threads)), np.errstate(over="ignore", invalid="ignore",
                                                                          divide="ignore"):
            return COMMANDS[args.command](cfg, args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    finally:
        tensor.set_default_dtype(np.float64)


if __name__ == "__main__":
    sys.exit(main())
