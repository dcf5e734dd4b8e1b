"""Architecture configs, skip topologies and unrolled weight-shared graphs.

Two families are built here:

* BiO-Net: a U-Net-shaped encoder/decoder unrolled ``T`` times. Same-level
  blocks reuse one set of convolution weights across iterations while every
  iteration owns its batch-norm layers. Decoded features return to the
  encoder of the next iteration through backward skips.
* BiO-Net++ (the SuperNet): ``2T`` extraction stages of ``L + 1`` blocks each.
  Every block of stage ``s + 1`` may receive the outputs of all blocks of
  stage ``s`` (bilinearly resized), averaged together and then averaged with
  the block's sequential stream. Sub-networks keep a subset of those edges;
  blocks that can no longer reach the post-processing head are dropped.

Stages are numbered 1..2T; odd stages encode, even stages decode. Levels run
0 (full resolution) .. L (coarsest).
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import nn
from .errors import ConfigError, ParseError, ShapeError, TopologyError
from .tensor import Tensor, default_dtype

SCHEMA_VERSION = 1
FUSIONS = ("concat", "average")
UPSAMPLES = ("transpose", "bilinear")
WIDTH_RULES = ("doubling", "uniform")


@dataclass(frozen=True)
class ArchConfig:
    T: int = 3
    L: int = 4
    N_mult: float = 1.0
    W_back: int | None = None
    base_width: int = 32
    fusion: str = "concat"
    upsample: str = "transpose"
    width_rule: str = "doubling"
    in_channels: int = 3
    num_classes: int = 2

    def __post_init__(self):
        if self.W_back is None:
            object.__setattr__(self, "W_back", self.L)
        checks = [
            (isinstance(self.T, int) and self.T >= 1, "T must be an integer >= 1"),
            (isinstance(self.L, int) and self.L >= 1, "L must be an integer >= 1"),
            (self.N_mult > 0, "N_mult must be positive"),
            (isinstance(self.W_back, int) and 0 <= self.W_back <= self.L, "W_back must lie in [0, L]"),
            (isinstance(self.base_width, int) and self.base_width >= 1, "base_width must be >= 1"),
            (self.fusion in FUSIONS, f"fusion must be one of {FUSIONS}"),
            (self.upsample in UPSAMPLES, f"upsample must be one of {UPSAMPLES}"),
            (self.width_rule in WIDTH_RULES, f"width_rule must be one of {WIDTH_RULES}"),
            (self.in_channels >= 1, "in_channels must be >= 1"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if min(self.width(lv) for lv in range(self.L + 1)) < 1:
            raise ConfigError("N_mult too small: a level would have zero channels")

    @property
    def n_stages(self) -> int:
        return 2 * self.T

    @property
    def n_pairs(self) -> int:
        return 2 * self.T - 1

    def width(self, level: int) -> int:
        mult = 1 if self.width_rule == "uniform" else 2 ** level
        return int(round(self.base_width * self.N_mult * mult))

    def replace(self, **kw) -> "ArchConfig":
        if "L" in kw and "W_back" not in kw and self.W_back == self.L:
            kw["W_back"] = None  # keep following L
        return dataclasses.replace(self, **kw)

    def topology_fields(self) -> dict:
        return {"T": self.T, "L": self.L, "N_mult": self.N_mult, "W_back": self.W_back,
                "base_width": self.base_width, "fusion": self.fusion, "upsample": self.upsample,
                "width_rule": self.width_rule}


def supernet_config(cfg: ArchConfig) -> ArchConfig:
    """The SuperNet always averages, resizes bilinearly and keeps one width."""
    return cfg.replace(fusion="average", upsample="bilinear", width_rule="uniform")


# -- topology -----------------------------------------------------------------

@dataclass(frozen=True, order=True)
class SkipEdge:
    from_stage: int
    from_level: int
    to_stage: int
    to_level: int
    direction: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.direction:
            object.__setattr__(self, "direction", "forward" if self.from_stage % 2 == 1 else "backward")

    @property
    def pair(self) -> int:
        return self.from_stage

    def as_dict(self) -> dict:
        return {"from_stage": self.from_stage, "from_level": self.from_level,
                "to_stage": self.to_stage, "to_level": self.to_level, "direction": self.direction}


def _validate_edge(e: SkipEdge, cfg: ArchConfig) -> None:
    if e.to_stage != e.from_stage + 1:
        raise TopologyError(f"edge {e.as_dict()} does not join adjacent stages")
    if not 1 <= e.from_stage <= cfg.n_stages - 1:
        raise TopologyError(f"from_stage {e.from_stage} outside 1..{cfg.n_stages - 1}")
    for lv in (e.from_level, e.to_level):
        if not 0 <= lv <= cfg.L:
            raise TopologyError(f"level {lv} outside 0..{cfg.L}")
    expected = "forward" if e.from_stage % 2 == 1 else "backward"
    if e.direction != expected:
        raise TopologyError(f"edge from stage {e.from_stage} must be {expected}, got {e.direction}")


@dataclass(frozen=True, eq=False)
class Topology:
    config: ArchConfig
    edges: tuple = ()
    name: str = "topology"

    def __post_init__(self):
        for e in self.edges:
            _validate_edge(e, self.config)
        object.__setattr__(self, "edges", tuple(sorted(set(self.edges))))

    def _key(self):
        # channel counts of the data are not part of a topology file
        return tuple(sorted(self.config.topology_fields().items())), self.edges, self.name

    def __eq__(self, other):
        return isinstance(other, Topology) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def pair_edges(self, t: int) -> list[SkipEdge]:
        return [e for e in self.edges if e.from_stage == t]

    def incoming(self) -> dict[tuple[int, int], tuple[int, ...]]:
        """(to_stage, to_level) -> sorted source levels."""
        out: dict[tuple[int, int], list[int]] = {}
        for e in self.edges:
            out.setdefault((e.to_stage, e.to_level), []).append(e.from_level)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    def with_pair(self, t: int, edges: Iterable[SkipEdge]) -> "Topology":
        kept = [e for e in self.edges if e.from_stage != t]
        return Topology(self.config, tuple(kept) + tuple(edges), self.name)

    def renamed(self, name: str) -> "Topology":
        return Topology(self.config, self.edges, name)

    # serialisation
    def to_text(self) -> str:
        head = json.dumps({"schema": SCHEMA_VERSION, "name": self.name,
                           "config": self.config.topology_fields()})
        lines = [head[:-1] + ', "edges": [']
        body = [json.dumps(e.as_dict()) for e in self.edges]
        lines.extend("  " + b + ("," if i < len(body) - 1 else "") for i, b in enumerate(body))
        lines.append("]}")
        return "\n".join(lines) + "\n"


def dense_topology(cfg: ArchConfig, name: str = "supernet") -> Topology:
    edges = [SkipEdge(s, a, s + 1, b)
             for s in range(1, cfg.n_stages) for a in range(cfg.L + 1) for b in range(cfg.L + 1)]
    return Topology(cfg, tuple(edges), name)


def bionet_topology(cfg: ArchConfig, name: str = "bionet") -> Topology:
    """Same-level skips of BiO-Net: L forward per iteration, W_back backward between iterations."""
    edges = []
    for it in range(cfg.T):
        enc, dec = 2 * it + 1, 2 * it + 2
        edges += [SkipEdge(enc, lv, dec, lv) for lv in range(cfg.L)]
        if it + 1 < cfg.T:
            edges += [SkipEdge(dec, lv, dec + 1, lv) for lv in range(cfg.L - cfg.W_back, cfg.L)]
    return Topology(cfg, tuple(edges), name)


def save_topology(topo: Topology, path) -> Path:
    path = Path(path)
    path.write_text(topo.to_text())
    return path


def _line_of(text: str, needle: str, occurrence: int) -> int | None:
    pos = -1
    for _ in range(occurrence + 1):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return None
    return text.count("\n", 0, pos) + 1


def parse_topology(text: str) -> Topology:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(raw, dict):
        raise ParseError("top level must be an object", line=1)
    if raw.get("schema") != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema {raw.get('schema')!r}", line=_line_of(text, '"schema"', 0),
                         field="schema")
    for key in ("name", "config", "edges"):
        if key not in raw:
            raise ParseError("missing field", field=key)
    conf = raw["config"]
    if not isinstance(conf, dict):
        raise ParseError("config must be an object", line=_line_of(text, '"config"', 0), field="config")
    allowed = set(ArchConfig().topology_fields())
    unknown = set(conf) - allowed
    if unknown:
        raise ParseError(f"unknown config keys {sorted(unknown)}", line=_line_of(text, '"config"', 0),
                         field="config")
    try:
        cfg = ArchConfig(**conf)
    except (ConfigError, TypeError) as exc:
        raise ParseError(f"bad config: {exc}", line=_line_of(text, '"config"', 0), field="config") from None
    if not isinstance(raw["edges"], list):
        raise ParseError("edges must be a list", field="edges")
    edges = []
    keys = ("from_stage", "from_level", "to_stage", "to_level", "direction")
    for i, item in enumerate(raw["edges"]):
        line = _line_of(text, '"from_stage"', i)
        if not isinstance(item, dict):
            raise ParseError("edge must be an object", line=line, field=f"edges[{i}]")
        for k in keys:
            if k not in item:
                raise ParseError("missing edge field", line=line, field=f"edges[{i}].{k}")
            ok = isinstance(item[k], str) if k == "direction" else (
                isinstance(item[k], int) and not isinstance(item[k], bool))
            if not ok:
                raise ParseError("wrong type", line=line, field=f"edges[{i}].{k}")
        extra = set(item) - set(keys)
        if extra:
            raise ParseError(f"unknown edge keys {sorted(extra)}", line=line, field=f"edges[{i}]")
        if item["direction"] not in ("forward", "backward"):
            raise ParseError("direction must be forward or backward", line=line, field=f"edges[{i}].direction")
        e = SkipEdge(**{k: item[k] for k in keys})
        _validate_edge(e, cfg)
        edges.append(e)
    return Topology(cfg, tuple(edges), str(raw["name"]))


def load_topology(path) -> Topology:
    return parse_topology(Path(path).read_text())


# -- liveness -----------------------------------------------------------------

def liveness(cfg: ArchConfig, topo: Topology) -> dict[tuple[int, int], bool]:
    """Blocks of a SuperNet sub-topology that still reach the post-processing head."""
    L, S = cfg.L, cfg.n_stages
    alive: dict[tuple[int, int], bool] = {}
    incoming = topo.incoming()
    for s in range(S, 0, -1):
        has_out = [False] * (L + 1)
        if s == S:
            has_out[0] = True
        else:
            for e in topo.pair_edges(s):
                if alive[(s + 1, e.to_level)]:
                    has_out[e.from_level] = True
        if s % 2 == 1:  # encoder: level l feeds l+1
            nxt = False
            for lv in range(L, -1, -1):
                nxt = has_out[lv] or nxt
                alive[(s, lv)] = nxt
        else:  # decoder: level l feeds l-1
            nxt = False
            for lv in range(L + 1):
                nxt = has_out[lv] or nxt
                alive[(s, lv)] = nxt
    for (s, lv), live in alive.items():
        if not live:
            continue
        has_seq = (lv > 0 or s == 1) if s % 2 == 1 else lv < L
        if not has_seq and not incoming.get((s, lv)):
            raise TopologyError(f"block (stage {s}, level {lv}) is needed but receives no input")
    return alive


# -- computation graph --------------------------------------------------------

@dataclass
class Block:
    role: str
    level: int
    stage: int
    iteration: int
    alive: bool = True


@dataclass
class CompGraph:
    kind: str
    config: ArchConfig
    topology: Topology
    nodes: list[Block]
    convs: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    alive: dict = field(default_factory=dict)
    selection: dict = field(default_factory=dict)
    seed: int = 0

    def parameters(self, include_selection: bool = False) -> list[Tensor]:
        return [t for _, t in self.named_parameters(include_selection)]

    def named_parameters(self, include_selection: bool = False) -> list[tuple[str, Tensor]]:
        out = []
        for key in sorted(self.convs, key=repr):
            c = self.convs[key]
            out += [(f"conv{key}.weight", c.weight), (f"conv{key}.bias", c.bias)]
        for key in sorted(self.norms, key=repr):
            b = self.norms[key]
            out += [(f"bn{key}.gamma", b.gamma), (f"bn{key}.beta", b.beta)]
        if include_selection:
            for key in sorted(self.selection):
                out.append((f"select{key}", self.selection[key]))
        return out

    def weight_parameters(self) -> list[Tensor]:
        """Shared convolution weights and biases only."""
        return [t for key in sorted(self.convs, key=repr) for t in self.convs[key].parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters(include_selection=True):
            p.grad = None

    def structure_signature(self) -> list:
        sig = [[name, list(t.shape)] for name, t in self.named_parameters(include_selection=True)]
        return [self.kind, [e.as_dict() for e in self.topology.edges], sig]


def _rng_for(seed: int, key) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(repr(key).encode())])


def _conv(g: CompGraph, key, in_ch, out_ch, k=3, transposed=False, dtype=None):
    if key not in g.convs:
        g.convs[key] = nn.make_conv(in_ch, out_ch, k, _rng_for(g.seed, key),
                                    padding=None if not transposed else 0,
                                    transposed=transposed, dtype=dtype)
    return g.convs[key]


def _norm(g: CompGraph, key, ch, dtype=None):
    if key not in g.norms:
        g.norms[key] = nn.make_batch_norm(ch, dtype=dtype)
    return g.norms[key]


def _add_pre_post(g: CompGraph, dtype) -> None:
    cfg = g.config
    w0 = cfg.width(0)
    for u in range(3):
        _conv(g, ("pre", 0, u), cfg.in_channels if u == 0 else w0, w0, dtype=dtype)
        _norm(g, ("pre", 0, 0, u), w0, dtype)
    for u in range(2):
        _conv(g, ("post", 0, u), w0, w0, dtype=dtype)
        _norm(g, ("post", 0, cfg.n_stages + 1, u), w0, dtype)
    _conv(g, ("head", 0, 0), w0, cfg.num_classes, k=1, dtype=dtype)


def build_bionet(cfg: ArchConfig, seed: int = 0, dtype=None) -> CompGraph:
    """Unrolled BiO-Net; weights shared per (role, level), batch norms per iteration."""
    if cfg.fusion == "average" and cfg.upsample == "bilinear" and cfg.width_rule == "doubling":
        raise ConfigError("average fusion with bilinear upsampling needs width_rule='uniform'")
    dtype = dtype or default_dtype()
    L = cfg.L
    nodes = [Block("pre", 0, 0, 0)]
    g = CompGraph("bionet", cfg, bionet_topology(cfg), nodes, seed=seed)
    _add_pre_post(g, dtype)
    w = cfg.width
    for it in range(cfg.T):
        enc, dec = 2 * it + 1, 2 * it + 2
        for lv in range(L):
            nodes.append(Block("enc", lv, enc, it))
            seq_in = w(0) if lv == 0 else w(lv - 1)
            _conv(g, ("enc", lv, "a"), seq_in, w(lv), dtype=dtype)
            fused = 2 * w(lv) if cfg.fusion == "concat" else w(lv)
            _conv(g, ("enc", lv, "b"), fused, w(lv), dtype=dtype)
            _norm(g, ("enc", lv, enc, "a"), w(lv), dtype)
            _norm(g, ("enc", lv, enc, "b"), w(lv), dtype)
        nodes.append(Block("bridge", L, enc, it))
        _conv(g, ("bridge", L, "a"), w(L - 1), w(L), dtype=dtype)
        _conv(g, ("bridge", L, "b"), w(L), w(L), dtype=dtype)
        _norm(g, ("bridge", L, enc, "a"), w(L), dtype)
        _norm(g, ("bridge", L, enc, "b"), w(L), dtype)
        for lv in range(L - 1, -1, -1):
            nodes.append(Block("dec", lv, dec, it))
            if cfg.upsample == "transpose":
                _conv(g, ("dec", lv, "up"), w(lv + 1), w(lv), k=2, transposed=True, dtype=dtype)
                up_ch = w(lv)
            else:
                up_ch = w(lv + 1)
            fused = w(lv) + up_ch if cfg.fusion == "concat" else w(lv)
            if cfg.fusion == "average" and up_ch != w(lv):
                raise ConfigError("average fusion needs equal stream widths")
            _conv(g, ("dec", lv, "a"), fused, w(lv), dtype=dtype)
            _conv(g, ("dec", lv, "b"), w(lv), w(lv), dtype=dtype)
            _norm(g, ("dec", lv, dec, "a"), w(lv), dtype)
            _norm(g, ("dec", lv, dec, "b"), w(lv), dtype)
    nodes.append(Block("post", 0, cfg.n_stages + 1, cfg.T))
    return g


def instantiate_subnet(supernet_cfg: ArchConfig, topo: Topology, seed: int = 0, dtype=None,
                       source: CompGraph | None = None) -> CompGraph:
    """Sub-network of the SuperNet keeping only ``topo``'s edges.

    Blocks with no path to the head are removed together with their weights.
    With ``source`` given, surviving blocks reuse that graph's parameter
    objects instead of fresh initialisations.
    """
    cfg = supernet_config(supernet_cfg)
    tc = topo.config
    if (tc.T, tc.L) != (cfg.T, cfg.L):
        raise TopologyError(f"topology is for T={tc.T}, L={tc.L}; SuperNet has T={cfg.T}, L={cfg.L}")
    for e in topo.edges:
        _validate_edge(e, cfg)
    topo = Topology(cfg, topo.edges, topo.name)
    alive = liveness(cfg, topo)
    dtype = dtype or default_dtype()
    nodes = [Block("pre", 0, 0, 0)]
    g = CompGraph("bionetpp", cfg, topo, nodes, alive=alive, seed=seed)
    if source is not None:
        g.convs = {k: v for k, v in source.convs.items()}
        g.norms = {k: v for k, v in source.norms.items()}
    _add_pre_post(g, dtype)
    w = cfg.width(0)
    used_convs = {("pre", 0, u) for u in range(3)} | {("post", 0, u) for u in range(2)} | {("head", 0, 0)}
    used_norms = {("pre", 0, 0, u) for u in range(3)} | {("post", 0, cfg.n_stages + 1, u) for u in range(2)}
    for s in range(1, cfg.n_stages + 1):
        role = "enc" if s % 2 == 1 else "dec"
        levels = range(cfg.L + 1) if s % 2 == 1 else range(cfg.L, -1, -1)
        for lv in levels:
            live = alive[(s, lv)]
            nodes.append(Block(role, lv, s, (s - 1) // 2, alive=live))
            if not live:
                continue
            for u in ("a", "b"):
                _conv(g, (role, lv, u), w, w, dtype=dtype)
                _norm(g, (role, lv, s, u), w, dtype)
                used_convs.add((role, lv, u))
                used_norms.add((role, lv, s, u))
    nodes.append(Block("post", 0, cfg.n_stages + 1, cfg.T))
    g.convs = {k: v for k, v in g.convs.items() if k in used_convs}
    g.norms = {k: v for k, v in g.norms.items() if k in used_norms}
    return g


def build_bionet_pp(cfg: ArchConfig, seed: int = 0, dtype=None) -> CompGraph:
    cfg = supernet_config(cfg)
    return instantiate_subnet(cfg, dense_topology(cfg), seed=seed, dtype=dtype)


def backward_fusion_sites(g: CompGraph) -> int:
    """Fusion sites fed, directly or through the same level's encoder, by backward skips.

    Counts encoder and decoder fusions at iterations >= 2 on the W_back deepest
    levels, i.e. 2 * W_back * (T - 1) for BiO-Net.
    """
    cfg = g.config
    lo = cfg.L - cfg.W_back
    return sum(1 for b in g.nodes
               if b.role in ("enc", "dec") and b.iteration >= 1 and lo <= b.level < cfg.L and b.alive)


# -- execution ----------------------------------------------------------------

@dataclass
class ForwardHooks:
    """Optional instrumentation of a real forward pass."""

    zero_backward_skips: bool = False
    activations: dict | None = None  # (iteration, level) -> mean encoder output
    stage_forwards: list | None = None  # appended stage index per executed stage


class Runner:
    """Executes graph primitives on real tensors."""

    def __init__(self, training: bool, hooks: ForwardHooks | None = None):
        self.training = training
        self.hooks = hooks or ForwardHooks()

    @contextlib.contextmanager
    def block(self, label):
        yield

    def conv_unit(self, x, conv, bn):
        return nn.conv_unit(x, conv, bn, self.training)

    def conv(self, x, conv):
        return nn.conv2d(x, conv)

    def up_transpose(self, x, conv):
        return nn.conv_transpose2d(x, conv, stride=2)

    def pool(self, x):
        return nn.max_pool2d(x)

    def resize(self, x, h, w):
        return nn.bilinear_resize(x, h, w)

    def fuse(self, parts, mode):
        return nn.fuse(parts, mode)

    def skip_mean(self, parts):
        k = len(parts)
        return nn.weighted_sum(parts, [1.0 / k] * k)

    def zeros_like(self, x):
        return Tensor(np.zeros_like(x.data))

    @staticmethod
    def spatial(x):
        return x.shape[2], x.shape[3]

    def note_activation(self, it, lv, x):
        if self.hooks.activations is not None:
            self.hooks.activations[(it, lv)] = float(x.data.mean())

    def note_stage(self, s):
        if self.hooks.stage_forwards is not None:
            self.hooks.stage_forwards.append(s)


def _check_input(cfg: ArchConfig, shape) -> None:
    if len(shape) != 4:
        raise ShapeError(f"expected B x C x H x W input, got {shape}")
    if shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {shape[1]} channels, config expects {cfg.in_channels}")
    div = 2 ** cfg.L
    if shape[2] % div or shape[3] % div:
        raise ShapeError(f"spatial size {shape[2]}x{shape[3]} not divisible by 2^L = {div}")


def run_pre(g: CompGraph, x, R) -> object:
    h = x
    with R.block(("pre", 0, 0)):
        for u in range(3):
            h = R.conv_unit(h, g.convs[("pre", 0, u)], g.norms[("pre", 0, 0, u)])
    return h


def run_post(g: CompGraph, h, R) -> object:
    S = g.config.n_stages
    with R.block(("post", 0, S + 1)):
        for u in range(2):
            h = R.conv_unit(h, g.convs[("post", 0, u)], g.norms[("post", 0, S + 1, u)])
        return R.conv(h, g.convs[("head", 0, 0)])


def _run_bionet(g: CompGraph, x, R) -> object:
    cfg = g.config
    L = cfg.L
    seq = run_pre(g, x, R)
    back = [None] * L
    for it in range(cfg.T):
        enc, dec = 2 * it + 1, 2 * it + 2
        R.note_stage(enc)
        skips = []
        for lv in range(L):
            with R.block(("enc", lv, enc)):
                a = R.conv_unit(seq, g.convs[("enc", lv, "a")], g.norms[("enc", lv, enc, "a")])
                if it > 0 and lv >= L - cfg.W_back:
                    b = R.zeros_like(a) if R.hooks.zero_backward_skips else back[lv]
                else:
                    b = a  # first iteration: duplicate the block's own features
                f = R.fuse([a, b], cfg.fusion)
                f = R.conv_unit(f, g.convs[("enc", lv, "b")], g.norms[("enc", lv, enc, "b")])
                R.note_activation(it, lv, f)
            skips.append(f)
            seq = R.pool(f)
        with R.block(("bridge", L, enc)):
            h = R.conv_unit(seq, g.convs[("bridge", L, "a")], g.norms[("bridge", L, enc, "a")])
            h = R.conv_unit(h, g.convs[("bridge", L, "b")], g.norms[("bridge", L, enc, "b")])
        R.note_stage(dec)
        for lv in range(L - 1, -1, -1):
            with R.block(("dec", lv, dec)):
                if cfg.upsample == "transpose":
                    up = R.up_transpose(h, g.convs[("dec", lv, "up")])
                else:
                    hh, ww = R.spatial(skips[lv])
                    up = R.resize(h, hh, ww)
                f = R.fuse([skips[lv], up], cfg.fusion)
                f = R.conv_unit(f, g.convs[("dec", lv, "a")], g.norms[("dec", lv, dec, "a")])
                f = R.conv_unit(f, g.convs[("dec", lv, "b")], g.norms[("dec", lv, dec, "b")])
            back[lv] = f
            h = f
        seq = h
    return run_post(g, seq, R)


def level_size(full_hw, level: int) -> tuple[int, int]:
    return full_hw[0] >> level, full_hw[1] >> level


def run_stage(g: CompGraph, R, s: int, prev, full_hw, *, pre_out=None,
              incoming: dict | None = None, alive: dict | None = None,
              phi: Callable | None = None) -> list:
    """Forward one extraction stage of the SuperNet family.

    ``prev`` holds the L+1 outputs of stage ``s - 1`` (None for pruned blocks).
    With ``phi`` set, every block of stage >= 2 receives ``phi(s, level,
    streams)`` over all resized outputs of the previous stage instead of the
    edge-defined mean.
    """
    cfg = g.config
    L = cfg.L
    incoming = g.topology.incoming() if incoming is None else incoming
    alive = g.alive if alive is None else alive
    enc = s % 2 == 1
    role = "enc" if enc else "dec"
    outs: list = [None] * (L + 1)
    R.note_stage(s)
    for lv in (range(L + 1) if enc else range(L, -1, -1)):
        if not alive.get((s, lv), False):
            continue
        hh, ww = level_size(full_hw, lv)
        with R.block((role, lv, s)):
            if enc:
                seq = pre_out if (s == 1 and lv == 0) else (R.pool(outs[lv - 1]) if lv > 0 else None)
            else:
                seq = R.resize(outs[lv + 1], hh, ww) if lv < L else None
            skip = None
            if s > 1:
                if phi is not None:
                    skip = phi(s, lv, [R.resize(prev[j], hh, ww) for j in range(L + 1)])
                else:
                    srcs = incoming.get((s, lv), ())
                    if srcs:
                        skip = R.skip_mean([R.resize(prev[j], hh, ww) for j in srcs])
            parts = [p for p in (seq, skip) if p is not None]
            if not parts:
                raise TopologyError(f"block (stage {s}, level {lv}) has no input")
            h = R.fuse(parts, "average")
            h = R.conv_unit(h, g.convs[(role, lv, "a")], g.norms[(role, lv, s, "a")])
            h = R.conv_unit(h, g.convs[(role, lv, "b")], g.norms[(role, lv, s, "b")])
            if enc:
                R.note_activation((s - 1) // 2, lv, h)
        outs[lv] = h
    return outs


def _run_bionetpp(g: CompGraph, x, R, phi=None) -> object:
    cfg = g.config
    full = R.spatial(x)
    pre = run_pre(g, x, R)
    outs = None
    for s in range(1, cfg.n_stages + 1):
        outs = run_stage(g, R, s, outs, full, pre_out=pre, phi=phi)
    return run_post(g, outs[0], R)


def execute(g: CompGraph, x, R, phi=None):
    if g.kind == "bionet":
        return _run_bionet(g, x, R)
    return _run_bionetpp(g, x, R, phi=phi)


def forward(g: CompGraph, batch, training: bool = False, hooks: ForwardHooks | None = None) -> Tensor:
    """Logits of shape B x K x H x W; one head output regardless of T."""
    batch = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    _check_input(g.config, batch.shape)
    if g.kind != "bionet" and hooks is not None and hooks.zero_backward_skips:
        raise ConfigError("zero_backward_skips applies to BiO-Net only")
    return execute(g, batch, Runner(training, hooks))
