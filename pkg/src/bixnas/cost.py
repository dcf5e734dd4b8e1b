"""Parameter and MAC accounting plus search-space and search-time formulas.

MACs are traced by replaying the network's own forward code on shapes.

Counting conventions (per image, batch size 1):

* convolution: out * in * k * k * H_out * W_out (bias adds excluded)
* transpose convolution: in * out * k * k * H_in * W_in
* batch norm: 2 per element; ReLU, max pooling, concatenation: 0
* bilinear resize: 4 per output element, 0 when the size is unchanged
* averaging or weighted sum of k streams: k per output element
"""

from __future__ import annotations

import contextlib
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchConfig, CompGraph, ForwardHooks, build_bionet, build_bionet_pp, execute
from .errors import DomainError, ShapeError

CONVENTIONS = {
    "conv": "out*in*k*k*H_out*W_out",
    "conv_transpose": "in*out*k*k*H_in*W_in",
    "batch_norm": "2 per element",
    "relu/maxpool/concat": "0",
    "bilinear_resize": "4 per output element (0 if same size)",
    "average/weighted_sum": "k per output element for k streams",
}


@dataclass
class BlockCost:
    label: str
    params: int
    macs: int


@dataclass
class CostReport:
    params: int
    macs: int
    input_shape: tuple
    breakdown: list[BlockCost] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "macs": self.macs,
            "input_shape": list(self.input_shape),
            "conventions": CONVENTIONS,
            "breakdown": [{"block": b.label, "params": b.params, "macs": b.macs} for b in self.breakdown],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        rows = [f"{'block':<24}{'params':>14}{'MACs':>18}"]
        rows += [f"{b.label:<24}{b.params:>14,}{b.macs:>18,}" for b in self.breakdown]
        rows.append(f"{'total':<24}{self.params:>14,}{self.macs:>18,}")
        rows.append(f"input {'x'.join(map(str, self.input_shape))}")
        return "\n".join(rows)


def _numel(shape) -> int:
    return int(np.prod(shape))


class TraceRunner:
    """Shape-only stand-in for the tensor runner; accumulates MACs and params per block."""

    def __init__(self):
        self.hooks = ForwardHooks()
        self.order: list[str] = []
        self.macs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self._label = "other"
        self._seen: set[int] = set()

    @contextlib.contextmanager
    def block(self, label):
        role, level, stage = label
        prev, self._label = self._label, f"{role}{level}@s{stage}"
        if self._label not in self.macs:
            self.order.append(self._label)
            self.macs[self._label] = 0
            self.params[self._label] = 0
        try:
            yield
        finally:
            self._label = prev

    def _add(self, macs: int, owners=()) -> None:
        self.macs.setdefault(self._label, 0)
        self.params.setdefault(self._label, 0)
        if self._label not in self.order:
            self.order.append(self._label)
        self.macs[self._label] += int(macs)
        for o in owners:
            if id(o) not in self._seen:
                self._seen.add(id(o))
                self.params[self._label] += o.n_params

    def _conv_shape(self, x, conv):
        b, c, h, w = x
        if c != conv.in_ch:
            raise ShapeError(f"conv expects {conv.in_ch} channels, got {c}")
        k, s, p = conv.kernel, conv.stride, conv.padding
        if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
            raise ShapeError(f"extent {h}x{w} incompatible with kernel {k}, stride {s}")
        return (b, conv.out_ch, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def conv(self, x, conv):
        y = self._conv_shape(x, conv)
        self._add(conv.out_ch * conv.in_ch * conv.kernel ** 2 * _numel(y[2:]) * y[0], [conv])
        return y

    def conv_unit(self, x, conv, bn):
        y = self.conv(x, conv)
        self._add(2 * _numel(y), [bn])
        return y

    def up_transpose(self, x, conv):
        b, c, h, w = x
        if c != conv.in_ch:
            raise ShapeError(f"transpose conv expects {conv.in_ch} channels, got {c}")
        self._add(conv.in_ch * conv.out_ch * conv.kernel ** 2 * h * w * b, [conv])
        return (b, conv.out_ch, h * 2, w * 2)

    def pool(self, x):
        b, c, h, w = x
        if h % 2 or w % 2:
            raise ShapeError(f"cannot pool odd extent {h}x{w}")
        return (b, c, h // 2, w // 2)

    def resize(self, x, h, w):
        y = (x[0], x[1], h, w)
        if (h, w) != tuple(x[2:]):
            self._add(4 * _numel(y))
        return y

    def fuse(self, parts, mode):
        if len(parts) == 1:
            return parts[0]
        if mode == "concat":
            if len({(p[0], p[2], p[3]) for p in parts}) != 1:
                raise ShapeError(f"concat shape mismatch {parts}")
            return (parts[0][0], sum(p[1] for p in parts), parts[0][2], parts[0][3])
        if len(set(parts)) != 1:
            raise ShapeError(f"average shape mismatch {parts}")
        self._add(len(parts) * _numel(parts[0]))
        return parts[0]

    def skip_mean(self, parts):
        if len(set(parts)) != 1:
            raise ShapeError(f"skip shape mismatch {parts}")
        self._add(len(parts) * _numel(parts[0]))
        return parts[0]

    def zeros_like(self, x):
        return x

    @staticmethod
    def spatial(x):
        return x[2], x[3]

    def note_activation(self, *_):
        pass

    def note_stage(self, _):
        pass


def _input_shape(g: CompGraph, input_shape) -> tuple:
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 2:
        shape = (1, g.config.in_channels) + shape
    elif len(shape) == 3:
        shape = (1,) + shape
    if len(shape) != 4 or shape[1] != g.config.in_channels:
        raise ShapeError(f"bad input shape {input_shape}")
    div = 2 ** g.config.L
    if shape[2] % div or shape[3] % div:
        raise ShapeError(f"spatial size {shape[2]}x{shape[3]} not divisible by {div}")
    return shape


def cost_report(g: CompGraph, input_shape=(512, 512)) -> CostReport:
    """Per-block parameter and MAC breakdown at ``input_shape`` (H x W, C x H x W or B x C x H x W)."""
    shape = _input_shape(g, input_shape)
    tr = TraceRunner()
    execute(g, shape, tr)
    rows = [BlockCost(lbl, tr.params[lbl], tr.macs[lbl]) for lbl in tr.order]
    return CostReport(sum(r.params for r in rows), sum(r.macs for r in rows), shape, rows)


def count_macs(g: CompGraph, input_shape=(512, 512)) -> int:
    return cost_report(g, input_shape).macs


def count_params(g: CompGraph) -> int:
    """Analytic count: out*in*k*k + out per conv, 2*C per batch norm; shared weights once."""
    convs = sum(c.out_ch * c.in_ch * c.kernel ** 2 + c.out_ch for c in g.convs.values())
    norms = sum(2 * b.channels for b in g.norms.values())
    return convs + norms


def count_params_arrays(g: CompGraph) -> int:
    """Independent route: product of raw array extents over every parameter tensor."""
    return sum(math.prod(t.data.shape) for t in g.parameters())


def conv_param_count(g: CompGraph) -> int:
    return sum(math.prod(c.weight.shape) + math.prod(c.bias.shape) for c in g.convs.values())


def search_space_size(N: int, L: int, T: int) -> int:
    """sum_{k=1}^{N-2} C(N, k) ** (L * (2T - 1)), exactly."""
    if N < 3:
        raise DomainError(f"N must be >= 3, got {N}")
    if L < 1 or T < 1:
        raise DomainError("L and T must be >= 1")
    exponent = L * (2 * T - 1)
    return sum(math.comb(N, k) ** exponent for k in range(1, N - 1))


def conventional_search_cost(T, P_size, I_F, I_B):
    """Cost of training every population member separately for one step."""
    return 2 * T * P_size * (I_F + I_B)


def progressive_search_cost(T, P_size, I_F, I_B):
    """One progressive step: shared head forwards plus per-member tails, one backward."""
    return I_B + sum(t * I_F + (2 * T - t) * I_F * P_size for t in range(1, 2 * T))


# Reference complexity at the canonical configuration (base width 32, L=4, T=3).
REFERENCE = {"bionet_params": 14_990_000, "bionet_pp_params": 430_000, "ratio": 34.86}


def params_by_role(rep: CostReport) -> dict:
    """Parameters grouped by block role (pre, enc, bridge, dec, post)."""
    out: dict = {}
    for b in rep.breakdown:
        role = re.match(r"[a-z]+", b.label).group(0)
        out[role] = out.get(role, 0) + b.params
    return out


def reference_comparison(cfg: ArchConfig | None = None, tolerance: float = 0.15) -> dict:
    """Itemised deviation of the BiO-Net / BiO-Net++ parameter counts from the reference figures."""
    cfg = cfg or ArchConfig()
    reps = {"bionet": cost_report(build_bionet(cfg), (64, 64)),
            "bionet_pp": cost_report(build_bionet_pp(cfg), (64, 64))}
    ratio = reps["bionet"].params / reps["bionet_pp"].params
    items = []
    for key in ("bionet", "bionet_pp"):
        ref = REFERENCE[f"{key}_params"]
        got = reps[key].params
        items.append({"item": f"{key}_params", "measured": got, "reference": ref,
                      "deviation": (got - ref) / ref, "by_role": params_by_role(reps[key])})
    rel = (ratio - REFERENCE["ratio"]) / REFERENCE["ratio"]
    items.append({"item": "ratio", "measured": ratio, "reference": REFERENCE["ratio"], "deviation": rel})
    return {"config": {"base_width": cfg.base_width, "L": cfg.L, "T": cfg.T}, "tolerance": tolerance,
            "ratio_within_tolerance": abs(rel) <= tolerance, "items": items}
