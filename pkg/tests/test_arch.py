import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bixnas import nn
from bixnas.arch import (ArchConfig, ForwardHooks, SkipEdge, Topology, backward_fusion_sites,
                         bionet_topology, build_bionet, build_bionet_pp, dense_topology, forward,
                         instantiate_subnet, liveness, parse_topology, supernet_config)
from bixnas.cost import conv_param_count, count_params
from bixnas.errors import ConfigError, ParseError, ShapeError, TopologyError
from bixnas.tensor import Tensor

SMALL = ArchConfig(T=2, L=2, base_width=4, num_classes=3)


def conv_p(i, o, k=3):
    return o * i * k * k + o


def bionet_param_formula(cfg):
    """Closed-form BiO-Net parameter count (concat fusion, transposed upsampling)."""
    w = cfg.width
    total = conv_p(cfg.in_channels, w(0)) + 2 * conv_p(w(0), w(0)) + 3 * 2 * w(0)
    total += 2 * conv_p(w(0), w(0)) + 2 * 2 * w(0) + conv_p(w(0), cfg.num_classes, 1)
    for lv in range(cfg.L):
        total += conv_p(w(max(lv - 1, 0)), w(lv)) + conv_p(2 * w(lv), w(lv))
        total += conv_p(w(lv + 1), w(lv), 2) + conv_p(2 * w(lv), w(lv)) + conv_p(w(lv), w(lv))
        total += cfg.T * 4 * 2 * w(lv)
    total += conv_p(w(cfg.L - 1), w(cfg.L)) + conv_p(w(cfg.L), w(cfg.L)) + cfg.T * 2 * 2 * w(cfg.L)
    return total


def reachability_liveness(cfg, topo):
    """Oracle: a block is alive iff a path of data edges leads from it to the head."""
    S, L = cfg.n_stages, cfg.L
    succ = {(s, lv): [] for s in range(1, S + 1) for lv in range(L + 1)}
    for s in range(1, S + 1):
        for lv in range(L + 1):
            nxt = lv + 1 if s % 2 == 1 else lv - 1
            if 0 <= nxt <= L:
                succ[(s, lv)].append((s, nxt))
    for e in topo.edges:
        succ[(e.from_stage, e.from_level)].append((e.to_stage, e.to_level))
    alive = {}

    def reaches(node):
        if node not in alive:
            alive[node] = False
            alive[node] = node == (S, 0) or any(reaches(n) for n in succ[node])
        return alive[node]

    # stage order makes the graph acyclic apart from within-stage chains, which are monotone
    for node in sorted(succ, key=lambda n: (-n[0], n[1])):
        reaches(node)
    return alive


@st.composite
def edge_subsets(draw, cfg=SMALL):
    edges = dense_topology(supernet_config(cfg)).edges
    keep = draw(st.lists(st.booleans(), min_size=len(edges), max_size=len(edges)))
    return Topology(supernet_config(cfg), tuple(e for e, k in zip(edges, keep) if k))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"T": 0}, {"L": 0}, {"W_back": 5}, {"fusion": "max"},
                                    {"upsample": "nearest"}, {"num_classes": 1}, {"N_mult": 0.01}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            ArchConfig(**kw)

    def test_widths(self):
        cfg = ArchConfig(base_width=8, N_mult=0.5)
        assert [cfg.width(lv) for lv in range(5)] == [4, 8, 16, 32, 64]
        assert {supernet_config(cfg).width(lv) for lv in range(5)} == {4}

    def test_average_bilinear_bionet_needs_uniform(self):
        with pytest.raises(ConfigError):
            build_bionet(ArchConfig(fusion="average", upsample="bilinear"))


class TestBioNet:
    def test_canonical_param_count(self):
        g = build_bionet(ArchConfig())
        assert count_params(g) == bionet_param_formula(ArchConfig()) == 8_607_714

    @pytest.mark.parametrize("T,L,base", [(1, 2, 4), (3, 3, 6), (2, 4, 2)])
    def test_param_formula(self, T, L, base):
        cfg = ArchConfig(T=T, L=L, base_width=base)
        assert count_params(build_bionet(cfg)) == bionet_param_formula(cfg)

    def test_conv_weights_shared_across_iterations(self):
        counts = {conv_param_count(build_bionet(ArchConfig(T=T, base_width=4))) for T in (1, 2, 3)}
        assert len(counts) == 1

    def test_topology_edge_counts(self):
        cfg = ArchConfig(T=3, L=4, W_back=2)
        topo = bionet_topology(cfg)
        assert len(topo.edges) == cfg.T * cfg.L + (cfg.T - 1) * cfg.W_back
        assert {e.from_level for e in topo.edges if e.direction == "backward"} == {2, 3}

    def test_backward_fusion_sites(self):
        assert backward_fusion_sites(build_bionet(ArchConfig(base_width=2))) == 16
        assert backward_fusion_sites(build_bionet(ArchConfig(T=1, base_width=2))) == 0

    def test_output_shape_independent_of_T(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        for T in (1, 3):
            assert forward(build_bionet(SMALL.replace(T=T)), x).shape == (2, 3, 8, 8)

    def test_input_checks(self, rng):
        g = build_bionet(SMALL)
        with pytest.raises(ShapeError):
            forward(g, rng.normal(size=(1, 3, 6, 8)))
        with pytest.raises(ShapeError):
            forward(g, rng.normal(size=(1, 1, 8, 8)))

    def test_zero_backward_skips_matches_hand_oracle(self, rng):
        g = build_bionet(SMALL, seed=3)
        x = rng.normal(size=(2, 3, 8, 8))
        c, n = g.convs, g.norms

        def unit(h, ck, nk):
            return nn.conv_unit(h, c[ck], n[nk], False)

        h = Tensor(x)
        for u in range(3):
            h = unit(h, ("pre", 0, u), ("pre", 0, 0, u))
        for it in range(2):
            enc, dec = 2 * it + 1, 2 * it + 2
            skips, seq = [], h
            for lv in range(2):
                a = unit(seq, ("enc", lv, "a"), ("enc", lv, enc, "a"))
                b = Tensor(np.zeros_like(a.data)) if it == 1 else a
                f = unit(nn.fuse([a, b], "concat"), ("enc", lv, "b"), ("enc", lv, enc, "b"))
                skips.append(f)
                seq = nn.max_pool2d(f)
            h = unit(seq, ("bridge", 2, "a"), ("bridge", 2, enc, "a"))
            h = unit(h, ("bridge", 2, "b"), ("bridge", 2, enc, "b"))
            for lv in (1, 0):
                up = nn.conv_transpose2d(h, c[("dec", lv, "up")])
                h = unit(nn.fuse([skips[lv], up], "concat"), ("dec", lv, "a"), ("dec", lv, dec, "a"))
                h = unit(h, ("dec", lv, "b"), ("dec", lv, dec, "b"))
        for u in range(2):
            h = unit(h, ("post", 0, u), ("post", 0, 5, u))
        ref = nn.conv2d(h, c[("head", 0, 0)]).data

        out = forward(g, x, hooks=ForwardHooks(zero_backward_skips=True)).data
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
        assert not np.allclose(forward(g, x).data, ref)

    def test_activation_hook_per_iteration(self, rng):
        acts = {}
        forward(build_bionet(SMALL), rng.normal(size=(1, 3, 8, 8)), hooks=ForwardHooks(activations=acts))
        assert set(acts) == {(it, lv) for it in range(2) for lv in range(2)}
        assert acts[(0, 1)] != acts[(1, 1)]

    def test_seeded_init(self):
        a, b, c = (build_bionet(SMALL, seed=s) for s in (1, 1, 2))
        for (_, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)
        assert any(not np.array_equal(pa.data, pc.data)
                   for pa, pc in zip(a.weight_parameters(), c.weight_parameters()))


class TestSuperNet:
    def test_canonical_param_count(self):
        assert count_params(build_bionet_pp(ArchConfig())) == 227_074

    def test_dense_edge_count(self):
        for T, L in [(1, 1), (2, 3), (3, 4)]:
            cfg = ArchConfig(T=T, L=L)
            assert len(dense_topology(cfg).edges) == (2 * T - 1) * (L + 1) ** 2

    def test_forced_config(self):
        g = build_bionet_pp(ArchConfig(fusion="concat", upsample="transpose"))
        assert (g.config.fusion, g.config.upsample, g.config.width_rule) == ("average", "bilinear", "uniform")

    def test_stage_hook_counts_every_stage(self, rng):
        stages = []
        forward(build_bionet_pp(SMALL), rng.normal(size=(1, 3, 8, 8)), hooks=ForwardHooks(stage_forwards=stages))
        assert stages == [1, 2, 3, 4]

    def test_zero_backward_hook_rejected(self, rng):
        with pytest.raises(ConfigError):
            forward(build_bionet_pp(SMALL), rng.normal(size=(1, 3, 8, 8)),
                    hooks=ForwardHooks(zero_backward_skips=True))

    def test_empty_topology_is_rejected(self):
        with pytest.raises(TopologyError):
            instantiate_subnet(SMALL, Topology(supernet_config(SMALL), ()))

    def test_subnet_shares_source_parameters(self):
        sup = build_bionet_pp(SMALL)
        topo = Topology(sup.config, tuple(e for e in sup.topology.edges if e.from_level == e.to_level))
        sub = instantiate_subnet(SMALL, topo, source=sup)
        assert all(sub.convs[k] is sup.convs[k] for k in sub.convs)
        assert count_params(sub) <= count_params(sup)

    def test_mismatched_topology(self):
        with pytest.raises(TopologyError):
            instantiate_subnet(SMALL, dense_topology(supernet_config(SMALL.replace(L=3))))

    @settings(max_examples=60)
    @given(edge_subsets())
    def test_liveness_matches_reachability(self, topo):
        try:
            alive = liveness(topo.config, topo)
        except TopologyError:
            # some live block must genuinely lack input
            ref = reachability_liveness(topo.config, topo)
            inc = topo.incoming()
            starved = [(s, lv) for (s, lv), ok in ref.items() if ok and not inc.get((s, lv))
                       and not ((lv > 0 or s == 1) if s % 2 == 1 else lv < topo.config.L)]
            assert starved
            return
        assert alive == reachability_liveness(topo.config, topo)

    @settings(max_examples=15)
    @given(edge_subsets(), st.integers(0, 3))
    def test_valid_subnets_run(self, topo, seed):
        try:
            g = instantiate_subnet(SMALL, topo, seed=seed)
        except TopologyError:
            return
        x = np.random.default_rng(seed).normal(size=(1, 3, 4, 4))
        out = forward(g, x)
        assert out.shape == (1, 3, 4, 4) and np.isfinite(out.data).all()
        dead = {(b.stage, b.level) for b in g.nodes if not b.alive}
        assert not any(k[0] in ("enc", "dec") and (k[2], k[1]) in dead for k in g.norms)


class TestTopologyFile:
    def test_round_trip_is_canonical(self, tmp_path):
        topo = bionet_topology(ArchConfig(T=2, L=3), name="rt")
        text = topo.to_text()
        back = parse_topology(text)
        assert back == topo and back.to_text() == text

    @given(edge_subsets())
    def test_round_trip_property(self, topo):
        assert parse_topology(topo.to_text()) == topo

    def test_edges_sorted_and_deduplicated(self):
        cfg = SMALL
        e1, e2 = SkipEdge(2, 1, 3, 0), SkipEdge(1, 0, 2, 0)
        assert Topology(cfg, (e1, e2, e1)).edges == (e2, e1)

    def test_non_adjacent_edge(self):
        with pytest.raises(TopologyError):
            Topology(SMALL, (SkipEdge(1, 0, 3, 0),))

    def test_wrong_direction(self):
        with pytest.raises(TopologyError):
            Topology(SMALL, (SkipEdge(1, 0, 2, 0, direction="backward"),))

    def test_parse_error_reports_line_and_field(self):
        lines = bionet_topology(SMALL).to_text().splitlines()
        lines[3] = re.sub(r'"to_level": \d+', '"to_level": "one"', lines[3])
        with pytest.raises(ParseError) as info:
            parse_topology("\n".join(lines))
        assert info.value.line == 4 and info.value.field == "edges[2].to_level"

    @pytest.mark.parametrize("text,field", [
        ("[1]", None),
        ('{"schema": 9, "name": "x", "config": {}, "edges": []}', "schema"),
        ('{"schema": 1, "name": "x", "config": {"colour": 1}, "edges": []}', "config"),
        ('{"schema": 1, "name": "x", "config": {}}', "edges"),
    ])
    def test_parse_errors(self, text, field):
        with pytest.raises(ParseError) as info:
            parse_topology(text)
        assert info.value.field == field

    def test_invalid_json_line(self):
        with pytest.raises(ParseError) as info:
            parse_topology('{"schema": 1,\n "name": }')
        assert info.value.line == 2
