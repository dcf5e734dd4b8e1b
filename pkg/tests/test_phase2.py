import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bixnas.arch import ArchConfig, SkipEdge, Topology, build_bionet_pp, instantiate_subnet, supernet_config
from bixnas.cost import count_macs
from bixnas.data import generate_dataset
from bixnas.errors import NumericError, SearchError
from bixnas.phase2 import (Architecture, ParetoPoint, Phase2Config, candidate_sets, check_skip_fairness, compose,
                           dominates, evaluate_step, pareto_front, progressive_search, random_search,
                           sample_population, sample_subset, write_fairness_trace, write_search_log)

CFG = supernet_config(ArchConfig(T=2, L=3, base_width=4, num_classes=3))


def candidate_topology(cfg=CFG):
    """Two candidate sources per searching block: its own level and the next one."""
    L = cfg.L
    edges = [SkipEdge(t, j, t + 1, lv) for t in range(1, cfg.n_stages) for lv in range(L + 1)
             for j in (lv, (lv + 1) % (L + 1))]
    return Topology(cfg, tuple(edges), "phase1")


def brute_front(points):
    return {p for p in points if not any(dominates(q, p) for q in points)}


@pytest.fixture(scope="module")
def data():
    tr = generate_dataset(8, 16, 16, K=3, noise_level=0.1, seed=0)
    va = generate_dataset(4, 16, 16, K=3, noise_level=0.1, seed=0, start=8)
    return tr, va


def small_search_cfg(**kw):
    base = dict(samples=2, cap=2, epochs_per_iter=1, batch_size=4, lr=1e-2, recalib_batches=1,
                mac_input=(16, 16), seed=0)
    base.update(kw)
    return Phase2Config(**base)


class TestSampling:
    def test_single_candidate_is_deterministic(self, rng):
        pop = sample_population({0: (2,), 1: (0,)}, 5, [Architecture()], rng)
        assert len({c.subsets for c in pop}) == 1

    def test_samples_per_parent(self, rng):
        pop = sample_population({0: (0, 1, 2)}, 3, [Architecture(), Architecture()], rng)
        assert [c.parent for c in pop] == [0, 0, 0, 1, 1, 1]

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=5, unique=True), st.integers(0, 999))
    def test_subset_bounds(self, cands, seed):
        sub = sample_subset(tuple(sorted(cands)), np.random.default_rng(seed))
        assert 1 <= len(sub) <= len(cands) and set(sub) <= set(cands)

    def test_uniform_over_nonempty_subsets(self):
        rng = np.random.default_rng(0)
        n = 10_000
        counts = {}
        for _ in range(n):
            s = sample_subset((0, 1, 2), rng)
            counts[s] = counts.get(s, 0) + 1
        assert len(counts) == 7
        p = 1 / 7
        se = np.sqrt(n * p * (1 - p))
        assert all(abs(c - n * p) <= 3 * se for c in counts.values())

    def test_empty_candidates(self, rng):
        with pytest.raises(SearchError):
            sample_population({}, 2, [Architecture()], rng)
        with pytest.raises(SearchError):
            sample_population({0: ()}, 2, [Architecture()], rng)

    def test_candidate_sets_and_compose(self):
        cand = candidate_topology()
        C = candidate_sets(cand, 2)
        assert C == {0: (0, 1), 1: (1, 2), 2: (2, 3), 3: (0, 3)}
        topo = compose(CFG, cand, {2: {0: (1,), 3: (0, 3)}})
        assert {(e.from_level, e.to_level) for e in topo.pair_edges(2)} == {(1, 0), (0, 3), (3, 3)}
        assert topo.pair_edges(1) == cand.pair_edges(1)


class TestPareto:
    def test_example(self):
        pts = [ParetoPoint("a", 0.70, 30), ParetoPoint("b", 0.65, 28), ParetoPoint("c", 0.71, 35),
               ParetoPoint("d", 0.60, 40)]
        assert [p.cid for p in pareto_front(pts, cap=None)] == ["c", "a", "b"]
        assert [p.cid for p in pareto_front(pts)] == ["c", "a", "b"]
        assert [p.cid for p in pareto_front(pts, cap=2)] == ["c", "a"]

    def test_trivial_cases(self):
        assert pareto_front([]) == []
        p = ParetoPoint("x", 0.5, 10)
        assert pareto_front([p]) == [p]
        pts = [ParetoPoint("best", 0.9, 1), ParetoPoint("q", 0.8, 2), ParetoPoint("r", 0.9, 5)]
        assert pareto_front(pts) == [pts[0]]

    def test_exact_ties_retained(self):
        pts = [ParetoPoint("a", 0.5, 10), ParetoPoint("b", 0.5, 10), ParetoPoint("c", 0.4, 10)]
        assert {p.cid for p in pareto_front(pts, cap=None)} == {"a", "b"}

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.8]), st.integers(0, 6)), max_size=40))
    def test_matches_brute_force(self, raw):
        pts = [ParetoPoint(str(i), iou, macs) for i, (iou, macs) in enumerate(raw)]
        front = pareto_front(pts, cap=None)
        assert set(front) == brute_front(pts)
        assert [p.iou for p in front] == sorted((p.iou for p in front), reverse=True)


class TestEvaluateStep:
    def _setup(self, data, t=2):
        g = build_bionet_pp(CFG, seed=0)
        cand = candidate_topology()
        tails = [compose(CFG, cand, {t: {lv: (c[0],) if k % 2 else c for lv, c in candidate_sets(cand, t).items()}})
                 for k in range(3)]
        return g, cand, tails, data[0].images[:4], data[0].masks[:4]

    def test_identical_tails_average(self, data):
        g, cand, tails, x, y = self._setup(data)
        one = evaluate_step(build_bionet_pp(CFG, seed=0), 2, cand, [tails[0]], x, y)
        many = evaluate_step(g, 2, cand, [tails[0]] * 3, x, y)
        assert many.tail_losses == [one.loss] * 3
        assert many.loss == pytest.approx(one.loss, rel=1e-12)

    def test_gradient_is_mean_of_per_tail_tapes(self, data):
        g, cand, tails, x, y = self._setup(data)
        grads = []
        for tail in tails:
            g.zero_grad()
            evaluate_step(g, 2, cand, [tail], x, y)
            grads.append([None if p.grad is None else p.grad.copy() for p in g.parameters()])
        g.zero_grad()
        evaluate_step(g, 2, cand, tails, x, y)
        for i, p in enumerate(g.parameters()):
            parts = [gr[i] for gr in grads if gr[i] is not None]
            if not parts:
                assert p.grad is None
                continue
            np.testing.assert_allclose(p.grad, sum(parts) / len(tails), rtol=1e-10, atol=1e-13)

    @pytest.mark.parametrize("t", [1, 2, 3])
    def test_stage_forward_count(self, data, t):
        g, cand, _, x, y = self._setup(data)
        tails = [compose(CFG, cand, {t: candidate_sets(cand, t)})] * 3
        counter = []
        evaluate_step(g, t, cand, tails, x, y, counter)
        assert len(counter) == t + (CFG.n_stages - t) * 3

    def test_digests_shared(self, data):
        g, cand, tails, x, y = self._setup(data)
        step = evaluate_step(g, 2, cand, tails, x, y)
        assert check_skip_fairness([step.digests])
        assert all(step.digests[0][k] == d[k] for d in step.digests for k in d if k in step.digests[0])

    def test_non_finite_tail_is_named(self, data):
        g, cand, tails, x, y = self._setup(data, t=1)
        g.convs[("dec", 0, "a")].weight.data[:] = np.inf
        with np.errstate(invalid="ignore", over="ignore"), pytest.raises(NumericError, match="tail 0 of stage pair 1"):
            evaluate_step(g, 1, cand, tails, x, y)


class TestFairness:
    def test_vacuous_and_violation(self):
        assert check_skip_fairness([])
        assert check_skip_fairness([[{0: "a"}, {0: "a", 1: "b"}]])
        assert not check_skip_fairness([[{0: "a"}], [{0: "a"}, {0: "c"}]])


class TestProgressiveSearch:
    def test_run(self, data, tmp_path):
        cand = candidate_topology()
        res = progressive_search(CFG, cand, *data, small_search_cfg())
        assert res.iterations == CFG.n_pairs
        assert set(res.topology.edges) <= set(cand.edges)
        for t in range(1, CFG.n_stages):
            assert len(res.topology.pair_edges(t)) <= len(cand.pair_edges(t))
        assert res.fair
        for row in res.stage_forwards:
            t = row["pair"]
            # population = samples (2) per retained parent, one parent at the deepest pair
            allowed = {t + (CFG.n_stages - t) * 2 * r for r in ((1,) if t == CFG.n_pairs else (1, 2))}
            assert row["count"] in allowed
        macs = lambda topo: count_macs(instantiate_subnet(CFG, topo), (16, 16))
        assert macs(res.topology) <= macs(cand) <= count_macs(build_bionet_pp(CFG), (16, 16))

        log = write_search_log(res.log, tmp_path / "log.csv").read_text().splitlines()
        assert log[0] == "stage_pair,candidate,IoU,MACs,retained"
        assert {int(r.split(",")[0]) for r in log[1:]} == {1, 2, 3}
        trace = json.loads(write_fairness_trace(res.trace, tmp_path / "f.json").read_text())
        assert trace["fair"] is True and len(trace["steps"]) == len(res.trace)

    def test_deterministic(self, data):
        a = progressive_search(CFG, candidate_topology(), *data, small_search_cfg(seed=3))
        b = progressive_search(CFG, candidate_topology(), *data, small_search_cfg(seed=3))
        assert a.topology.to_text() == b.topology.to_text() and a.log == b.log

    def test_independent_baseline_breaks_fairness(self, data):
        res = progressive_search(CFG, candidate_topology(), *data, small_search_cfg(mode="independent"))
        assert not res.fair

    def test_bad_mode(self, data):
        with pytest.raises(SearchError):
            progressive_search(CFG, candidate_topology(), *data, small_search_cfg(mode="greedy"))

    def test_random_baseline(self, data):
        cand = candidate_topology()
        res = random_search(CFG, cand, *data, small_search_cfg(), n_candidates=3, epochs=1)
        assert set(res.topology.edges) <= set(cand.edges)
        assert len(res.log) == 3 and any(r["retained"] for r in res.log)
