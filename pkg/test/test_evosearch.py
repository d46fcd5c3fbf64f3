"""
Test Suite for the evolutionary search

Covers the mutation and crossover operators, Pareto filtering, constraint
admission, the search loop on a synthetic FLOPs-target objective, and a
small search over a real supernet.
"""

import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

import tensorcore as tc
from corpus import make_batches, make_synthetic
from costmodel import count_flops
from evosearch import (EvoConfig, ConstraintChecker, crossover, evolve, export_front, mutate, pareto_front,
                       random_search, random_search_supernet, search_supernet)
from searchspace import SearchSpace, load_gene, manual_gene, max_gene, sample_gene, validate_gene, wmt_space
from supernet import Supernet, estimate_fitness, one_point_space
from utils import ConfigError, InfeasibleConstraintError, read_jsonl

tc.set_precision('float64')

SPACE = wmt_space(max_experts=4)
MAX_FLOPS = count_flops(max_gene(SPACE), 30, 30)


def flops_of(gene):
    return count_flops(gene, 30, 30)


def small_config(**overrides):
    settings = {'num_iterations': 6, 'num_population': 30, 'num_parents': 10, 'num_mutations': 20,
                'num_crossover': 20, 'mutate_prob': 0.3, 'flops': 0.6 * MAX_FLOPS, 'seed': 5}
    settings.update(overrides)
    return EvoConfig(**settings)


def test_mutation_frequency_and_closure():
    """Test each position changes with probability p*(1-1/k) and mutants stay in the space"""
    print("\n[TEST 1] Mutation...")

    rng = np.random.default_rng(0)
    gene = sample_gene(SPACE, rng)
    assert mutate(gene, SPACE, 0.0, rng) == gene

    trials = 10000
    changed = sum(mutate(gene, SPACE, 0.3, rng).embed_dim_enc != gene.embed_dim_enc for _ in range(trials))
    assert 0.13 <= changed / trials <= 0.17, changed / trials

    for mode in ('fract', 'std'):
        space = replace(SPACE, expert_width_mode=mode)
        g = sample_gene(space, rng)
        for _ in range(300):
            g = mutate(g, space, 0.5, rng)
            assert validate_gene(space, g) == [], validate_gene(space, g)

    pinned = replace(SPACE, fixed_enc_experts=(1, 2, 1, 2, 1, 2), fixed_dec_experts=(2, 1, 2, 1, 2, 1))
    g = sample_gene(pinned, rng)
    for _ in range(100):
        g = mutate(g, pinned, 1.0, rng)
        assert g.enc_experts == (1, 2, 1, 2, 1, 2)
        assert g.dec_experts == (2, 1, 2, 1, 2, 1)[:g.num_dec_layers]

    print(f"[PASS] Embed mutation rate {changed / trials:.3f}")


def test_crossover_mixing():
    """Test positions come from either parent evenly and expert blocks travel together"""
    print("\n[TEST 2] Crossover...")

    rng = np.random.default_rng(1)
    a = replace(sample_gene(SPACE, rng), embed_dim_enc=512)
    b = replace(sample_gene(SPACE, rng), embed_dim_enc=640)

    trials = 10000
    from_a = sum(crossover(a, b, rng).embed_dim_enc == 512 for _ in range(trials))
    assert 0.47 <= from_a / trials <= 0.53, from_a / trials

    for _ in range(300):
        x, y = sample_gene(SPACE, rng), sample_gene(SPACE, rng)
        child = crossover(x, y, rng, space=SPACE)
        assert validate_gene(SPACE, child) == []
        for l in range(child.num_dec_layers):
            block = (child.dec_experts[l], child.dec_expert_ffn_dims[l])
            options = [(p.dec_experts[l], p.dec_expert_ffn_dims[l]) for p in (x, y) if l < p.num_dec_layers]
            assert block in options

    broken = replace(a, embed_dim_enc=768)
    try:
        crossover(broken, b, rng, space=SPACE)
        assert False, "invalid parent should raise"
    except ConfigError:
        pass

    print(f"[PASS] Parent A share {from_a / trials:.3f}")


def test_pareto_front():
    """Test the front on a hand example and against brute force"""
    print("\n[TEST 3] Pareto Front...")

    assert pareto_front([(1, 2), (2, 1), (2, 2)]) == [0, 1]
    assert pareto_front([(1, 1), (1, 1), (3, 0)]) == [0, 1, 2]
    assert pareto_front([]) == []

    rng = np.random.default_rng(2)
    points = [tuple(p) for p in rng.integers(0, 15, size=(200, 2))]
    expected = [i for i, (f, c) in enumerate(points)
                if not any(g <= f and d <= c and (g < f or d < c) for g, d in points)]
    assert pareto_front(points) == expected

    print("[PASS] Front matches brute force")


def test_config_validation():
    """Test search settings are checked up front"""
    print("\n[TEST 4] Search Config...")

    for bad in ({'num_parents': 40}, {'mutate_prob': 1.5}, {'flops': None}, {'workers': 0}):
        try:
            small_config(**bad)
            assert False, f"{bad} should raise"
        except ConfigError:
            pass
    assert small_config(flops=None, unconstrained=True).flops is None
    assert EvoConfig.from_config({'flops': 1e9, 'not_a_field': 3}).flops == 1e9

    try:
        ConstraintChecker(small_config(latency_ms=50.0))
        assert False, "latency bound without a harness should raise"
    except ConfigError:
        pass

    print("[PASS] Invalid settings rejected")


def test_search_reaches_flops_target():
    """Test the search at its default settings approaches a FLOPs target while honoring the bound"""
    print("\n[TEST 5] Synthetic FLOPs-Target Search...")

    target = 0.4 * MAX_FLOPS
    cfg = EvoConfig(num_iterations=15, num_population=125, num_parents=25, num_mutations=50, mutate_prob=0.3,
                    num_crossover=50, flops=0.6 * MAX_FLOPS, seed=5)
    assert cfg == replace(EvoConfig(flops=0.6 * MAX_FLOPS), seed=5)
    with tempfile.TemporaryDirectory() as tmp:
        history_path = Path(tmp) / 'history.jsonl'
        result = evolve(SPACE, cfg, lambda g: abs(flops_of(g) - target) / target, history_path=history_path)
        lines = read_jsonl(history_path)

    assert abs(flops_of(result.best_gene) - target) / target <= 0.05, result.best_fitness
    assert len(lines) == cfg.num_iterations == len(result.history)

    for record in result.history:
        assert all(f <= cfg.flops for f in record['flops'])
        assert len(record['population']) == len(record['fitness'])
    best = [record['best_parent_fitness'] for record in result.history]
    assert all(later <= earlier for earlier, later in zip(best, best[1:]))

    costs = [(e.fitness, e.cost.flops) for e in result.front]
    assert pareto_front(costs) == list(range(len(costs)))
    assert [e.fitness for e in result.front] == sorted(e.fitness for e in result.front)
    assert result.front[0].fitness == result.best_fitness

    print(f"[PASS] Best gene within {result.best_fitness:.2%} of the target")


def test_search_is_deterministic():
    """Test equal seeds give equal searches, with or without worker threads"""
    print("\n[TEST 6] Determinism...")

    objective = lambda g: abs(flops_of(g) - 0.3 * MAX_FLOPS)
    first = evolve(SPACE, small_config(num_iterations=3), objective)
    second = evolve(SPACE, small_config(num_iterations=3, workers=4), objective)
    assert first.best_gene == second.best_gene
    assert [r['population'] for r in first.history] == [r['population'] for r in second.history]

    print("[PASS] Searches repeat exactly")


def test_latency_constraint_and_infeasible_bound():
    """Test latency admission, gold re-measurement of the front and an infeasible bound"""
    print("\n[TEST 7] Latency Constraint and Infeasibility...")

    fake_latency = lambda g: flops_of(g) / 1e8
    bound = 0.5 * MAX_FLOPS / 1e8
    cfg = small_config(flops=None, latency_ms=bound, num_iterations=3)
    result = evolve(SPACE, cfg, lambda g: -flops_of(g), latency_fn=fake_latency,
                    gold_latency_fn=lambda g: fake_latency(g) + 1.0)
    for record in result.history:
        assert all(ms is not None and ms <= bound for ms in record['latency_ms'])
    for entry in result.front:
        assert entry.measured_latency_ms == fake_latency(entry.gene) + 1.0
        assert entry.cost.latency_ms == entry.measured_latency_ms

    try:
        evolve(SPACE, small_config(flops=1.0), lambda g: 0.0)
        assert False, "impossible bound should raise"
    except InfeasibleConstraintError:
        pass

    pick = random_search(SPACE, small_config(), np.random.default_rng(3), fitness_fn=flops_of, samples=5)
    assert flops_of(pick) <= small_config().flops

    print("[PASS] Constraints enforced")


def test_one_point_space_search():
    """Test a singleton space returns its only gene, even one mixing widths and heads"""
    print("\n[TEST 8] One-Point Space Search...")

    base = manual_gene(SPACE, '1-2-1-2-1-2', '2-1', embed_dim=512, heads=4, width=3072)
    gene = replace(base, enc_heads=(4, 8, 4, 4, 8, 4),
                   enc_expert_ffn_dims=((3072,), (1024, 3072), (2048,), (2048, 1024), (3072,), (1024, 1024)))
    space = one_point_space(gene)
    only = max_gene(space)
    assert only == gene

    rng = np.random.default_rng(8)
    for _ in range(50):
        assert mutate(gene, space, 1.0, rng) == gene
        assert crossover(gene, gene, rng, space=space) == gene
    drifted = replace(gene, enc_heads=(8, 8, 4, 4, 8, 4))
    assert validate_gene(space, drifted) != []

    result = evolve(space, small_config(flops=None, unconstrained=True, num_iterations=2), lambda g: 1.0)
    assert result.best_gene == only
    assert [e.gene for e in result.front] == [only]

    print("[PASS] Singleton search is trivial")


def test_supernet_search_and_export():
    """Test small evolutionary and random searches over an untrained supernet and the exported front"""
    print("\n[TEST 9] Supernet Search and Export...")

    space = SearchSpace(
        embed_dim_choices=(8, 16),
        encoder_layer_choices=(1, 2),
        decoder_layer_choices=(1, 2),
        qkv_dim_choices=(8,),
        head_choices=(2,),
        arbitrary_attn_choices=(-1, 1),
        ffn_dim_choices=(8, 16),
        max_experts_per_layer=2,
    )
    corpus = make_synthetic('reverse', 10, 4, 16, seed=2)
    net = Supernet(space, 10, 6, seed=2)
    cfg = EvoConfig(num_iterations=2, num_population=6, num_parents=2, num_mutations=4, num_crossover=4,
                    unconstrained=True, seed=2, src_len=4, tgt_len=4)
    result = search_supernet(net, cfg, make_batches(corpus, 40))
    assert validate_gene(space, result.best_gene) == []
    assert np.isfinite(result.best_fitness)

    baseline = random_search_supernet(net, cfg, make_batches(corpus, 40), samples=3)
    assert validate_gene(space, baseline.best_gene) == []
    assert [e.gene for e in baseline.front] == [baseline.best_gene]
    assert baseline.best_fitness == estimate_fitness(net, baseline.best_gene, make_batches(corpus, 40))

    with tempfile.TemporaryDirectory() as tmp:
        out = export_front(result, Path(tmp) / 'pareto')
        gene_files = sorted(out.glob('*.gene.yaml'))
        assert len(gene_files) == len(result.front)
        assert gene_files[0].name.startswith('00_')
        assert load_gene(out / 'best_gene.yaml') == result.best_gene
        assert len(list(out.glob('*.cost.yaml'))) == len(result.front)

    print(f"[PASS] Front of {len(result.front)} exported")


if __name__ == "__main__":
    print("=" * 70)
    print("EVOLUTIONARY SEARCH TEST SUITE")
    print("=" * 70)

    tests = [
        test_mutation_frequency_and_closure,
        test_crossover_mixing,
        test_pareto_front,
        test_config_validation,
        test_search_reaches_flops_target,
        test_search_is_deterministic,
        test_latency_constraint_and_infeasible_bound,
        test_one_point_space_search,
        test_supernet_search_and_export,
    ]
    failed = 0
    for test in tests:
        try:
            test()
        except AssertionError as e:
            failed += 1
            print(f"[FAIL] {test.__name__}: {e}")

    print("\n" + "=" * 70)
    print(f"RESULTS: {len(tests) - failed}/{len(tests)} tests passed")
    print("=" * 70)
    sys.exit(1 if failed else 0)
