"""
Test Suite for parameter and FLOPs accounting

Checks the analytical FLOPs count against reference models and against the
instrumented kernel, parameter counts against the model's manifest, the
monotonicity of sparsity, parameters and FLOPs, and the cost report file
format.
"""

import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

import tensorcore as tc
from costmodel import (count_flops, count_params, cost_report, format_row, load_report, manifest_param_count,
                       measure_flops, save_report, sparsity, transformer_big_gene)
from moemodel import MoeTransformer, init_weights
from searchspace import Gene, SearchSpace, manual_gene, max_gene, sample_gene, wmt_space

tc.set_precision('float64')


def searched_gene() -> Gene:
    """512-wide gene with experts in the middle encoder layers and the first decoder layer"""
    space = wmt_space(max_experts=4)
    return manual_gene(space, '1-1-4-4-4-1', '4-1-1-1', embed_dim=512, heads=8, width=3072)


TINY_SPACE = SearchSpace(
    embed_dim_choices=(8, 12),
    encoder_layer_choices=(1, 2),
    decoder_layer_choices=(1, 2),
    qkv_dim_choices=(8, 12),
    head_choices=(2, 4),
    arbitrary_attn_choices=(-1, 1),
    ffn_dim_choices=(0, 6, 16),
    max_experts_per_layer=3,
    identity_experts_enabled=True,
)


def test_reference_model_flops():
    """Test the dense 1024-wide reference and the FLOPs ratio of a searched gene"""
    print("\n[TEST 1] Reference FLOPs...")

    big = count_flops(transformer_big_gene(), 30, 30)
    assert 10.4e9 <= big <= 10.8e9, big / 1e9

    searched = count_flops(searched_gene(), 30, 30)
    ratio = big / searched
    assert 2.6e9 <= searched <= 3.0e9, searched / 1e9
    assert 3.145 <= ratio <= 4.255, ratio

    dense_max = count_flops(max_gene(wmt_space(max_experts=1)), 30, 30)
    assert 4.1e9 <= dense_max <= 4.45e9, dense_max / 1e9

    print(f"[PASS] Reference {big / 1e9:.2f}G, searched {searched / 1e9:.2f}G, ratio {ratio:.2f}x")


def test_analytic_matches_instrumented():
    """Test the closed form equals the kernel's FLOP counter for routed translations"""
    print("\n[TEST 2] Analytic vs Instrumented FLOPs...")

    rng = np.random.default_rng(11)
    vocab = 12
    for trial in range(20):
        gene = sample_gene(TINY_SPACE, rng)
        src_len, tgt_len = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        model = MoeTransformer(gene, init_weights(gene, vocab, 8, seed=trial))
        src = rng.integers(4, vocab, size=src_len)
        counter, routed = measure_flops(model, src, tgt_len)
        analytic = count_flops(gene, src_len, tgt_len, routed=routed)
        assert counter.total == analytic, (gene.describe(), counter.total, analytic)

    print("[PASS] Closed form agrees with the counter")


def test_mean_width_billing():
    """Test mean-width billing equals routed billing when a layer's experts share a width"""
    print("\n[TEST 3] Mean-Width Billing...")

    gene = manual_gene(TINY_SPACE, '3-1', '2', width=16)
    routed = {('enc', 0): np.array([0, 2, 1, 1]), ('enc', 1): np.zeros(4, dtype=int),
              ('dec', 0): np.array([1, 0, 1])}
    assert count_flops(gene, 4, 3) == count_flops(gene, 4, 3, routed=routed)

    with_proj = count_flops(gene, 4, 3, include_output_proj=True, vocab_size=100)
    assert with_proj - count_flops(gene, 4, 3) == 3 * 2 * gene.embed_dim_dec * 100

    for bad in (lambda: count_flops(gene, 0, 3), lambda: count_flops(gene, 4, 3, include_output_proj=True)):
        try:
            bad()
            assert False, "should raise ValueError"
        except ValueError:
            pass

    print("[PASS] Billing modes agree")


def test_param_count_matches_manifest():
    """Test the closed-form total equals the instantiated parameter manifest"""
    print("\n[TEST 4] Parameter Count vs Manifest...")

    rng = np.random.default_rng(12)
    for space in (TINY_SPACE, wmt_space(max_experts=6)):
        for _ in range(20):
            gene = sample_gene(space, rng)
            total, mean, worst = count_params(gene)
            assert total == manifest_param_count(gene)
            assert mean <= worst <= total

    print("[PASS] Totals agree with the manifest")


def test_sparsity():
    """Test dense genes have no sparsity and expert layers add some"""
    print("\n[TEST 5] Sparsity...")

    assert sparsity(transformer_big_gene()) == 0.0
    moe = searched_gene()
    total, mean, worst = count_params(moe)
    assert mean == worst
    assert 0.0 < sparsity(moe) < 100.0

    # four layers with 4 experts of 3072; three of them are inactive per token
    assert total - mean == 4 * 3 * 2 * 512 * 3072

    print(f"[PASS] Searched gene sparsity {sparsity(moe):.1f}%")


def test_report_round_trip_and_row():
    """Test cost reports persist as YAML and render a comparison row"""
    print("\n[TEST 6] Cost Report...")

    report = cost_report(searched_gene(), latency_ms=12.5)
    assert report.assumptions['src_len'] == 30 and report.assumptions['embeddings_excluded']
    with tempfile.TemporaryDirectory() as tmp:
        path = save_report(Path(tmp) / 'gene.cost.yaml', report)
        loaded = load_report(path)
    assert loaded == report

    row = format_row('searched', report, reference_flops=count_flops(transformer_big_gene()))
    assert row.startswith('searched')
    assert 'x)' in row and '12.5ms' in row

    print("[PASS] Report round trip and row formatting")


def test_sparsity_and_params_grow_with_experts():
    """Test sparsity rises with the expert count and every added expert adds parameters"""
    print("\n[TEST 7] Expert Count Monotonicity...")

    space = wmt_space(max_experts=8)
    values = []
    for e in range(1, 9):
        pattern = '-'.join([str(e)] * 6)
        values.append(sparsity(manual_gene(space, pattern, pattern, embed_dim=512, heads=8, width=2048)))
    assert values[0] == 0.0
    assert all(later > earlier for earlier, later in zip(values, values[1:])), values

    rng = np.random.default_rng(13)
    for space in (TINY_SPACE, wmt_space(max_experts=6)):
        for _ in range(20):
            gene = sample_gene(space, rng)
            layer = int(rng.integers(gene.num_enc_layers))
            width = int(rng.choice(space.ffn_dim_choices))
            widths = list(gene.enc_expert_ffn_dims)
            widths[layer] = widths[layer] + (width,)
            counts = list(gene.enc_experts)
            counts[layer] += 1
            grown = replace(gene, enc_experts=tuple(counts), enc_expert_ffn_dims=tuple(widths))
            assert count_params(grown)[0] > count_params(gene)[0], (gene.describe(), width)

    print(f"[PASS] Sparsity {values[1]:.1f}% -> {values[-1]:.1f}% from 2 to 8 experts")


def test_flops_scale_with_length_and_width():
    """Test FLOPs rise with target length and the FFN share is linear in width"""
    print("\n[TEST 8] FLOPs Monotonicity and Width Scaling...")

    rng = np.random.default_rng(14)
    for _ in range(10):
        gene = sample_gene(wmt_space(max_experts=4), rng)
        by_length = [count_flops(gene, 30, t) for t in range(1, 41)]
        assert all(later > earlier for earlier, later in zip(by_length, by_length[1:]))

    space = wmt_space(max_experts=1)
    layers = '1-1-1-1-1-1'
    flops = {w: count_flops(manual_gene(space, layers, layers, embed_dim=512, heads=8, width=w), 30, 30)
             for w in (1024, 2048, 4096)}
    step = flops[2048] - flops[1024]
    assert flops[4096] - flops[2048] == 2 * step
    # 6 encoder layers x 30 tokens + 6 decoder layers x 30 steps, 4d+1 FLOPs per hidden unit
    assert step == (6 * 30 + 6 * 30) * (4 * 512 + 1) * 1024

    print(f"[PASS] Doubling the FFN from 2048 to 4096 adds {(flops[4096] - flops[2048]) / 1e9:.2f}G")


if __name__ == "__main__":
    print("=" * 70)
    print("COST MODEL TEST SUITE")
    print("=" * 70)

    tests = [
        test_reference_model_flops,
        test_analytic_matches_instrumented,
        test_mean_width_billing,
        test_param_count_matches_manifest,
        test_sparsity,
        test_report_round_trip_and_row,
        test_sparsity_and_params_grow_with_experts,
        test_flops_scale_with_length_and_width,
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
