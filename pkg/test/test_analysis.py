"""
Test Suite for architecture analysis

Reproduces expert-placement aggregates from hand-transcribed searched
architectures and checks the report files written for a Pareto directory.
"""

import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

import tempfile
from pathlib import Path

from analysis import (NOT_AVAILABLE, analyze, analyze_entries, baseline_table, decoder_latency_share,
                      encoder_expert_ratio, expert_count_distribution, fract_expert_stats,
                      mean_encoder_expert_ratio)
from costmodel import cost_report, save_report, transformer_big_gene
from searchspace import Gene, save_gene
from utils import ConfigError, write_jsonl


def build_gene(enc_widths, dec_widths) -> Gene:
    """512-wide gene from per-layer expert width lists"""
    return Gene(
        embed_dim_enc=512,
        embed_dim_dec=512,
        num_enc_layers=len(enc_widths),
        num_dec_layers=len(dec_widths),
        qkv_dim=512,
        enc_heads=(8,) * len(enc_widths),
        dec_self_heads=(8,) * len(dec_widths),
        dec_cross_heads=(8,) * len(dec_widths),
        dec_arbitrary_attn=(-1,) * len(dec_widths),
        enc_experts=tuple(len(w) for w in enc_widths),
        dec_experts=tuple(len(w) for w in dec_widths),
        enc_expert_ffn_dims=tuple(tuple(w) for w in enc_widths),
        dec_expert_ffn_dims=tuple(tuple(w) for w in dec_widths),
    )


def uniform(counts, widths):
    return [[w] * c for c, w in zip(counts, widths)]


STD_GENES = [
    build_gene(uniform((5, 1, 1, 1, 2, 1), (3072, 3072, 3072, 3072, 2048, 3072)), uniform((1, 1, 1, 1), (3072,) * 4)),
    build_gene(uniform((1, 4, 2, 6, 5, 5), (3072,) * 6), uniform((2, 1, 1, 3), (3072,) * 4)),
    build_gene(uniform((1, 1, 2, 1, 2, 1), (3072, 3072, 3072, 3072, 3072, 2048)), uniform((1, 1, 1, 2), (3072,) * 4)),
]

FRACT_GENES = [
    build_gene([[2048, 3072, 2048], [3072, 1024], [3072, 3072, 1024], [3072, 1024, 3072, 2048], [3072],
                [3072, 1024, 3072]],
               [[3072, 1024, 2048], [3072], [3072], [3072]]),
    build_gene([[2048, 1024, 2048, 1024, 1024, 3072], [2048, 2048], [3072, 3072, 2048], [3072, 3072, 2048, 3072],
                [3072, 1024, 1024, 2048], [2048, 3072, 3072, 2048, 2048]],
               [[3072, 3072], [3072], [3072, 3072, 3072, 2048], [3072, 2048]]),
    build_gene([[3072, 3072], [3072, 3072, 3072], [3072], [3072, 2048], [3072, 1024, 2048, 3072, 1024, 2048],
                [3072]],
               [[3072, 3072], [3072, 1024, 2048, 3072], [3072], [3072]]),
]


def searched_gene() -> Gene:
    return build_gene(uniform((1, 1, 4, 4, 4, 1), (3072,) * 6), uniform((4, 1, 1, 1), (3072,) * 4))


def test_encoder_expert_ratio():
    """Test the ratio on a single gene, dense genes and the aggregate over searched genes"""
    print("\n[TEST 1] Encoder Expert Ratio...")

    assert abs(encoder_expert_ratio(searched_gene()) - 15 / 22) < 1e-12
    assert encoder_expert_ratio(transformer_big_gene()) is None
    assert mean_encoder_expert_ratio([transformer_big_gene()]) is None

    aggregate = mean_encoder_expert_ratio(STD_GENES)
    assert abs(aggregate - 0.71) <= 0.02, aggregate
    assert mean_encoder_expert_ratio(STD_GENES + [transformer_big_gene()]) == aggregate

    print(f"[PASS] Searched gene 15/22, aggregate {aggregate:.3f}")


def test_fractional_expert_statistics():
    """Test expert-layer and mixed-width shares over the fractional-width genes"""
    print("\n[TEST 2] Fractional Expert Statistics...")

    stats = fract_expert_stats(FRACT_GENES)
    assert stats['layers'] == 30 and stats['expert_layers'] == 21
    assert abs(stats['expert_layer_share'] - 0.70) < 1e-12
    assert stats['mixed_width_share'] > 0.75
    assert abs(stats['mixed_width_share'] - 16 / 21) < 1e-12

    dense = fract_expert_stats([transformer_big_gene()])
    assert dense['expert_layer_share'] == 0.0 and dense['mixed_width_share'] is None

    print(f"[PASS] {stats['expert_layer_share']:.2f} expert layers, {stats['mixed_width_share']:.2f} mixed")


def test_expert_count_distribution():
    """Test per-layer expert-count percentages"""
    print("\n[TEST 3] Expert Count Distribution...")

    table = expert_count_distribution(STD_GENES)
    first = table[(table['side'] == 'enc') & (table['layer'] == 1)]
    assert first['experts'].tolist() == [1, 5]
    assert first['genes'].tolist() == [2, 1]
    assert abs(first['percent'].sum() - 100.0) < 1e-9

    for (side, layer), group in table.groupby(['side', 'layer']):
        assert abs(group['percent'].sum() - 100.0) < 1e-9, (side, layer)
    assert set(table['side']) == {'enc', 'dec'}
    assert table[table['side'] == 'dec']['layer'].max() == 4

    print(f"[PASS] {len(table)} distribution rows")


def test_decoder_latency_share():
    """Test full and encoder-only records pair up per gene"""
    print("\n[TEST 4] Decoder Latency Share...")

    records = [
        {'gene': 'a', 'spec': {'encoder_only': False}, 'truncated_mean': 10.0},
        {'gene': 'a', 'spec': {'encoder_only': True}, 'truncated_mean': 4.0},
        {'gene': 'b', 'spec': {'encoder_only': False}, 'truncated_mean': 8.0},
    ]
    table = decoder_latency_share(records)
    assert table['gene'].tolist() == ['a']
    assert abs(table['decoder_share'].iloc[0] - 0.6) < 1e-12

    print("[PASS] Only complete pairs are reported")


def test_baseline_table():
    """Test FLOPs reduction against the dense reference"""
    print("\n[TEST 5] Baseline Table...")

    table = baseline_table({'big': transformer_big_gene(), 'searched': searched_gene()}, reference='big')
    rows = table.set_index('name')
    assert rows.loc['big', 'flops_reduction'] == 1.0
    assert 3.145 <= rows.loc['searched', 'flops_reduction'] <= 4.255
    assert rows.loc['big', 'sparsity_pct'] == 0.0
    assert rows.loc['searched', 'sparsity_pct'] > 0.0

    try:
        baseline_table({'big': transformer_big_gene()}, reference='other')
        assert False, "unknown reference should raise"
    except ConfigError:
        pass

    print(f"[PASS] Searched gene {rows.loc['searched', 'flops_reduction']:.2f}x fewer FLOPs")


def test_analyze_directory():
    """Test a Pareto directory yields the text report, CSV tables and HTML figures"""
    print("\n[TEST 6] Directory Analysis...")

    with tempfile.TemporaryDirectory() as tmp:
        pareto = Path(tmp) / 'pareto'
        pareto.mkdir()
        for rank, gene in enumerate(STD_GENES):
            save_gene(pareto / f"{rank:02d}_std.gene.yaml", gene)
        save_report(pareto / "00_std.cost.yaml", cost_report(STD_GENES[0], latency_ms=5.0))
        write_jsonl(pareto / 'latency.jsonl', [
            {'gene': 'x', 'spec': {'encoder_only': False}, 'truncated_mean': 5.0},
            {'gene': 'x', 'spec': {'encoder_only': True}, 'truncated_mean': 3.0},
        ])

        report = analyze(pareto)
        out = pareto / 'analysis'
        for name in ('report.txt', 'genes.csv', 'decoder_layers_vs_flops.csv', 'expert_count_distribution.csv',
                     'decoder_latency_share.csv', 'decoder_flops.html', 'expert_distribution.html'):
            assert (out / name).exists(), name
        text = (out / 'report.txt').read_text()

    assert report.summary['genes'] == 3
    assert abs(report.summary['encoder_expert_ratio'] - 0.7051) < 1e-4
    assert abs(report.summary['decoder_latency_share'] - 0.4) < 1e-12
    assert report.tables['genes']['latency_ms'].iloc[0] == 5.0
    assert 'encoder_expert_ratio' in text and '== genes ==' in text

    print("[PASS] Report files written")


def test_dense_and_missing_inputs():
    """Test dense-only input reports N/A and empty inputs raise"""
    print("\n[TEST 7] Dense and Missing Inputs...")

    big = transformer_big_gene()
    report = analyze_entries([('big', big, cost_report(big))])
    assert report.summary['encoder_expert_ratio'] == NOT_AVAILABLE
    assert report.summary['note'] == "no MoE layers"
    assert report.tables['genes']['enc_expert_ratio'].iloc[0] == NOT_AVAILABLE

    with tempfile.TemporaryDirectory() as tmp:
        for target in (Path(tmp), Path(tmp) / 'missing'):
            try:
                analyze(target)
                assert False, "no genes should raise"
            except ConfigError:
                pass
    try:
        analyze_entries([])
        assert False, "empty entries should raise"
    except ConfigError:
        pass

    print("[PASS] Degenerate inputs handled")


if __name__ == "__main__":
    print("=" * 70)
    print("ANALYSIS TEST SUITE")
    print("=" * 70)

    tests = [
        test_encoder_expert_ratio,
        test_fractional_expert_statistics,
        test_expert_count_distribution,
        test_decoder_latency_share,
        test_baseline_table,
        test_analyze_directory,
        test_dense_and_missing_inputs,
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
