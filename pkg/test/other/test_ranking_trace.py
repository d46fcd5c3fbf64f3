#!/usr/bin/env python3
"""
SUPERNET RANKING TRACE

Trains a small supernet on the reverse task, trains five architectures of
increasing capacity on their own with the same schedule, and checks that the
supernet's validation losses rank them in the same direction as the
stand-alone losses.
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parents[2] / 'src'))

import tensorcore as tc
from corpus import make_batches, make_synthetic
from searchspace import SearchSpace, manual_gene
from supernet import Supernet, estimate_fitness, rank_correlation
from trainer import TrainSchedule, train

SPACE = SearchSpace(
    embed_dim_choices=(8, 16),
    encoder_layer_choices=(1, 2),
    decoder_layer_choices=(1, 2),
    qkv_dim_choices=(8, 16),
    head_choices=(2,),
    arbitrary_attn_choices=(-1, 1),
    ffn_dim_choices=(8, 16, 32),
    max_experts_per_layer=2,
)


def test_ranking_trace():
    print("\n" + "=" * 120)
    print(" " * 42 + "SUPERNET RANKING TRACE")
    print("=" * 120)

    tc.set_precision('float64')
    train_corpus, valid_corpus = make_synthetic('reverse', 10, 4, 300, seed=4).split(60, seed=4)
    valid = make_batches(valid_corpus, 40)
    sched = TrainSchedule(total_steps=300, warmup_steps=50, lr_min=1e-5, lr_peak=3e-3, batch_tokens=40,
                          checkpoint_every=0, log_every=100, seed=4)

    net = Supernet(SPACE, 10, 6, seed=4)
    train(net, train_corpus, sched)

    genes = [
        manual_gene(SPACE, '1', '1', embed_dim=8, width=8),
        manual_gene(SPACE, '1', '1', embed_dim=8, width=32),
        manual_gene(SPACE, '1-1', '1', embed_dim=16, width=16),
        manual_gene(SPACE, '2-1', '1-2', embed_dim=16, width=32),
        manual_gene(SPACE, '2-2', '2-2', embed_dim=16, width=32),
    ]
    standalone = []
    for gene in genes:
        single = Supernet.for_gene(gene, 10, 6, seed=4)
        train(single, train_corpus, sched, gene=gene, label='standalone')
        standalone.append(estimate_fitness(single, gene, valid))

    rho = rank_correlation(net, genes, valid, standalone)
    for gene, loss in zip(genes, standalone):
        print(f"  {gene.describe():60s} supernet {estimate_fitness(net, gene, valid):.4f}  stand-alone {loss:.4f}")
    print(f"\nSpearman rho: {rho:.3f}")
    assert rho > 0, rho

    print("\n" + "=" * 120)
    print("TRACE COMPLETE")
    print("=" * 120)


if __name__ == "__main__":
    test_ranking_trace()
