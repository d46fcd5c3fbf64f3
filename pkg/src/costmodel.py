"""
Analytical parameter and FLOPs accounting for genes

Conventions:
  - Parameters exclude token embeddings, positional tables and the output
    vocabulary projection. Active parameters count dense modules plus one
    expert per MoE layer (mean width for the mean figure, max width for the
    worst case); sparsity uses the mean.
  - One multiply-accumulate = 2 FLOPs. Softmax costs 5, layernorm 8 and relu 1
    per element; other elementwise work is free.
  - FLOPs are for translating one sentence: the encoder runs once over
    src_len tokens, the decoder runs tgt_len incremental steps with cached
    keys/values. Cross-attention keys/values are projected once per sentence,
    and the encoder's final layernorm runs once per distinct attention span.
  - The output vocabulary projection is excluded unless asked for.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Tuple

import numpy as np

import tensorcore as tc
from moemodel import EMBEDDING_PARAMS, MoeTransformer, greedy_decode, parameter_shapes, routed_indices
from searchspace import Gene
from utils import read_yaml, write_yaml

logger = logging.getLogger(__name__)

DEFAULT_SRC_LEN = 30
DEFAULT_TGT_LEN = 30


@dataclass
class CostReport:
    total_params: int
    active_params_mean: float
    active_params_worst: int
    sparsity_pct: float
    flops: float
    latency_ms: Optional[float] = None
    assumptions: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'CostReport':
        return cls(**data)


# ============================================================================
# PARAMETERS
# ============================================================================

def _moe_param_counts(d: int, widths) -> Tuple[int, float, int]:
    e = len(widths)
    router = e * d if e > 1 else 0
    total = router + sum(2 * d * h for h in widths)
    mean = router + 2 * d * float(np.mean(widths))
    worst = router + 2 * d * max(widths)
    return total, mean, worst


def count_params(gene: Gene) -> Tuple[int, float, int]:
    """
    Returns:
        (total, active_mean, active_worst), embeddings excluded
    """
    d_enc, d_dec, q = gene.embed_dim_enc, gene.embed_dim_dec, gene.qkv_dim
    dense = 0
    total_moe, mean_moe, worst_moe = 0, 0.0, 0

    for l in range(gene.num_enc_layers):
        dense += 4 * d_enc * q + 2 * 2 * d_enc
        t, m, w = _moe_param_counts(d_enc, gene.enc_expert_ffn_dims[l])
        total_moe, mean_moe, worst_moe = total_moe + t, mean_moe + m, worst_moe + w
    dense += 2 * d_enc

    for l in range(gene.num_dec_layers):
        dense += 4 * d_dec * q + 2 * d_dec * q + 2 * d_enc * q + 3 * 2 * d_dec
        t, m, w = _moe_param_counts(d_dec, gene.dec_expert_ffn_dims[l])
        total_moe, mean_moe, worst_moe = total_moe + t, mean_moe + m, worst_moe + w
    dense += 2 * d_dec

    return dense + total_moe, dense + mean_moe, dense + worst_moe


def manifest_param_count(gene: Gene, vocab_size: int = 8, max_positions: int = 8) -> int:
    """Sum of the instantiated model's parameter manifest, embeddings excluded"""
    shapes = parameter_shapes(gene, vocab_size, max_positions)
    return int(sum(np.prod(shape, dtype=np.int64) for name, shape in shapes.items()
                   if name not in EMBEDDING_PARAMS))


def sparsity(gene: Gene) -> float:
    total, active_mean, _ = count_params(gene)
    return 100.0 * (total - active_mean) / total


# ============================================================================
# FLOPS
# ============================================================================

def _attention_flops(q: int, heads: int, queries: int, keys: int) -> int:
    """Scores, softmax and context for one block, projections excluded"""
    return 2 * queries * q * keys + 5 * heads * queries * keys + 2 * queries * keys * q


def _expert_flops(d: int, widths, tokens: int, routed: Optional[np.ndarray]):
    """Expert FFN cost: routed widths when known, else every token at the mean width"""
    e = len(widths)
    router = (2 * d * e + 5 * e) * tokens if e > 1 else 0
    if routed is not None:
        chosen = np.asarray(widths)[routed]
        return router + int(np.sum(4 * d * chosen + chosen))
    mean_width = float(np.mean(widths))
    return router + tokens * (4 * d * mean_width + mean_width)


def count_flops(gene: Gene, src_len: int = DEFAULT_SRC_LEN, tgt_len: int = DEFAULT_TGT_LEN,
                routed: Optional[Dict[Tuple[str, int], np.ndarray]] = None,
                include_output_proj: bool = False, vocab_size: Optional[int] = None) -> float:
    """
    FLOPs to translate one sentence of src_len tokens into tgt_len tokens

    Args:
        gene: architecture
        src_len, tgt_len: sentence lengths (>= 1)
        routed: per (side, layer) expert index of every token, in processing
            order; when given, tokens are billed at their routed expert's width
        include_output_proj: also bill the vocabulary projection per step
        vocab_size: required with include_output_proj

    Returns:
        FLOP count (float under mean-width billing)
    """
    if src_len < 1 or tgt_len < 1:
        raise ValueError(f"lengths must be >= 1, got {src_len}, {tgt_len}")
    s, t = src_len, tgt_len
    d_enc, d_dec, q = gene.embed_dim_enc, gene.embed_dim_dec, gene.qkv_dim
    routed = routed or {}
    flops = 0

    for l in range(gene.num_enc_layers):
        flops += 2 * 8 * s * d_enc
        flops += 3 * 2 * s * d_enc * q + 2 * s * q * d_enc
        flops += _attention_flops(q, gene.enc_heads[l], s, s)
        flops += _expert_flops(d_enc, gene.enc_expert_ffn_dims[l], s, routed.get(('enc', l)))

    spans = {1 if k == -1 else k for k in gene.dec_arbitrary_attn}
    flops += len(spans) * 8 * s * d_enc

    cache_total = t * (t + 1) // 2
    for l in range(gene.num_dec_layers):
        flops += 2 * 2 * s * d_enc * q
        per_step = 3 * 8 * d_dec
        per_step += 3 * 2 * d_dec * q + 2 * q * d_dec
        per_step += 2 * d_dec * q + 2 * q * d_dec
        flops += t * per_step
        flops += 2 * cache_total * q + 5 * gene.dec_self_heads[l] * cache_total + 2 * cache_total * q
        flops += t * _attention_flops(q, gene.dec_cross_heads[l], 1, s)
        flops += _expert_flops(d_dec, gene.dec_expert_ffn_dims[l], t, routed.get(('dec', l)))
    flops += t * 8 * d_dec

    if include_output_proj:
        if vocab_size is None:
            raise ValueError("include_output_proj needs vocab_size")
        flops += t * 2 * d_dec * vocab_size
    return flops


def measure_flops(model: MoeTransformer, src_ids, tgt_len: int):
    """
    Instrumented FLOPs of one greedy translation

    Returns:
        (FlopCounter, routed expert indices per (side, layer))
    """
    model.trace = []
    try:
        with tc.count_flops() as counter:
            greedy_decode(model, np.asarray(src_ids).reshape(1, -1), tgt_len, stop_at_eos=False)
        routed = routed_indices(model.trace)
    finally:
        model.trace = None
    return counter, routed


# ============================================================================
# REPORTS
# ============================================================================

def cost_report(gene: Gene, src_len: int = DEFAULT_SRC_LEN, tgt_len: int = DEFAULT_TGT_LEN,
                latency_ms: Optional[float] = None, include_output_proj: bool = False,
                vocab_size: Optional[int] = None) -> CostReport:
    total, active_mean, active_worst = count_params(gene)
    return CostReport(
        total_params=int(total),
        active_params_mean=float(active_mean),
        active_params_worst=int(active_worst),
        sparsity_pct=100.0 * (total - active_mean) / total,
        flops=float(count_flops(gene, src_len, tgt_len, include_output_proj=include_output_proj,
                                vocab_size=vocab_size)),
        latency_ms=latency_ms,
        assumptions={
            'src_len': src_len,
            'tgt_len': tgt_len,
            'include_output_proj': include_output_proj,
            'expert_billing': 'mean_width',
            'embeddings_excluded': True,
        },
    )


def save_report(path, report: CostReport):
    return write_yaml(path, report.to_dict())


def load_report(path) -> CostReport:
    return CostReport.from_dict(read_yaml(path))


def format_row(name: str, report: CostReport, reference_flops: Optional[float] = None) -> str:
    """Comparison row: params (M), active (M), sparsity, GFLOPs (reduction vs reference), latency"""
    gflops = report.flops / 1e9
    reduction = f" ({reference_flops / report.flops:.1f}x)" if reference_flops else ""
    latency = f"{report.latency_ms:.1f}ms" if report.latency_ms is not None else "-"
    return (f"{name:<28} {report.total_params / 1e6:8.1f}M {report.active_params_mean / 1e6:8.1f}M "
            f"{report.sparsity_pct:6.1f}% {gflops:7.3f}G{reduction} {latency:>10}")


def transformer_big_gene() -> Gene:
    """Dense 6+6 layer, 1024-wide reference translation model"""
    layers = 6
    return Gene(
        embed_dim_enc=1024,
        embed_dim_dec=1024,
        num_enc_layers=layers,
        num_dec_layers=layers,
        qkv_dim=1024,
        enc_heads=(16,) * layers,
        dec_self_heads=(16,) * layers,
        dec_cross_heads=(16,) * layers,
        dec_arbitrary_attn=(-1,) * layers,
        enc_experts=(1,) * layers,
        dec_experts=(1,) * layers,
        enc_expert_ffn_dims=((4096,),) * layers,
        dec_expert_ffn_dims=((4096,),) * layers,
    )
