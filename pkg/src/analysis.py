"""
Architecture analysis of searched genes

Reads a Pareto directory (pairs of <name>.gene.yaml and <name>.cost.yaml, plus
an optional latency.jsonl) and reports where experts are placed, how decoder
depth relates to FLOPs, and how much translation time the decoder takes.
Tables are plain text and CSV; figures are self-contained plotly HTML.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from costmodel import CostReport, cost_report, load_report
from searchspace import Gene, gene_hash, load_gene
from utils import ConfigError, handle_errors, read_jsonl

logger = logging.getLogger(__name__)

NOT_AVAILABLE = "N/A"


@dataclass
class AnalysisReport:
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: Dict = field(default_factory=dict)
    figures: Dict[str, go.Figure] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for key, value in self.summary.items():
            lines.append(f"{key}: {value}")
        for name, table in self.tables.items():
            lines.append("")
            lines.append(f"== {name} ==")
            lines.append(table.to_string(index=False) if not table.empty else "(empty)")
        return "\n".join(lines)


# ============================================================================
# EXPERT PLACEMENT STATISTICS
# ============================================================================

def has_moe_layers(gene: Gene) -> bool:
    return any(e > 1 for e in gene.enc_experts + gene.dec_experts)


def encoder_expert_ratio(gene: Gene) -> Optional[float]:
    """Encoder experts / all experts; None for a dense gene (no MoE layer)"""
    if not has_moe_layers(gene):
        return None
    return sum(gene.enc_experts) / gene.total_experts


def mean_encoder_expert_ratio(genes: Sequence[Gene]) -> Optional[float]:
    ratios = [r for r in (encoder_expert_ratio(g) for g in genes) if r is not None]
    return float(np.mean(ratios)) if ratios else None


def fract_expert_stats(genes: Sequence[Gene]) -> Dict[str, Optional[float]]:
    """
    Share of layers holding >= 2 experts, and among those the share whose
    experts do not all have the same width
    """
    layers = [widths for g in genes for widths in g.enc_expert_ffn_dims + g.dec_expert_ffn_dims]
    expert_layers = [w for w in layers if len(w) >= 2]
    mixed = [w for w in expert_layers if len(set(w)) > 1]
    return {
        'layers': len(layers),
        'expert_layers': len(expert_layers),
        'expert_layer_share': len(expert_layers) / len(layers) if layers else None,
        'mixed_width_share': len(mixed) / len(expert_layers) if expert_layers else None,
    }


def expert_count_distribution(genes: Sequence[Gene]) -> pd.DataFrame:
    """Per (side, layer): percentage of genes placing each expert count there"""
    rows = []
    for side in ('enc', 'dec'):
        depth = max((len(getattr(g, f"{side}_experts")) for g in genes), default=0)
        for layer in range(depth):
            counts = [getattr(g, f"{side}_experts")[layer] for g in genes
                      if layer < len(getattr(g, f"{side}_experts"))]
            for experts, n in sorted(pd.Series(counts).value_counts().items()):
                rows.append({
                    'side': side,
                    'layer': layer + 1,
                    'experts': int(experts),
                    'genes': int(n),
                    'percent': 100.0 * n / len(counts),
                })
    return pd.DataFrame(rows, columns=['side', 'layer', 'experts', 'genes', 'percent'])


def decoder_flops_table(entries: Sequence[Tuple[str, Gene, CostReport]]) -> pd.DataFrame:
    """GFLOPs grouped by decoder depth"""
    df = pd.DataFrame([{'dec_layers': g.num_dec_layers, 'gflops': r.flops / 1e9} for _, g, r in entries])
    table = df.groupby('dec_layers')['gflops'].agg(['count', 'mean', 'min', 'max']).reset_index()
    return table.rename(columns={'count': 'genes', 'mean': 'gflops_mean', 'min': 'gflops_min', 'max': 'gflops_max'})


def decoder_latency_share(records: Sequence[Dict]) -> pd.DataFrame:
    """
    Decoder share per gene from latency log records

    A gene needs one full-translation record and one encoder-only record;
    the latest of each is used.
    """
    full, encoder = {}, {}
    for record in records:
        target = encoder if record.get('spec', {}).get('encoder_only') else full
        target[record['gene']] = record['truncated_mean']
    rows = []
    for gene, total in full.items():
        if gene in encoder and total > 0:
            rows.append({'gene': gene, 'total_ms': total, 'encoder_ms': encoder[gene],
                         'decoder_share': (total - encoder[gene]) / total})
    return pd.DataFrame(rows, columns=['gene', 'total_ms', 'encoder_ms', 'decoder_share'])


def gene_table(entries: Sequence[Tuple[str, Gene, CostReport]]) -> pd.DataFrame:
    rows = []
    for name, gene, report in entries:
        ratio = encoder_expert_ratio(gene)
        rows.append({
            'name': name,
            'hash': gene_hash(gene),
            'enc_experts': "-".join(map(str, gene.enc_experts)),
            'dec_experts': "-".join(map(str, gene.dec_experts)),
            'dec_layers': gene.num_dec_layers,
            'total_experts': gene.total_experts,
            'enc_expert_ratio': round(ratio, 4) if ratio is not None else NOT_AVAILABLE,
            'params_m': report.total_params / 1e6,
            'active_m': report.active_params_mean / 1e6,
            'sparsity_pct': report.sparsity_pct,
            'gflops': report.flops / 1e9,
            'latency_ms': report.latency_ms,
        })
    return pd.DataFrame(rows)


def baseline_table(genes: Dict[str, Gene], reference: Optional[str] = None, src_len: int = 30,
                   tgt_len: int = 30) -> pd.DataFrame:
    """
    Params, sparsity and FLOPs for named genes

    With a reference name, adds the FLOPs reduction of every row relative to it.
    """
    reports = {name: cost_report(gene, src_len, tgt_len) for name, gene in genes.items()}
    if reference is not None and reference not in reports:
        raise ConfigError(f"reference {reference!r} is not among {sorted(reports)}")
    rows = []
    for name, report in reports.items():
        row = {
            'name': name,
            'params_m': report.total_params / 1e6,
            'active_m': report.active_params_mean / 1e6,
            'sparsity_pct': report.sparsity_pct,
            'gflops': report.flops / 1e9,
        }
        if reference is not None:
            row['flops_reduction'] = reports[reference].flops / report.flops
        rows.append(row)
    return pd.DataFrame(rows)


# ============================================================================
# FIGURES
# ============================================================================

def plot_decoder_flops(entries: Sequence[Tuple[str, Gene, CostReport]]) -> go.Figure:
    """Scatter of decoder depth against GFLOPs, one point per gene"""
    df = pd.DataFrame([{'name': n, 'dec_layers': g.num_dec_layers, 'gflops': r.flops / 1e9}
                       for n, g, r in entries])
    fig = px.scatter(
        df,
        x='dec_layers',
        y='gflops',
        hover_data=['name'],
        title="Decoder Layers vs GFLOPs",
        labels={'dec_layers': 'Decoder Layers', 'gflops': 'GFLOPs'}
    )
    fig.update_layout(height=500)
    return fig


def plot_expert_distribution(distribution: pd.DataFrame) -> go.Figure:
    """Stacked bars of expert-count percentages per layer, encoder and decoder side by side"""
    df = distribution.copy()
    df['layer'] = df['side'].str.upper() + " " + df['layer'].astype(str)
    df['experts'] = df['experts'].astype(str)
    fig = px.bar(
        df,
        x='layer',
        y='percent',
        color='experts',
        title="Expert Count per Layer (% of genes)",
        labels={'layer': 'Layer', 'percent': 'Percent', 'experts': 'Experts'}
    )
    fig.update_layout(barmode='stack', height=500)
    return fig


def write_figure(fig: go.Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs=True, full_html=True)
    return path


# ============================================================================
# DIRECTORY ANALYSIS
# ============================================================================

def load_pareto_dir(pareto_dir) -> List[Tuple[str, Gene, CostReport]]:
    """
    Every <name>.gene.yaml with its <name>.cost.yaml; a missing cost file is
    recomputed analytically
    """
    pareto_dir = Path(pareto_dir)
    if not pareto_dir.is_dir():
        raise ConfigError(f"Pareto directory not found: {pareto_dir}")
    entries = []
    for gene_path in sorted(pareto_dir.glob('*.gene.yaml')):
        name = gene_path.name[:-len('.gene.yaml')]
        gene = load_gene(gene_path)
        cost_path = pareto_dir / f"{name}.cost.yaml"
        report = load_report(cost_path) if cost_path.exists() else cost_report(gene)
        entries.append((name, gene, report))
    if not entries:
        raise ConfigError(f"No *.gene.yaml files in {pareto_dir}")
    return entries


@handle_errors
def analyze_entries(entries: Sequence[Tuple[str, Gene, CostReport]],
                    latency_records: Optional[Sequence[Dict]] = None) -> AnalysisReport:
    if not entries:
        raise ConfigError("analysis needs at least one gene")
    genes = [g for _, g, _ in entries]
    report = AnalysisReport()

    ratio = mean_encoder_expert_ratio(genes)
    fract = fract_expert_stats(genes)
    report.summary = {
        'genes': len(genes),
        'encoder_expert_ratio': round(ratio, 4) if ratio is not None else NOT_AVAILABLE,
        'moe_genes': sum(has_moe_layers(g) for g in genes),
        'expert_layer_share': fract['expert_layer_share'] if fract['expert_layer_share'] is not None else NOT_AVAILABLE,
        'mixed_width_share': fract['mixed_width_share'] if fract['mixed_width_share'] is not None else NOT_AVAILABLE,
    }
    if ratio is None:
        report.summary['note'] = "no MoE layers"

    report.tables['genes'] = gene_table(entries)
    report.tables['decoder_layers_vs_flops'] = decoder_flops_table(entries)
    distribution = expert_count_distribution(genes)
    report.tables['expert_count_distribution'] = distribution
    report.figures['decoder_flops'] = plot_decoder_flops(entries)
    report.figures['expert_distribution'] = plot_expert_distribution(distribution)

    if latency_records:
        shares = decoder_latency_share(latency_records)
        report.tables['decoder_latency_share'] = shares
        if not shares.empty:
            report.summary['decoder_latency_share'] = round(float(shares['decoder_share'].mean()), 4)
    return report


@handle_errors
def analyze(pareto_dir, out_dir=None) -> AnalysisReport:
    """
    Analyze a Pareto directory and write report.txt, CSV tables and HTML figures

    Args:
        pareto_dir: directory of gene/cost YAML pairs (and optionally latency.jsonl)
        out_dir: where to write; defaults to <pareto_dir>/analysis

    Returns:
        AnalysisReport
    """
    pareto_dir = Path(pareto_dir)
    entries = load_pareto_dir(pareto_dir)
    latency_path = pareto_dir / 'latency.jsonl'
    records = read_jsonl(latency_path) if latency_path.exists() else None

    logger.info("=" * 80)
    logger.info(f"ANALYSIS: {len(entries)} genes from {pareto_dir}")
    logger.info("=" * 80)
    report = analyze_entries(entries, records)

    out_dir = Path(out_dir) if out_dir is not None else pareto_dir / 'analysis'
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / 'report.txt', 'w') as f:
        f.write(report.to_text() + "\n")
    for name, table in report.tables.items():
        table.to_csv(out_dir / f"{name}.csv", index=False)
    for name, fig in report.figures.items():
        write_figure(fig, out_dir / f"{name}.html")
    logger.info(f"Analysis written to {out_dir}")
    return report
