"""
Command-line entry point

Commands:
    train-supernet  SPOS-train a supernet over the search space
    search          evolutionary (or random) search on a trained supernet
    cost-report     parameters, sparsity and FLOPs for gene files
    train-subnet    train one gene to the end of the schedule
    eval            score a trained gene on held-out pairs, optionally exporting routing traces
    analyze         expert-placement and cost analysis of a Pareto directory
    pipeline        train-supernet -> search -> train-subnet -> compare

Defaults come from env.yaml; a YAML file passed with --config and then the
command-line flags override them.
"""

import logging
import platform
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import configargparse
import numpy as np
import pandas as pd

import tensorcore as tc
from analysis import analyze, baseline_table
from corpus import make_batches
from costmodel import cost_report, format_row, save_report
from evosearch import EvoConfig, export_front, random_search_supernet, search_supernet
from latency import LatencySpec, decoder_share, measure
from moemodel import init_weights, routing_trace_records
from pipeline import build_corpus, flops_budget, max_positions_for, run_pipeline, train_final
from searchspace import SearchSpace, check_gene, gene_hash, load_gene, load_space, save_space
from supernet import Supernet, extract_subnet, load_supernet, save_supernet
from trainer import EVAL_MODES, TrainSchedule, collect_routing_trace, evaluate, train
from utils import (MoeSearchError, ConfigError, EXIT_OK, configure_logging, exit_code_for, get_output_root,
                   load_env_config, stable_hash, timestamp, to_plain, write_jsonl, write_yaml)

logger = logging.getLogger(__name__)

COMMANDS = ('train-supernet', 'search', 'cost-report', 'train-subnet', 'eval', 'analyze', 'pipeline')


def build_parser() -> configargparse.ArgumentParser:
    parser = configargparse.ArgumentParser(
        description="Heterogeneous mixture-of-experts architecture search",
        config_file_parser_class=configargparse.YAMLConfigFileParser,
    )
    parser.add_argument('command', choices=COMMANDS, help='what to run')
    parser.add_argument('--config', is_config_file=True, help='YAML run configuration (flags override it)')
    parser.add_argument('--env-file', default='env.yaml', help='defaults file')
    parser.add_argument('--out-dir', help='run directory (default: timestamped folder under the output root)')
    parser.add_argument('--seed', type=int, help='seed for data, training and search')
    parser.add_argument('--precision', choices=('float32', 'float64'), help='tensor precision')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')

    # architecture inputs
    parser.add_argument('--space', help='search space YAML (default: SPACE in env.yaml)')
    parser.add_argument('--gene', nargs='+', default=[], help='gene YAML file(s)')
    parser.add_argument('--supernet', help='supernet checkpoint (manifest path without suffix)')
    parser.add_argument('--checkpoint', help='trained subnet checkpoint for eval')
    parser.add_argument('--warm-start', action='store_true', help='initialize train-subnet from --supernet slices')

    # dataset
    parser.add_argument('--task', help='synthetic task: copy, reverse or lookup-translate')
    parser.add_argument('--vocab', type=int, help='synthetic vocabulary size')
    parser.add_argument('--length', type=int, help='synthetic sentence length')
    parser.add_argument('--count', type=int, help='synthetic pair count')
    parser.add_argument('--src', help='source side of a text corpus')
    parser.add_argument('--tgt', help='target side of a text corpus')
    parser.add_argument('--valid-src', help='held-out source file')
    parser.add_argument('--valid-tgt', help='held-out target file')

    # schedule and search
    parser.add_argument('--steps', type=int, help='total training steps (warmup kept at a quarter)')
    parser.add_argument('--flops', type=float, help='FLOPs bound for search')
    parser.add_argument('--flops-fraction', type=float, help='FLOPs bound as a fraction of the max gene')
    parser.add_argument('--latency-ms', type=float, help='latency bound for search')
    parser.add_argument('--unconstrained', action='store_true', help='search without a cost bound')
    parser.add_argument('--iterations', type=int, help='search iterations')
    parser.add_argument('--population', type=int, help='search population size')
    parser.add_argument('--workers', type=int, help='parallel fitness workers')
    parser.add_argument('--strategy', choices=('evolution', 'random'), default='evolution',
                        help='search strategy; random picks constraint-satisfying genes at random')
    parser.add_argument('--samples', type=int, default=1, help='genes scored by the random strategy')

    # costs and evaluation
    parser.add_argument('--src-len', type=int, help='source length for FLOPs and latency')
    parser.add_argument('--tgt-len', type=int, help='target length for FLOPs and latency')
    parser.add_argument('--include-output-proj', action='store_true', help='bill the vocabulary projection')
    parser.add_argument('--reference', help='gene file whose FLOPs are the reduction baseline')
    parser.add_argument('--measure-latency', action='store_true', help='time genes (cost-report, search front)')
    parser.add_argument('--eval-mode', choices=EVAL_MODES, default='token_accuracy')
    parser.add_argument('--beam', type=int, default=1, help='beam size for decoding during eval')
    parser.add_argument('--routing-trace', action='store_true', help='eval also writes routing_trace.jsonl')
    parser.add_argument('--pareto-dir', help='directory of gene/cost files for analyze')
    return parser


def resolve_config(args) -> Dict:
    """env.yaml with the command-line overrides folded in"""
    config = load_env_config(args.env_file)
    for section in ('SPACE', 'SCHEDULE', 'EVO', 'LATENCY', 'DATA', 'NUMERICS', 'OUTPUT', 'LOG'):
        config[section] = dict(config.get(section) or {})

    if args.space:
        config['SPACE'] = load_space(args.space).to_dict()
    if args.precision:
        config['NUMERICS']['PRECISION'] = args.precision
    if args.seed is not None:
        for section in ('SCHEDULE', 'EVO', 'DATA'):
            config[section]['seed'] = args.seed

    data = config['DATA']
    if args.src or args.tgt:
        for key in ('task', 'vocab', 'length', 'count'):
            data.pop(key, None)
    for key in ('task', 'vocab', 'length', 'count', 'src', 'tgt', 'valid_src', 'valid_tgt'):
        value = getattr(args, key)
        if value is not None:
            data[key] = value

    if args.steps is not None:
        config['SCHEDULE']['total_steps'] = args.steps
        config['SCHEDULE']['warmup_steps'] = args.steps // 4

    evo = config['EVO']
    for key, attr in (('flops', 'flops'), ('flops_fraction', 'flops_fraction'), ('latency_ms', 'latency_ms'),
                      ('num_iterations', 'iterations'), ('num_population', 'population'), ('workers', 'workers')):
        value = getattr(args, attr)
        if value is not None:
            evo[key] = value
    if args.flops is not None or args.latency_ms is not None:
        evo.pop('flops_fraction', None)
    if args.unconstrained:
        evo['unconstrained'] = True
        evo.pop('flops_fraction', None)
    if evo.get('num_population') is not None:
        evo['num_parents'] = min(evo.get('num_parents', 25), evo['num_population'])

    for key, attr in (('src_len', 'src_len'), ('tgt_len', 'tgt_len')):
        value = getattr(args, attr)
        if value is not None:
            config['LATENCY'][key] = value
    return config


def write_manifest(out_dir: Path, command: str, config: Dict, argv: List[str]) -> Path:
    """Record what ran: command, arguments, config hash and component versions"""
    return write_yaml(out_dir / 'manifest.yaml', {
        'command': command,
        'argv': list(argv),
        'config_hash': stable_hash(config),
        'config': config,
        'timestamp': timestamp(),
        'versions': {
            'python': platform.python_version(),
            'numpy': np.__version__,
            'pandas': pd.__version__,
            'configargparse': getattr(configargparse, '__version__', 'unknown'),
        },
    })


def _require(value, flag: str, command: str):
    if not value:
        raise ConfigError(f"{command} needs {flag}")
    return value


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_train_supernet(args, config: Dict, out_dir: Path) -> Dict:
    space = SearchSpace.from_dict(config['SPACE']).check()
    sched = TrainSchedule.from_config(config['SCHEDULE'])
    latency = LatencySpec.from_config(config['LATENCY'])
    train_corpus, _ = build_corpus(config['DATA'])
    net = Supernet(space, len(train_corpus.vocab), max_positions_for(train_corpus, latency), sched.seed)
    result = train(net, train_corpus, sched, out_dir=out_dir, label='supernet')
    save_space(out_dir / 'space.yaml', space)
    manifest = save_supernet(net, out_dir / 'supernet_final')
    return {'checkpoint': str(manifest.with_suffix('')), 'final_loss': result.final_loss}


def cmd_search(args, config: Dict, out_dir: Path) -> Dict:
    net = load_supernet(_require(args.supernet, '--supernet', 'search'))
    sched = TrainSchedule.from_config(config['SCHEDULE'])
    latency = LatencySpec.from_config(config['LATENCY'])
    _, valid_corpus = build_corpus(config['DATA'])

    evo_section = dict(config['EVO'])
    evo_section['flops'] = flops_budget(net.space, evo_section, latency.src_len, latency.tgt_len)
    evo_section.pop('flops_fraction', None)
    evo_section.setdefault('src_len', latency.src_len)
    evo_section.setdefault('tgt_len', latency.tgt_len)
    evo = EvoConfig.from_config(evo_section)

    timed = evo.latency_ms is not None or args.measure_latency
    pareto_dir = out_dir / 'pareto'
    batches = make_batches(valid_corpus, sched.batch_tokens)
    if args.strategy == 'random':
        result = random_search_supernet(net, evo, batches, latency_spec=latency if timed else None,
                                        samples=args.samples, latency_log=pareto_dir / 'latency.jsonl',
                                        label_smoothing=sched.label_smoothing)
    else:
        result = search_supernet(net, evo, batches,
                                 latency_spec=latency if timed else None,
                                 history_path=out_dir / 'history.jsonl',
                                 latency_log=pareto_dir / 'latency.jsonl',
                                 label_smoothing=sched.label_smoothing)
    export_front(result, pareto_dir)
    if timed:
        for entry in result.front:
            decoder_share(entry.gene, extract_subnet(net, entry.gene).tensors, latency.gold(),
                          log_path=pareto_dir / 'latency.jsonl')
    return {'strategy': args.strategy, 'best_gene': gene_hash(result.best_gene),
            'best_fitness': result.best_fitness, 'front': len(result.front), 'pareto_dir': str(pareto_dir)}


def cmd_cost_report(args, config: Dict, out_dir: Path) -> Dict:
    genes = {Path(p).name.split('.')[0]: load_gene(p) for p in _require(args.gene, '--gene', 'cost-report')}
    latency = LatencySpec.from_config(config['LATENCY'])
    reference = None
    if args.reference:
        reference = Path(args.reference).name.split('.')[0]
        genes.setdefault(reference, load_gene(args.reference))

    reports = {}
    for name, gene in genes.items():
        measured = None
        if args.measure_latency:
            weights = init_weights(gene, 32, max(latency.tgt_len + 1, latency.src_len))
            measured = measure(gene, weights, latency.gold())
        reports[name] = cost_report(gene, latency.src_len, latency.tgt_len, latency_ms=measured,
                                    include_output_proj=args.include_output_proj,
                                    vocab_size=config['DATA'].get('vocab') if args.include_output_proj else None)
        save_report(out_dir / f"{name}.cost.yaml", reports[name])

    reference_flops = reports[reference].flops if reference else None
    for name, report in reports.items():
        print(format_row(name, report, reference_flops))
    table = baseline_table(genes, reference, latency.src_len, latency.tgt_len)
    table.to_csv(out_dir / 'cost_report.csv', index=False)
    return {'genes': len(genes)}


def cmd_train_subnet(args, config: Dict, out_dir: Path) -> Dict:
    gene_path = _require(args.gene, '--gene', 'train-subnet')[0]
    gene = load_gene(gene_path)
    sched = TrainSchedule.from_config(config['SCHEDULE'])
    latency = LatencySpec.from_config(config['LATENCY'])
    train_corpus, valid_corpus = build_corpus(config['DATA'])

    warm = None
    if args.warm_start:
        warm = load_supernet(_require(args.supernet, '--supernet', 'train-subnet --warm-start'))
        check_gene(warm.space, gene)
        positions = warm.max_positions
    else:
        positions = max_positions_for(train_corpus, latency)
    return train_final(gene, train_corpus, valid_corpus, sched, positions, out_dir, 'subnet', warm_start=warm)


def cmd_eval(args, config: Dict, out_dir: Path) -> Dict:
    gene = load_gene(_require(args.gene, '--gene', 'eval')[0])
    net = load_supernet(_require(args.checkpoint or args.supernet, '--checkpoint', 'eval'))
    sched = TrainSchedule.from_config(config['SCHEDULE'])
    _, valid_corpus = build_corpus(config['DATA'])
    model = extract_subnet(net, gene).model()
    score = evaluate(model, valid_corpus, args.eval_mode, sched.batch_tokens, sched.label_smoothing, args.beam)
    print(f"{args.eval_mode}: {score:.4f}")
    summary = {'gene': gene_hash(gene), 'architecture': gene.describe(), 'mode': args.eval_mode, 'score': score}
    if args.routing_trace:
        records = routing_trace_records(collect_routing_trace(model, valid_corpus, sched.batch_tokens))
        summary['routing_records'] = write_jsonl(out_dir / 'routing_trace.jsonl', records)
    return summary


def cmd_analyze(args, config: Dict, out_dir: Path) -> Dict:
    report = analyze(_require(args.pareto_dir, '--pareto-dir', 'analyze'), out_dir)
    print(report.to_text())
    return {key: value for key, value in report.summary.items()}


def cmd_pipeline(args, config: Dict, out_dir: Path) -> Dict:
    return run_pipeline(config, out_dir, warm_start=args.warm_start)


HANDLERS = {
    'train-supernet': cmd_train_supernet,
    'search': cmd_search,
    'cost-report': cmd_cost_report,
    'train-subnet': cmd_train_subnet,
    'eval': cmd_eval,
    'analyze': cmd_analyze,
    'pipeline': cmd_pipeline,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        configure_logging(config, args.log_level)
        tc.set_precision(config['NUMERICS'].get('PRECISION', 'float32'))

        out_dir = Path(args.out_dir) if args.out_dir else \
            get_output_root(config) / f"{args.command}_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(out_dir, args.command, config, argv)

        logger.info(f"Running {args.command} -> {out_dir}")
        summary = HANDLERS[args.command](args, config, out_dir)
        write_yaml(out_dir / 'summary.yaml', to_plain(summary))
        return EXIT_OK

    except (MoeSearchError, FileNotFoundError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
