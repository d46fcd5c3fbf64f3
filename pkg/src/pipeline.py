import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Tuple

import tensorcore as tc
from corpus import ParallelCorpus, load_corpus, make_batches, make_synthetic
from costmodel import count_flops
from evosearch import EvoConfig, export_front, search_supernet
from latency import LatencySpec
from searchspace import Gene, SearchSpace, gene_hash, max_gene, save_gene
from supernet import Supernet, extract_subnet, save_supernet
from trainer import TrainSchedule, evaluate, train
from utils import ConfigError, get_output_root, load_env_config, to_plain, write_yaml

logger = logging.getLogger(__name__)


def build_corpus(data: Dict) -> Tuple[ParallelCorpus, ParallelCorpus]:
    """
    Train/valid corpora from a DATA section: either a synthetic task
    (task, vocab, length, count) or corpus paths (src, tgt, optionally
    valid_src, valid_tgt)
    """
    data = data or {}
    has_task = bool(data.get('task'))
    has_files = bool(data.get('src') or data.get('tgt'))
    if has_task == has_files:
        raise ConfigError("DATA needs exactly one of a synthetic task or src/tgt corpus paths")

    if has_task:
        corpus = make_synthetic(data['task'], int(data.get('vocab', 64)), int(data.get('length', 12)),
                                int(data.get('count', 20000)), int(data.get('seed', 1)))
        return corpus.split(int(data.get('valid_count', 500)), int(data.get('seed', 1)))

    corpus = load_corpus(data['src'], data['tgt'], max_len=int(data.get('max_len', 64)),
                         min_freq=int(data.get('min_freq', 1)))
    if data.get('valid_src'):
        valid = load_corpus(data['valid_src'], data['valid_tgt'], max_len=corpus.max_len, vocab=corpus.vocab)
        return corpus, valid
    return corpus.split(int(data.get('valid_count', 500)), int(data.get('seed', 1)))


def max_positions_for(corpus: ParallelCorpus, latency: Optional[LatencySpec] = None) -> int:
    """Positional table size covering training targets (+BOS/EOS) and latency timing passes"""
    needed = corpus.max_len + 2
    if latency is not None:
        needed = max(needed, latency.tgt_len + 1, latency.src_len)
    return needed


def flops_budget(space: SearchSpace, evo: Dict, src_len: int, tgt_len: int) -> Optional[float]:
    """Absolute FLOPs bound, or a fraction of the max gene's FLOPs"""
    if evo.get('flops') is not None:
        return float(evo['flops'])
    if evo.get('flops_fraction') is not None:
        return float(evo['flops_fraction']) * count_flops(max_gene(space), src_len, tgt_len)
    return None


def train_final(gene: Gene, train_corpus: ParallelCorpus, valid_corpus: ParallelCorpus, sched: TrainSchedule,
                max_positions: int, out_dir: Path, label: str, warm_start: Optional[Supernet] = None) -> Dict:
    """Train one architecture to the end of the schedule and score it on the held-out pairs"""
    net = Supernet.for_gene(gene, len(train_corpus.vocab), max_positions, sched.seed, warm_start=warm_start)
    result = train(net, train_corpus, sched, gene=gene, out_dir=out_dir, label=label)
    save_supernet(net, out_dir / f"{label}_final")
    save_gene(out_dir / f"{label}.gene.yaml", gene)
    model = extract_subnet(net, gene).model()
    return {
        'gene': gene_hash(gene),
        'final_loss': result.final_loss,
        'valid_loss': evaluate(model, valid_corpus, 'loss', sched.batch_tokens, sched.label_smoothing),
        'token_accuracy': evaluate(model, valid_corpus, 'token_accuracy', sched.batch_tokens),
    }


def run_pipeline(config: Dict = None, out_dir=None, warm_start: bool = False) -> Dict:
    """
    Supernet training, constrained search and final training end to end

    WORKFLOW:
    1. Build train/valid corpora
    2. SPOS-train the supernet
    3. Evolutionary search under the FLOPs (and/or latency) bound
    4. Train the searched gene from scratch (or from supernet slices)
    5. Train the max gene as the dense reference
    6. Compare accuracy and FLOPs

    Args:
        config: env.yaml-shaped dictionary (loaded if None)
        out_dir: run directory (a timestamped folder under the output root if None)
        warm_start: initialize the final model from the supernet's slices

    Returns:
        results dictionary, also written to pipeline_summary.yaml
    """
    if config is None:
        config = load_env_config()
    out_dir = Path(out_dir) if out_dir is not None else \
        get_output_root(config) / f"pipeline_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {
        'out_dir': str(out_dir),
        'errors': []
    }
    start_time = datetime.now()
    try:
        tc.set_precision(config.get('NUMERICS', {}).get('PRECISION', 'float32'))
        space = SearchSpace.from_dict(config['SPACE']).check()
        sched = TrainSchedule.from_config(config.get('SCHEDULE'))
        evo_section = dict(config.get('EVO') or {})
        latency = LatencySpec.from_config(config.get('LATENCY'))

        logger.info("=" * 80)
        logger.info("PIPELINE STARTED - supernet -> search -> final training")
        logger.info(f"Start time: {start_time}")
        logger.info(f"Output: {out_dir}")
        logger.info("=" * 80)

        logger.info("Step 1/6: DATA - building train/valid corpora")
        train_corpus, valid_corpus = build_corpus(config.get('DATA'))
        max_positions = max_positions_for(train_corpus, latency)
        logger.info(f"Train {len(train_corpus)} pairs, valid {len(valid_corpus)} pairs, vocab {len(train_corpus.vocab)}")

        logger.info("Step 2/6: SUPERNET - single-path one-shot training")
        net = Supernet(space, len(train_corpus.vocab), max_positions, sched.seed)
        supernet_run = train(net, train_corpus, sched, out_dir=out_dir / 'supernet', label='supernet')
        save_supernet(net, out_dir / 'supernet' / 'supernet_final')
        results['supernet_final_loss'] = supernet_run.final_loss

        logger.info("Step 3/6: SEARCH - evolutionary search under the cost bound")
        evo_section['flops'] = flops_budget(space, evo_section, latency.src_len, latency.tgt_len)
        evo_section.pop('flops_fraction', None)
        evo_section.setdefault('src_len', latency.src_len)
        evo_section.setdefault('tgt_len', latency.tgt_len)
        evo = EvoConfig.from_config(evo_section)
        search_dir = out_dir / 'search'
        search = search_supernet(net, evo, make_batches(valid_corpus, sched.batch_tokens),
                                 latency_spec=latency if evo.latency_ms is not None else None,
                                 history_path=search_dir / 'history.jsonl',
                                 latency_log=search_dir / 'pareto' / 'latency.jsonl',
                                 label_smoothing=sched.label_smoothing)
        export_front(search, search_dir / 'pareto')
        best = search.best_gene
        results['best_gene'] = gene_hash(best)
        results['best_fitness'] = search.best_fitness
        results['flops_bound'] = evo.flops

        logger.info(f"Step 4/6: FINAL - training {gene_hash(best)} ({best.describe()})")
        final = train_final(best, train_corpus, valid_corpus, sched, max_positions, out_dir / 'final', 'searched',
                            warm_start=net if warm_start else None)

        logger.info("Step 5/6: REFERENCE - training the max gene")
        reference_gene = max_gene(space)
        reference = train_final(reference_gene, train_corpus, valid_corpus, sched, max_positions,
                                out_dir / 'reference', 'max_gene')

        logger.info("Step 6/6: COMPARE - accuracy and FLOPs")
        best_flops = count_flops(best, latency.src_len, latency.tgt_len)
        max_flops = count_flops(reference_gene, latency.src_len, latency.tgt_len)
        results.update({
            'searched': final,
            'reference': reference,
            'searched_gflops': best_flops / 1e9,
            'reference_gflops': max_flops / 1e9,
            'flops_fraction': best_flops / max_flops,
            'accuracy_gap': reference['token_accuracy'] - final['token_accuracy'],
        })

        duration = (datetime.now() - start_time).total_seconds()
        results['duration_s'] = duration
        logger.info("=" * 80)
        logger.info("PIPELINE COMPLETED SUCCESSFULLY")
        logger.info(f"Duration: {duration:.2f} seconds")
        logger.info(f"Searched gene: accuracy {final['token_accuracy']:.4f}, {best_flops / 1e9:.4f} GFLOPs")
        logger.info(f"Max gene:      accuracy {reference['token_accuracy']:.4f}, {max_flops / 1e9:.4f} GFLOPs")
        logger.info(f"FLOPs fraction {best_flops / max_flops:.3f}, accuracy gap {results['accuracy_gap']:.4f}")
        logger.info("=" * 80)
        return results

    except Exception as e:
        results['errors'].append(str(e))
        logger.error("=" * 80)
        logger.error(f"PIPELINE FAILED: {e}")
        logger.error("=" * 80)
        raise

    finally:
        write_yaml(out_dir / 'pipeline_summary.yaml', to_plain(results))
