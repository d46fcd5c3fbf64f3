import logging
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

import tensorcore as tc
from corpus import ParallelCorpus, make_batches
from moemodel import EOS_ID, PAD_ID, MoeTransformer, RoutingTrace, beam_decode, greedy_decode, routing_entropy
from searchspace import Gene, gene_hash
from supernet import Supernet, batch_loss, save_supernet, spos_train_step, train_on_gene
from utils import ConfigError, NumericalError, append_jsonl, handle_errors

logger = logging.getLogger(__name__)

EVAL_MODES = ('loss', 'token_accuracy', 'corpus_bleu')


@dataclass
class TrainSchedule:
    total_steps: int = 2000
    warmup_steps: int = 500
    lr_min: float = 1e-7
    lr_peak: float = 1e-3
    batch_tokens: int = 256
    label_smoothing: float = 0.1
    aux_loss_coeff: float = 0.01
    seed: int = 1
    checkpoint_every: int = 500
    dropout: float = 0.0
    log_every: int = 100

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} must lie in [0, {self.total_steps}]")
        if not self.lr_min < self.lr_peak:
            raise ConfigError(f"lr_min {self.lr_min} must be below lr_peak {self.lr_peak}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.aux_loss_coeff < 0:
            raise ConfigError("aux_loss_coeff must be >= 0")

    @classmethod
    def from_config(cls, section: Dict) -> 'TrainSchedule':
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in (section or {}).items() if k in known})

    def scaled(self, total_steps: int) -> 'TrainSchedule':
        """Same recipe over a different step count, warmup kept at a quarter"""
        return TrainSchedule(**{**asdict(self), 'total_steps': total_steps, 'warmup_steps': total_steps // 4})


def lr_at(step: int, sched: TrainSchedule) -> float:
    """Linear warmup lr_min -> lr_peak, then cosine annealing back to lr_min"""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    span = sched.lr_peak - sched.lr_min
    if step < sched.warmup_steps:
        return sched.lr_min + span * step / sched.warmup_steps
    if sched.total_steps == sched.warmup_steps:
        return sched.lr_peak
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    metrics: List[Dict] = field(default_factory=list)
    last_checkpoint: Optional[str] = None

    @property
    def final_loss(self) -> float:
        return self.metrics[-1]['loss'] if self.metrics else float('nan')

    @property
    def losses(self) -> List[float]:
        return [m['loss'] for m in self.metrics]


class _BatchStream:
    """Endless shuffled batches, reshuffled every epoch"""

    def __init__(self, corpus: ParallelCorpus, batch_tokens: int, rng: np.random.Generator):
        self.corpus = corpus
        self.batch_tokens = batch_tokens
        self.rng = rng
        self.epoch = 0
        self.pending: List = []

    def next(self):
        if not self.pending:
            self.pending = make_batches(self.corpus, self.batch_tokens, self.rng)
            self.pending.reverse()
            self.epoch += 1
        return self.pending.pop()


@handle_errors
def train(net: Supernet, corpus: ParallelCorpus, sched: TrainSchedule, gene: Optional[Gene] = None,
          out_dir=None, label: str = 'supernet') -> TrainResult:
    """
    Run sched.total_steps optimizer steps on the weight store

    Args:
        net: weight store; a full supernet for SPOS, Supernet.for_gene for
            a fixed architecture
        corpus: training pairs
        sched: TrainSchedule
        gene: train only this architecture; None samples one gene per step
        out_dir: receives metrics.jsonl and periodic checkpoints
        label: name used in logs and checkpoint files

    Returns:
        TrainResult with one metrics record per step
    """
    if len(corpus) == 0:
        raise ConfigError("cannot train on an empty corpus")
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = out_dir / 'metrics.jsonl' if out_dir is not None else None

    # independent streams so a fixed gene and a singleton space see the same batches
    batches = _BatchStream(corpus, sched.batch_tokens, np.random.default_rng(sched.seed))
    gene_rng = np.random.default_rng(sched.seed + 1)
    dropout_rng = np.random.default_rng(sched.seed + 2)
    result = TrainResult()

    logger.info("=" * 80)
    logger.info(f"TRAINING {label}: {sched.total_steps} steps "
                f"({'SPOS' if gene is None else gene_hash(gene)}), lr {sched.lr_min:g} -> {sched.lr_peak:g}")
    logger.info("=" * 80)

    for step in range(sched.total_steps):
        batch = batches.next()
        lr = lr_at(step, sched)
        try:
            if gene is None:
                stats = spos_train_step(net, batch, gene_rng, lr, sched.label_smoothing, sched.aux_loss_coeff,
                                        sched.dropout, dropout_rng)
            else:
                stats = train_on_gene(net, gene, batch, lr, sched.label_smoothing, sched.aux_loss_coeff,
                                      sched.dropout, dropout_rng)
        except NumericalError as e:
            e.last_checkpoint = result.last_checkpoint
            e.diagnostics.setdefault('lr', lr)
            logger.error(f"Training halted at step {step}: {e} (last good checkpoint: {result.last_checkpoint})")
            raise

        record = {'step': step, 'lr': lr, 'loss': stats['loss'], 'aux_loss': stats['aux_loss']}
        result.metrics.append(record)
        if metrics_path is not None:
            append_jsonl(metrics_path, {**record, 'gene': stats['gene']})

        if sched.log_every and (step + 1) % sched.log_every == 0:
            logger.info(f"step {step + 1}/{sched.total_steps} lr {lr:.2e} loss {stats['loss']:.4f} "
                        f"aux {stats['aux_loss']:.4f} epoch {batches.epoch}")
        if out_dir is not None and sched.checkpoint_every and (step + 1) % sched.checkpoint_every == 0:
            result.last_checkpoint = str(save_supernet(net, out_dir / 'checkpoints' / f"{label}_step{step + 1}"))

    logger.info(f"Training {label} done: final loss {result.final_loss:.4f}")
    return result


# ============================================================================
# EVALUATION
# ============================================================================

def token_accuracy(predictions: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> float:
    """
    Fraction of reference tokens (EOS included) reproduced at the same position

    Each prediction is compared up to the reference length; missing positions
    count as wrong.
    """
    correct, total = 0, 0
    for pred, ref in zip(predictions, references):
        ref = np.asarray(ref)
        pred = np.asarray(pred)[:len(ref)]
        correct += int((pred == ref[:len(pred)]).sum())
        total += len(ref)
    if total == 0:
        raise ConfigError("token_accuracy needs at least one reference token")
    return correct / total


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_order: int = 4) -> float:
    """Corpus-level BLEU (0-100), uniform n-gram weights, brevity penalty"""
    if len(hypotheses) != len(references) or not references:
        raise ConfigError("corpus_bleu needs equally many hypotheses and references, at least one")
    matches = [0] * max_order
    possible = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hyp_ngrams = _ngrams(hyp, n)
            ref_ngrams = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, ref_ngrams[g]) for g, c in hyp_ngrams.items())
            possible[n - 1] += max(len(hyp) - n + 1, 0)

    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_precision = sum(math.log(m / p) for m, p in zip(matches, possible)) / max_order
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)


def _strip(ids) -> List[int]:
    out = []
    for i in ids:
        if i == EOS_ID:
            break
        if i != PAD_ID:
            out.append(int(i))
    return out


def translate(model: MoeTransformer, corpus: ParallelCorpus, batch_tokens: int = 256,
              beam_size: int = 1) -> List[np.ndarray]:
    """Greedy (or beam) translations of every source, in corpus order"""
    outputs = []
    for batch in make_batches(corpus, batch_tokens):
        max_len = batch.tgt_out.shape[1]
        if beam_size > 1:
            outputs.extend(beam_decode(model, row[row != PAD_ID], max_len, beam_size) for row in batch.src)
        else:
            outputs.extend(greedy_decode(model, batch.src, max_len))
    return outputs


@handle_errors
def evaluate(model: MoeTransformer, corpus: ParallelCorpus, mode: str = 'loss', batch_tokens: int = 256,
             label_smoothing: float = 0.1, beam_size: int = 1) -> float:
    """
    Score a model on held-out pairs

    Args:
        mode: loss (token-weighted label-smoothed cross-entropy),
            token_accuracy (greedy decoding vs reference + EOS) or
            corpus_bleu (0-100 on token ids)
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"Unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")
    if len(corpus) == 0:
        raise ConfigError("cannot evaluate on an empty corpus")

    if mode == 'loss':
        total, tokens = 0.0, 0
        with tc.no_grad():
            for batch in make_batches(corpus, batch_tokens):
                count = int((batch.tgt_out != PAD_ID).sum())
                _, ce, _ = batch_loss(model, batch, label_smoothing, 0.0)
                total += ce.item() * count
                tokens += count
        return total / tokens

    predictions = translate(model, corpus, batch_tokens, beam_size)
    if mode == 'token_accuracy':
        references = [np.concatenate([t, [EOS_ID]]) for t in corpus.tgt]
        return token_accuracy(predictions, references)
    return corpus_bleu([_strip(p) for p in predictions], [list(map(int, t)) for t in corpus.tgt])


def collect_routing_trace(model: MoeTransformer, corpus: ParallelCorpus,
                          batch_tokens: int = 256) -> List[RoutingTrace]:
    """Per-layer routing decisions of teacher-forced passes over the corpus"""
    model.trace = []
    try:
        with tc.no_grad():
            for batch in make_batches(corpus, batch_tokens):
                model.forward(batch.src, batch.tgt_in)
        return model.trace
    finally:
        model.trace = None


def mean_routing_entropy(model: MoeTransformer, corpus: ParallelCorpus, batch_tokens: int = 256) -> float:
    """Expert-usage entropy averaged over MoE layers"""
    return routing_entropy(collect_routing_trace(model, corpus, batch_tokens))
