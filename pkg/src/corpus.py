import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from moemodel import PAD_ID, BOS_ID, EOS_ID, UNK_ID, SPECIAL_TOKENS
from utils import ConfigError

logger = logging.getLogger(__name__)

SYNTHETIC_TASKS = ('copy', 'reverse', 'lookup-translate')


class Vocabulary:
    """Token <-> id table; ids 0-3 are pad/bos/eos/unk"""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.index = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> np.ndarray:
        return np.asarray([self.index.get(w, UNK_ID) for w in words], dtype=np.int64)

    def decode(self, ids) -> List[str]:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.tokens[i])
        return words

    @classmethod
    def build(cls, lines: Sequence[Sequence[str]], min_freq: int = 1) -> 'Vocabulary':
        counts = Counter(w for line in lines for w in line)
        # most frequent first, ties alphabetical
        kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        return cls(kept)


@dataclass
class ParallelCorpus:
    src: List[np.ndarray]
    tgt: List[np.ndarray]
    vocab: Vocabulary
    max_len: int
    stats: Dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ConfigError(f"corpus has {len(self.src)} sources but {len(self.tgt)} targets")

    def __len__(self):
        return len(self.src)

    def subset(self, indices) -> 'ParallelCorpus':
        return ParallelCorpus([self.src[i] for i in indices], [self.tgt[i] for i in indices],
                              self.vocab, self.max_len)

    def split(self, valid_count: int, seed: int = 1) -> Tuple['ParallelCorpus', 'ParallelCorpus']:
        if not 0 < valid_count < len(self):
            raise ConfigError(f"cannot hold out {valid_count} of {len(self)} pairs")
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(order[valid_count:]), self.subset(order[:valid_count])


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def num_pairs(self) -> int:
        return self.src.shape[0]


def _pad(rows: Sequence[np.ndarray]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def collate(src_rows: Sequence[np.ndarray], tgt_rows: Sequence[np.ndarray]) -> Batch:
    """Target input gets a leading BOS, target output a trailing EOS"""
    tgt_in = [np.concatenate([[BOS_ID], t]) for t in tgt_rows]
    tgt_out = [np.concatenate([t, [EOS_ID]]) for t in tgt_rows]
    return Batch(_pad(src_rows), _pad(tgt_in), _pad(tgt_out))


def make_batches(corpus: ParallelCorpus, batch_tokens: int,
                 rng: Optional[np.random.Generator] = None) -> List[Batch]:
    """
    Group pairs so that rows * longest target (with EOS) stays within batch_tokens

    Pairs keep corpus order unless rng is given, in which case they are shuffled.
    """
    if len(corpus) == 0:
        raise ConfigError("cannot batch an empty corpus")
    if batch_tokens < corpus.max_len + 1:
        raise ConfigError(f"batch_tokens {batch_tokens} is below the longest sequence {corpus.max_len + 1}")
    order = rng.permutation(len(corpus)) if rng is not None else np.arange(len(corpus))

    batches, current, longest = [], [], 0
    for i in order:
        length = max(len(corpus.src[i]), len(corpus.tgt[i]) + 1)
        if current and (len(current) + 1) * max(longest, length) > batch_tokens:
            batches.append(collate([corpus.src[j] for j in current], [corpus.tgt[j] for j in current]))
            current, longest = [], 0
        current.append(i)
        longest = max(longest, length)
    if current:
        batches.append(collate([corpus.src[j] for j in current], [corpus.tgt[j] for j in current]))
    return batches


# ============================================================================
# SYNTHETIC TASKS
# ============================================================================

def lookup_permutation(vocab: int, seed: int) -> np.ndarray:
    """Seeded bijection over the non-special ids; specials map to themselves"""
    table = np.arange(vocab)
    table[len(SPECIAL_TOKENS):] = np.random.default_rng(seed).permutation(np.arange(len(SPECIAL_TOKENS), vocab))
    return table


def synthetic_target(task: str, src: np.ndarray, permutation: Optional[np.ndarray] = None) -> np.ndarray:
    if task == 'copy':
        return src.copy()
    if task == 'reverse':
        return src[::-1].copy()
    if task == 'lookup-translate':
        return permutation[src]
    raise ConfigError(f"Unknown synthetic task {task!r}; expected one of {SYNTHETIC_TASKS}")


def make_synthetic(task: str, vocab: int, length: int, count: int, seed: int = 1) -> ParallelCorpus:
    """
    Build a synthetic translation corpus

    Args:
        task: copy | reverse | lookup-translate
        vocab: vocabulary size including the four reserved ids (>= 5)
        length: tokens per sentence (>= 1)
        count: number of pairs
        seed: fixes both the sentences and the lookup permutation

    Returns:
        ParallelCorpus
    """
    if task not in SYNTHETIC_TASKS:
        raise ConfigError(f"Unknown synthetic task {task!r}; expected one of {SYNTHETIC_TASKS}")
    if vocab < 5 or length < 1 or count < 1:
        raise ConfigError(f"synthetic task needs vocab >= 5, length >= 1, count >= 1 "
                          f"(got {vocab}, {length}, {count})")

    rng = np.random.default_rng(seed)
    permutation = lookup_permutation(vocab, seed) if task == 'lookup-translate' else None
    first = len(SPECIAL_TOKENS)
    src = [rng.integers(first, vocab, size=length) for _ in range(count)]
    tgt = [synthetic_target(task, s, permutation) for s in src]
    words = [f"w{i}" for i in range(first, vocab)]
    corpus = ParallelCorpus(src, tgt, Vocabulary(words), length,
                            stats={'task': task, 'total_lines': count, 'loaded_pairs': count, 'errors': []})
    logger.info(f"Synthetic {task} corpus: {count} pairs, vocab {vocab}, length {length}")
    return corpus


# ============================================================================
# TEXT CORPORA
# ============================================================================

def _read_lines(path) -> List[List[str]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Corpus file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line.split() for line in f.read().splitlines()]
    if not lines:
        raise ConfigError(f"Corpus file is empty: {path}")
    return lines


def load_corpus(src_path, tgt_path, max_len: int = 64, min_freq: int = 1,
                vocab: Optional[Vocabulary] = None) -> ParallelCorpus:
    """
    Load a whitespace-tokenized parallel corpus

    The vocabulary is built from these files unless one is passed in (held-out
    splits reuse the training vocabulary). Tokens outside it map to the unk id;
    lines longer than max_len are truncated and counted.
    """
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)

    results = {
        'total_lines': len(src_lines),
        'loaded_pairs': 0,
        'truncated': 0,
        'oov_tokens': 0,
        'errors': []
    }
    if len(src_lines) != len(tgt_lines):
        raise ConfigError(f"Line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}")

    if vocab is None:
        vocab = Vocabulary.build(src_lines + tgt_lines, min_freq=min_freq)

    src, tgt = [], []
    for idx, (s_words, t_words) in enumerate(zip(src_lines, tgt_lines)):
        if not s_words or not t_words:
            results['errors'].append(f"Line {idx + 1}: empty side skipped")
            continue
        if len(s_words) > max_len or len(t_words) > max_len:
            results['truncated'] += 1
        s_ids = vocab.encode(s_words[:max_len])
        t_ids = vocab.encode(t_words[:max_len])
        results['oov_tokens'] += int((s_ids == UNK_ID).sum() + (t_ids == UNK_ID).sum())
        src.append(s_ids)
        tgt.append(t_ids)
        results['loaded_pairs'] += 1

    if not src:
        raise ConfigError(f"No usable sentence pairs in {src_path} / {tgt_path}")
    if results['truncated']:
        logger.warning(f"Truncated {results['truncated']} pairs to {max_len} tokens")
    for error in results['errors']:
        logger.warning(error)
    logger.info(f"Loaded {results['loaded_pairs']} pairs, vocab {len(vocab)}, {results['oov_tokens']} OOV tokens")

    return ParallelCorpus(src, tgt, vocab, max_len, stats=results)


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(ids))
