"""
Wall-clock latency harness

Times full greedy translations (encoder once, tgt_len incremental decoder
steps) on the host and aggregates with a truncated mean. Gold measurements use
300 timed passes, partially gold ones 100. Warmup passes run first and are
never sampled. The harness refuses to time while fitness workers are active.
"""

import logging
import math
import os
import platform
import threading
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

import tensorcore as tc
from moemodel import MoeTransformer, greedy_decode
from searchspace import Gene, gene_hash
from utils import ConfigError, HarnessBusyError, active_workers, append_jsonl, timestamp

logger = logging.getLogger(__name__)

GOLD_PASSES = 300
PARTIALLY_GOLD_PASSES = 100
WARMUP_PASSES = 10

_harness_lock = threading.Lock()


@dataclass
class LatencySpec:
    passes: int = PARTIALLY_GOLD_PASSES
    trim_fraction: float = 0.10
    src_len: int = 30
    tgt_len: int = 30
    batch_size: int = 1
    constraint_ms: Optional[float] = None
    warmup_passes: int = WARMUP_PASSES

    def __post_init__(self):
        if self.passes < 10:
            raise ConfigError(f"latency passes must be >= 10, got {self.passes}")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ConfigError(f"trim_fraction must be in [0, 0.5), got {self.trim_fraction}")
        if self.src_len < 1 or self.tgt_len < 1 or self.batch_size < 1:
            raise ConfigError("src_len, tgt_len and batch_size must be >= 1")

    def gold(self) -> 'LatencySpec':
        return LatencySpec(**{**asdict(self), 'passes': GOLD_PASSES})

    def partially_gold(self) -> 'LatencySpec':
        return LatencySpec(**{**asdict(self), 'passes': PARTIALLY_GOLD_PASSES})

    @classmethod
    def from_config(cls, section: Dict, gold: bool = False) -> 'LatencySpec':
        section = section or {}
        return cls(
            passes=section.get('gold_passes', GOLD_PASSES) if gold else section.get('passes', PARTIALLY_GOLD_PASSES),
            trim_fraction=section.get('trim_fraction', 0.10),
            src_len=section.get('src_len', 30),
            tgt_len=section.get('tgt_len', 30),
            batch_size=section.get('batch_size', 1),
            constraint_ms=section.get('constraint_ms'),
            warmup_passes=section.get('warmup_passes', WARMUP_PASSES),
        )


@dataclass
class LatencyResult:
    gene: str
    mean_ms: float
    samples: List[float]
    warmup_passes: int
    spec: Dict
    host: Dict
    timestamp: str = field(default_factory=timestamp)

    def to_record(self) -> Dict:
        return {
            'gene': self.gene,
            'spec': self.spec,
            'samples': self.samples,
            'truncated_mean': self.mean_ms,
            'warmup_passes': self.warmup_passes,
            'host': self.host,
            'timestamp': self.timestamp,
        }


def truncated_mean(samples: Sequence[float], trim_fraction: float = 0.10) -> float:
    """Drop floor(n*trim) smallest and largest samples, average the rest"""
    n = len(samples)
    if n == 0:
        raise ConfigError("truncated_mean needs at least one sample")
    if trim_fraction > 0 and n < 1.0 / trim_fraction - 1e-9:
        raise ConfigError(f"{n} samples are too few to trim {trim_fraction:.0%} from each end")
    k = int(math.floor(n * trim_fraction + 1e-9))
    ordered = np.sort(np.asarray(samples, dtype=np.float64))
    return float(ordered[k:n - k].mean())


def satisfies(measured_ms: float, constraint_ms: float) -> bool:
    return measured_ms <= constraint_ms


def _cpu_model() -> str:
    try:
        with open('/proc/cpuinfo', 'r') as f:
            for line in f:
                if line.startswith('model name'):
                    return line.split(':', 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def host_descriptor() -> Dict:
    return {
        'cpu': _cpu_model(),
        'cpu_count': os.cpu_count(),
        'threads': os.getenv('OMP_NUM_THREADS', 'unset'),
        'platform': platform.platform(),
        'python': platform.python_version(),
        'numpy': np.__version__,
        'precision': np.dtype(tc.get_dtype()).name,
    }


def measure_detailed(gene: Gene, weights: Mapping, spec: LatencySpec, seed: int = 1,
                     encoder_only: bool = False, log_path=None) -> LatencyResult:
    """
    Time spec.passes translations of a random batch

    Args:
        gene: architecture to time
        weights: parameter mapping shaped for the gene (e.g. a SubnetView's tensors)
        spec: pass counts, trimming and sentence lengths
        seed: fixes the random source batch
        encoder_only: time only the encoder (for the decoder share)
        log_path: JSONL file to append the result to

    Returns:
        LatencyResult
    """
    if active_workers() > 0:
        raise HarnessBusyError(f"{active_workers()} fitness workers are running; latency timing refused")
    if not _harness_lock.acquire(blocking=False):
        raise HarnessBusyError("another latency measurement is in progress")
    try:
        model = MoeTransformer(gene, weights)
        rng = np.random.default_rng(seed)
        src = rng.integers(4, model.vocab_size, size=(spec.batch_size, spec.src_len))

        def run_pass():
            if encoder_only:
                model.encode(src)
            else:
                greedy_decode(model, src, spec.tgt_len, stop_at_eos=False)

        with tc.no_grad():
            for _ in range(spec.warmup_passes):
                run_pass()
            samples = []
            for _ in range(spec.passes):
                start = time.perf_counter()
                run_pass()
                samples.append((time.perf_counter() - start) * 1000.0)
    finally:
        _harness_lock.release()

    result = LatencyResult(
        gene=gene_hash(gene),
        mean_ms=truncated_mean(samples, spec.trim_fraction),
        samples=samples,
        warmup_passes=spec.warmup_passes,
        spec={**asdict(spec), 'encoder_only': encoder_only},
        host=host_descriptor(),
    )
    logger.debug(f"Latency {result.gene}: {result.mean_ms:.2f}ms over {spec.passes} passes")
    if log_path is not None:
        append_jsonl(log_path, result.to_record())
    return result


def measure(gene: Gene, weights: Mapping, spec: LatencySpec, seed: int = 1, log_path=None) -> float:
    return measure_detailed(gene, weights, spec, seed=seed, log_path=log_path).mean_ms


def decoder_share(gene: Gene, weights: Mapping, spec: LatencySpec, seed: int = 1, log_path=None) -> float:
    """Fraction of translation time spent after the encoder"""
    total = measure_detailed(gene, weights, spec, seed=seed, log_path=log_path).mean_ms
    encoder = measure_detailed(gene, weights, spec, seed=seed, encoder_only=True, log_path=log_path).mean_ms
    return (total - encoder) / total
