"""
Constraint-filtered evolutionary search over genes

Each iteration keeps the best num_parents genes by fitness (supernet
validation loss), draws num_mutations mutants of random population members
and num_crossover children of random pairs, admits only candidates meeting
the FLOPs and/or latency bound, and forms the next population from parents
plus admitted candidates.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from costmodel import CostReport, cost_report, count_flops, save_report
from latency import LatencySpec, measure
from searchspace import (Gene, SearchSpace, gene_hash, sample_gene, sample_layer_widths,
                         save_gene, validate_gene)
from supernet import Supernet, estimate_fitness, extract_subnet
from utils import ConfigError, InfeasibleConstraintError, append_jsonl, worker_slot

logger = logging.getLogger(__name__)

SEED_ATTEMPT_FACTOR = 50


@dataclass
class EvoConfig:
    num_iterations: int = 15
    num_population: int = 125
    num_parents: int = 25
    num_mutations: int = 50
    num_crossover: int = 50
    mutate_prob: float = 0.3
    latency_ms: Optional[float] = None
    flops: Optional[float] = None
    unconstrained: bool = False
    seed: int = 1
    workers: int = 1
    src_len: int = 30
    tgt_len: int = 30

    def __post_init__(self):
        if self.num_parents > self.num_population:
            raise ConfigError(f"num_parents {self.num_parents} exceeds num_population {self.num_population}")
        if not 0.0 <= self.mutate_prob <= 1.0:
            raise ConfigError(f"mutate_prob must be in [0, 1], got {self.mutate_prob}")
        if self.latency_ms is None and self.flops is None and not self.unconstrained:
            raise ConfigError("search needs a latency or FLOPs constraint, or unconstrained: true")
        if min(self.num_iterations, self.num_population, self.num_parents) < 1:
            raise ConfigError("iterations, population and parents must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_config(cls, section: Dict) -> 'EvoConfig':
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in (section or {}).items() if k in known})


@dataclass
class ParetoEntry:
    gene: Gene
    fitness: float
    cost: CostReport
    measured_latency_ms: Optional[float] = None


@dataclass
class SearchResult:
    best_gene: Gene
    best_fitness: float
    front: List[ParetoEntry]
    history: List[Dict] = field(default_factory=list)


# ============================================================================
# VARIATION OPERATORS
# ============================================================================

def _maybe(rng: np.random.Generator, prob: float, current: int, choices: Sequence[int]) -> int:
    if rng.random() < prob:
        return int(choices[int(rng.integers(len(choices)))])
    return current


def _fresh(rng: np.random.Generator, choices: Sequence[int]) -> int:
    return int(choices[int(rng.integers(len(choices)))])


def _mutate_expert_block(space: SearchSpace, fixed, layer: int, experts: int, widths: Tuple[int, ...],
                         prob: float, rng: np.random.Generator) -> Tuple[int, Tuple[int, ...]]:
    if fixed is not None:
        new_count = fixed[layer]
    else:
        new_count = _maybe(rng, prob, experts, space.expert_count_choices)
    if new_count != experts:
        return new_count, sample_layer_widths(space, new_count, rng)
    if space.expert_width_mode == 'std':
        width = _maybe(rng, prob, widths[0], space.ffn_dim_choices)
        return experts, (width,) * experts
    return experts, tuple(_maybe(rng, prob, w, space.ffn_dim_choices) for w in widths)


def _fresh_expert_block(space: SearchSpace, fixed, layer: int, rng: np.random.Generator):
    count = fixed[layer] if fixed is not None else _fresh(rng, space.expert_count_choices)
    return count, sample_layer_widths(space, count, rng)


def mutate(gene: Gene, space: SearchSpace, prob: float, rng: np.random.Generator) -> Gene:
    """
    Resample every searchable position independently with probability prob

    A changed expert count draws fresh widths for that layer; layers added by
    a depth change are sampled from scratch.
    """
    if space.fixed_gene is not None:
        return space.fixed_gene
    embed_enc = _maybe(rng, prob, gene.embed_dim_enc, space.embed_dim_choices)
    embed_dec = _maybe(rng, prob, gene.embed_dim_dec, space.embed_dim_choices)
    n_enc = _maybe(rng, prob, gene.num_enc_layers, space.encoder_layer_choices)
    n_dec = _maybe(rng, prob, gene.num_dec_layers, space.decoder_layer_choices)
    qkv = _maybe(rng, prob, gene.qkv_dim, space.qkv_dim_choices)

    enc_heads, enc_experts, enc_widths = [], [], []
    for l in range(n_enc):
        if l < gene.num_enc_layers:
            enc_heads.append(_maybe(rng, prob, gene.enc_heads[l], space.head_choices))
            count, widths = _mutate_expert_block(space, space.fixed_enc_experts, l, gene.enc_experts[l],
                                                 gene.enc_expert_ffn_dims[l], prob, rng)
        else:
            enc_heads.append(_fresh(rng, space.head_choices))
            count, widths = _fresh_expert_block(space, space.fixed_enc_experts, l, rng)
        enc_experts.append(count)
        enc_widths.append(widths)

    self_heads, cross_heads, arbitrary, dec_experts, dec_widths = [], [], [], [], []
    for l in range(n_dec):
        if l < gene.num_dec_layers:
            self_heads.append(_maybe(rng, prob, gene.dec_self_heads[l], space.head_choices))
            cross_heads.append(_maybe(rng, prob, gene.dec_cross_heads[l], space.head_choices))
            arbitrary.append(_maybe(rng, prob, gene.dec_arbitrary_attn[l], space.arbitrary_attn_choices))
            count, widths = _mutate_expert_block(space, space.fixed_dec_experts, l, gene.dec_experts[l],
                                                 gene.dec_expert_ffn_dims[l], prob, rng)
        else:
            self_heads.append(_fresh(rng, space.head_choices))
            cross_heads.append(_fresh(rng, space.head_choices))
            arbitrary.append(_fresh(rng, space.arbitrary_attn_choices))
            count, widths = _fresh_expert_block(space, space.fixed_dec_experts, l, rng)
        dec_experts.append(count)
        dec_widths.append(widths)

    return Gene(
        embed_dim_enc=embed_enc,
        embed_dim_dec=embed_dec,
        num_enc_layers=n_enc,
        num_dec_layers=n_dec,
        qkv_dim=qkv,
        enc_heads=tuple(enc_heads),
        dec_self_heads=tuple(self_heads),
        dec_cross_heads=tuple(cross_heads),
        dec_arbitrary_attn=tuple(arbitrary),
        enc_experts=tuple(enc_experts),
        dec_experts=tuple(dec_experts),
        enc_expert_ffn_dims=tuple(enc_widths),
        dec_expert_ffn_dims=tuple(dec_widths),
    )


def crossover(a: Gene, b: Gene, rng: np.random.Generator, space: Optional[SearchSpace] = None) -> Gene:
    """
    Uniform per-position mix of two parents

    Expert count and widths of a layer travel together from one parent. Layers
    that only one parent has come from that parent.
    """
    if space is not None:
        for parent in (a, b):
            problems = validate_gene(space, parent)
            if problems:
                raise ConfigError(f"crossover parent {gene_hash(parent)} is not in the space: {problems[0]}")

    def choose(x, y):
        return x if rng.random() < 0.5 else y

    def layer_value(values_a, values_b, l):
        if l < len(values_a) and l < len(values_b):
            return choose(values_a[l], values_b[l])
        return values_a[l] if l < len(values_a) else values_b[l]

    embed_enc = choose(a.embed_dim_enc, b.embed_dim_enc)
    embed_dec = choose(a.embed_dim_dec, b.embed_dim_dec)
    n_enc = choose(a.num_enc_layers, b.num_enc_layers)
    n_dec = choose(a.num_dec_layers, b.num_dec_layers)
    qkv = choose(a.qkv_dim, b.qkv_dim)

    enc_heads, enc_blocks = [], []
    for l in range(n_enc):
        enc_heads.append(layer_value(a.enc_heads, b.enc_heads, l))
        enc_blocks.append(layer_value(list(zip(a.enc_experts, a.enc_expert_ffn_dims)),
                                      list(zip(b.enc_experts, b.enc_expert_ffn_dims)), l))

    self_heads, cross_heads, arbitrary, dec_blocks = [], [], [], []
    for l in range(n_dec):
        self_heads.append(layer_value(a.dec_self_heads, b.dec_self_heads, l))
        cross_heads.append(layer_value(a.dec_cross_heads, b.dec_cross_heads, l))
        arbitrary.append(layer_value(a.dec_arbitrary_attn, b.dec_arbitrary_attn, l))
        dec_blocks.append(layer_value(list(zip(a.dec_experts, a.dec_expert_ffn_dims)),
                                      list(zip(b.dec_experts, b.dec_expert_ffn_dims)), l))

    return Gene(
        embed_dim_enc=embed_enc,
        embed_dim_dec=embed_dec,
        num_enc_layers=n_enc,
        num_dec_layers=n_dec,
        qkv_dim=qkv,
        enc_heads=tuple(enc_heads),
        dec_self_heads=tuple(self_heads),
        dec_cross_heads=tuple(cross_heads),
        dec_arbitrary_attn=tuple(arbitrary),
        enc_experts=tuple(count for count, _ in enc_blocks),
        dec_experts=tuple(count for count, _ in dec_blocks),
        enc_expert_ffn_dims=tuple(widths for _, widths in enc_blocks),
        dec_expert_ffn_dims=tuple(widths for _, widths in dec_blocks),
    )


# ============================================================================
# PARETO FRONT
# ============================================================================

def pareto_front(entries: Sequence[Tuple[float, float]]) -> List[int]:
    """
    Indices of non-dominated (fitness, cost) points, lower is better on both

    A point is dropped iff another is <= on both axes and < on at least one.
    """
    if len(entries) == 0:
        return []
    points = np.asarray(entries, dtype=np.float64)
    f, c = points[:, 0], points[:, 1]
    no_worse = (f[None, :] <= f[:, None]) & (c[None, :] <= c[:, None])
    better = (f[None, :] < f[:, None]) | (c[None, :] < c[:, None])
    dominated = (no_worse & better).any(axis=1)
    return [int(i) for i in np.flatnonzero(~dominated)]


# ============================================================================
# CONSTRAINTS
# ============================================================================

class ConstraintChecker:
    """Caches FLOPs and latency per gene and decides admission"""

    def __init__(self, cfg: EvoConfig, flops_fn: Optional[Callable[[Gene], float]] = None,
                 latency_fn: Optional[Callable[[Gene], float]] = None):
        self.cfg = cfg
        self.flops_fn = flops_fn or (lambda g: count_flops(g, cfg.src_len, cfg.tgt_len))
        self.latency_fn = latency_fn
        if cfg.latency_ms is not None and latency_fn is None:
            raise ConfigError("a latency constraint needs a latency harness")
        self.flops: Dict[Gene, float] = {}
        self.latency: Dict[Gene, float] = {}

    def flops_of(self, gene: Gene) -> float:
        if gene not in self.flops:
            self.flops[gene] = float(self.flops_fn(gene))
        return self.flops[gene]

    def latency_of(self, gene: Gene) -> Optional[float]:
        if self.latency_fn is None:
            return None
        if gene not in self.latency:
            self.latency[gene] = float(self.latency_fn(gene))
        return self.latency[gene]

    def admits(self, gene: Gene) -> bool:
        if self.cfg.flops is not None and self.flops_of(gene) > self.cfg.flops:
            return False
        # FLOPs first; only FLOPs-feasible genes get timed
        if self.cfg.latency_ms is not None and self.latency_of(gene) > self.cfg.latency_ms:
            return False
        return True


def seed_population(space: SearchSpace, cfg: EvoConfig, checker: ConstraintChecker,
                    rng: np.random.Generator) -> Tuple[List[Gene], int]:
    population, attempts = [], 0
    limit = SEED_ATTEMPT_FACTOR * cfg.num_population
    while len(population) < cfg.num_population and attempts < limit:
        attempts += 1
        gene = sample_gene(space, rng)
        if checker.admits(gene):
            population.append(gene)
    if len(population) < cfg.num_population:
        raise InfeasibleConstraintError(
            f"only {len(population)} of {cfg.num_population} random genes met the constraint "
            f"after {attempts} attempts (flops <= {cfg.flops}, latency <= {cfg.latency_ms})"
        )
    return population, attempts


def random_search(space: SearchSpace, cfg: EvoConfig, rng: np.random.Generator,
                  fitness_fn: Optional[Callable[[Gene], float]] = None, samples: int = 1,
                  flops_fn=None, latency_fn=None) -> Gene:
    """Baseline: best of `samples` random constraint-satisfying genes (first one without a fitness)"""
    checker = ConstraintChecker(cfg, flops_fn, latency_fn)
    seeding = EvoConfig(**{**asdict(cfg), 'num_population': samples, 'num_parents': 1})
    candidates, _ = seed_population(space, seeding, checker, rng)
    if fitness_fn is None:
        return candidates[0]
    scores = [fitness_fn(g) for g in candidates]
    return candidates[int(np.argmin(scores))]


# ============================================================================
# SEARCH LOOP
# ============================================================================

def _evaluate(genes: Sequence[Gene], cache: Dict[Gene, float], fitness_fn, workers: int):
    pending = []
    for gene in genes:
        if gene not in cache and gene not in pending:
            pending.append(gene)
    if not pending:
        return

    def job(gene):
        with worker_slot():
            return fitness_fn(gene)

    if workers > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(job, pending))
    else:
        scores = [fitness_fn(g) for g in pending]
    for gene, score in zip(pending, scores):
        cache[gene] = float(score)


def _top(population: Sequence[Gene], cache: Dict[Gene, float], k: int) -> List[Gene]:
    order = sorted(range(len(population)), key=lambda i: (cache[population[i]], i))
    return [population[i] for i in order[:k]]


def evolve(space: SearchSpace, cfg: EvoConfig, fitness_fn: Callable[[Gene], float],
           flops_fn: Optional[Callable[[Gene], float]] = None,
           latency_fn: Optional[Callable[[Gene], float]] = None,
           gold_latency_fn: Optional[Callable[[Gene], float]] = None,
           history_path=None) -> SearchResult:
    """
    Run the evolutionary search

    Args:
        space: search space
        cfg: EvoConfig
        fitness_fn: gene -> validation loss (lower is better); usually
            estimate_fitness bound to a trained supernet
        flops_fn: gene -> FLOPs, analytical by default
        latency_fn: gene -> partially gold latency in ms, used for admission
        gold_latency_fn: gene -> gold latency, measured for the final front
        history_path: JSONL file receiving one record per iteration

    Returns:
        SearchResult with the fitness-best gene, Pareto front and history
    """
    rng = np.random.default_rng(cfg.seed)
    checker = ConstraintChecker(cfg, flops_fn, latency_fn)
    fitness: Dict[Gene, float] = {}
    history = []

    logger.info("=" * 80)
    logger.info(f"EVOLUTIONARY SEARCH: {cfg.num_iterations} iterations, population {cfg.num_population}, "
                f"flops <= {cfg.flops}, latency <= {cfg.latency_ms}")
    logger.info("=" * 80)

    population, attempts = seed_population(space, cfg, checker, rng)
    logger.info(f"Seeded {len(population)} genes in {attempts} attempts")

    for iteration in range(cfg.num_iterations):
        _evaluate(population, fitness, fitness_fn, cfg.workers)
        parents = _top(population, fitness, cfg.num_parents)

        mutants, rejected_mutants = [], 0
        for _ in range(cfg.num_mutations):
            source = population[int(rng.integers(len(population)))]
            child = mutate(source, space, cfg.mutate_prob, rng)
            if checker.admits(child):
                mutants.append(child)
            else:
                rejected_mutants += 1

        children, rejected_children = [], 0
        for _ in range(cfg.num_crossover):
            a = population[int(rng.integers(len(population)))]
            b = population[int(rng.integers(len(population)))]
            child = crossover(a, b, rng)
            if checker.admits(child):
                children.append(child)
            else:
                rejected_children += 1

        record = {
            'iteration': iteration,
            'population': [gene_hash(g) for g in population],
            'fitness': [fitness[g] for g in population],
            'flops': [checker.flops_of(g) for g in population],
            'latency_ms': [checker.latency.get(g) for g in population],
            'best_parent': gene_hash(parents[0]),
            'best_parent_fitness': fitness[parents[0]],
            'admitted_mutations': len(mutants),
            'rejected_mutations': rejected_mutants,
            'admitted_crossover': len(children),
            'rejected_crossover': rejected_children,
            'constraint': {'flops': cfg.flops, 'latency_ms': cfg.latency_ms},
        }
        history.append(record)
        if history_path is not None:
            append_jsonl(history_path, record)
        logger.info(f"Step {iteration + 1}/{cfg.num_iterations}: best fitness {fitness[parents[0]]:.4f}, "
                    f"mutations {len(mutants)}/{cfg.num_mutations}, crossover {len(children)}/{cfg.num_crossover}")

        population = parents + mutants + children

    _evaluate(population, fitness, fitness_fn, cfg.workers)
    best = _top(population, fitness, 1)[0]

    evaluated = list(fitness)
    keep = pareto_front([(fitness[g], checker.flops_of(g)) for g in evaluated])
    front = []
    for i in sorted(keep, key=lambda i: (fitness[evaluated[i]], checker.flops_of(evaluated[i]))):
        gene = evaluated[i]
        latency = gold_latency_fn(gene) if gold_latency_fn is not None else checker.latency.get(gene)
        front.append(ParetoEntry(gene, fitness[gene],
                                 cost_report(gene, cfg.src_len, cfg.tgt_len, latency_ms=latency), latency))

    logger.info(f"Search done: best {gene_hash(best)} fitness {fitness[best]:.4f}, front of {len(front)}")
    return SearchResult(best, fitness[best], front, history)


def export_front(result: SearchResult, out_dir) -> Path:
    """Write every front entry as <rank>_<hash>.gene.yaml plus .cost.yaml, and the best gene"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rank, entry in enumerate(result.front):
        stem = f"{rank:02d}_{gene_hash(entry.gene)}"
        save_gene(out_dir / f"{stem}.gene.yaml", entry.gene)
        report = entry.cost
        report.assumptions['fitness'] = entry.fitness
        save_report(out_dir / f"{stem}.cost.yaml", report)
    save_gene(out_dir / "best_gene.yaml", result.best_gene)
    logger.info(f"Pareto front ({len(result.front)} genes) exported to {out_dir}")
    return out_dir


def _supernet_objectives(net: Supernet, valid_batches: Sequence, latency_spec: Optional[LatencySpec],
                         latency_log, label_smoothing: float):
    batches = list(valid_batches)

    def fitness_fn(gene):
        return estimate_fitness(net, gene, batches, label_smoothing)

    latency_fn = gold_fn = None
    if latency_spec is not None:
        def latency_fn(gene):
            return measure(gene, extract_subnet(net, gene).tensors, latency_spec.partially_gold(), log_path=latency_log)

        def gold_fn(gene):
            return measure(gene, extract_subnet(net, gene).tensors, latency_spec.gold(), log_path=latency_log)
    return fitness_fn, latency_fn, gold_fn


def search_supernet(net: Supernet, cfg: EvoConfig, valid_batches: Sequence,
                    latency_spec: Optional[LatencySpec] = None,
                    history_path=None, latency_log=None, label_smoothing: float = 0.1) -> SearchResult:
    """
    Evolutionary search bound to a trained supernet: fitness is the subnet's validation
    loss, latency is timed on the subnet's slices (partially gold while
    searching, gold for the returned front).
    """
    fitness_fn, latency_fn, gold_fn = _supernet_objectives(net, valid_batches, latency_spec, latency_log,
                                                           label_smoothing)
    return evolve(net.space, cfg, fitness_fn, latency_fn=latency_fn, gold_latency_fn=gold_fn,
                  history_path=history_path)


def random_search_supernet(net: Supernet, cfg: EvoConfig, valid_batches: Sequence,
                           latency_spec: Optional[LatencySpec] = None, samples: int = 1,
                           latency_log=None, label_smoothing: float = 0.1) -> SearchResult:
    """Random-search baseline on a trained supernet, packaged like an evolutionary result"""
    fitness_fn, latency_fn, gold_fn = _supernet_objectives(net, valid_batches, latency_spec, latency_log,
                                                           label_smoothing)
    rng = np.random.default_rng(cfg.seed)
    scored = fitness_fn if samples > 1 else None
    gene = random_search(net.space, cfg, rng, fitness_fn=scored, samples=samples, latency_fn=latency_fn)
    fitness = fitness_fn(gene)
    latency = gold_fn(gene) if gold_fn is not None else None
    entry = ParetoEntry(gene, fitness, cost_report(gene, cfg.src_len, cfg.tgt_len, latency_ms=latency), latency)
    logger.info(f"Random search picked {gene_hash(gene)} (fitness {fitness:.4f}) from {samples} sample(s)")
    return SearchResult(gene, fitness, [entry])
