"""
Weight-sharing supernet

One parameter store shaped by the space's maximal gene. Any gene's weights are
front slices of it (rows 0..r, columns 0..c), handed out as numpy views so
that optimizer updates land directly in the shared storage. A gene asking for
e experts always takes supernet experts 0..e-1.

The same store trains a single fixed architecture: a Supernet built over a
one-point space (Supernet.for_gene) is the standalone model, so single-path
sampling and plain training share one code path.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

import tensorcore as tc
from tensorcore import Tensor
from moemodel import MoeTransformer, PAD_ID, init_array, parameter_shapes
from searchspace import Gene, SearchSpace, check_gene, max_gene, sample_gene, gene_hash
from utils import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9


# ============================================================================
# FRONT-SLICE EXTRACTION
# ============================================================================

def front_slice(array: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    if len(shape) != array.ndim:
        raise ShapeError(f"cannot slice {array.shape} to rank-{len(shape)} shape {tuple(shape)}")
    for size, limit in zip(shape, array.shape):
        if not 0 <= size <= limit:
            raise ShapeError(f"front slice {tuple(shape)} exceeds stored shape {array.shape}")
    return array[tuple(slice(0, size) for size in shape)]


def extract_router(supernet_router: Tensor, e: int, d: int) -> Tensor:
    m, d_max = supernet_router.shape
    if not 1 <= e <= m or not 1 <= d <= d_max:
        raise ShapeError(f"router slice e={e}, d={d} outside stored router {supernet_router.shape}")
    return Tensor(front_slice(supernet_router.data, (e, d)))


def extract_expert_ffn(w_in: Tensor, w_out: Tensor, h: int, d: int) -> Tuple[Tensor, Tensor]:
    """Front blocks W_in[0:h, 0:d] and W_out[0:d, 0:h]; h=0 yields the empty identity expert"""
    h_max, d_max = w_in.shape
    if w_out.shape != (d_max, h_max):
        raise ShapeError(f"expert input {w_in.shape} and output {w_out.shape} disagree")
    if not 0 <= h <= h_max or not 1 <= d <= d_max:
        raise ShapeError(f"expert slice h={h}, d={d} outside stored expert {w_in.shape}")
    return Tensor(front_slice(w_in.data, (h, d))), Tensor(front_slice(w_out.data, (d, h)))


# ============================================================================
# OPTIMIZER
# ============================================================================

class SparseAdam:
    """
    Adam with moments and step counts stored per element at supernet shape

    Only the front region a tensor covers is updated, and only when that
    tensor received a gradient; elements outside it keep their state.
    """

    def __init__(self, storage: Dict[str, np.ndarray], betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {name: np.zeros_like(a) for name, a in storage.items()}
        self.v = {name: np.zeros_like(a) for name, a in storage.items()}
        self.steps = {name: np.zeros(a.shape, dtype=np.int64) for name, a in storage.items()}

    def step(self, tensors: Dict[str, Tensor], lr: float) -> List[str]:
        updated = []
        for name, tensor in tensors.items():
            grad = tensor.grad
            if grad is None:
                continue
            m = front_slice(self.m[name], tensor.shape)
            v = front_slice(self.v[name], tensor.shape)
            steps = front_slice(self.steps[name], tensor.shape)
            steps += 1
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1 ** steps)
            v_hat = v / (1.0 - self.beta2 ** steps)
            tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(tensor.data.dtype)
            tensor.grad = None
            updated.append(name)
        return updated


# ============================================================================
# SUPERNET AND SUBNET VIEWS
# ============================================================================

class Supernet:
    def __init__(self, space: SearchSpace, vocab_size: int, max_positions: int, seed: int = 1):
        self.space = space.check()
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.seed = seed
        self.max_gene = max_gene(space)
        self.shapes = parameter_shapes(self.max_gene, vocab_size, max_positions)
        self.storage = {name: init_array(name, shape, seed) for name, shape in self.shapes.items()}
        self.optimizer = SparseAdam(self.storage)
        self.steps_trained = 0
        logger.info(f"Supernet allocated: {len(self.storage)} tensors, {self.num_elements():,} parameters")

    @classmethod
    def for_gene(cls, gene: Gene, vocab_size: int, max_positions: int, seed: int = 1,
                 warm_start: Optional['Supernet'] = None) -> 'Supernet':
        """Store for one fixed architecture, optionally initialized from a trained supernet's slices"""
        net = cls(one_point_space(gene), vocab_size, max_positions, seed)
        if warm_start is not None:
            for name, shape in net.shapes.items():
                net.storage[name][...] = front_slice(warm_start.storage[name], shape)
            logger.info(f"Warm-started {gene_hash(gene)} from supernet slices")
        return net

    def num_elements(self) -> int:
        return int(np.sum([a.size for a in self.storage.values()]))

    def fingerprint(self) -> str:
        return self.space.fingerprint()

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.storage.values())


def one_point_space(gene: Gene) -> SearchSpace:
    """
    Space whose only member is the gene

    Per-dimension choices cover the gene's values; the gene itself is pinned,
    so sampling and the maximal gene both return it and the store is shaped
    exactly at its widths.
    """
    widths = sorted({w for layer in gene.enc_expert_ffn_dims + gene.dec_expert_ffn_dims for w in layer})
    arbitrary = sorted(set(gene.dec_arbitrary_attn))
    heads = sorted(set(gene.enc_heads + gene.dec_self_heads + gene.dec_cross_heads))
    return SearchSpace(
        embed_dim_choices=tuple(sorted({gene.embed_dim_enc, gene.embed_dim_dec})),
        encoder_layer_choices=(gene.num_enc_layers,),
        decoder_layer_choices=(gene.num_dec_layers,),
        qkv_dim_choices=(gene.qkv_dim,),
        head_choices=tuple(heads),
        arbitrary_attn_choices=tuple(arbitrary),
        ffn_dim_choices=tuple(widths),
        max_experts_per_layer=max(gene.enc_experts + gene.dec_experts),
        identity_experts_enabled=0 in widths,
        expert_width_mode='fract',
        fixed_enc_experts=gene.enc_experts,
        fixed_dec_experts=gene.dec_experts,
        fixed_gene=gene,
    ).check()


@dataclass
class SubnetView:
    gene: Gene
    # parameter name -> front extent along each axis
    slices: Dict[str, Tuple[int, ...]]
    tensors: Dict[str, Tensor] = field(repr=False)

    def model(self, dropout: float = 0.0, use_positions: bool = True) -> MoeTransformer:
        return MoeTransformer(self.gene, self.tensors, dropout=dropout, use_positions=use_positions)

    def num_elements(self) -> int:
        return int(np.sum([np.prod(shape, dtype=np.int64) for shape in self.slices.values()]))

    def coverage(self, net: Supernet) -> float:
        return self.num_elements() / net.num_elements()


def extract_subnet(net: Supernet, gene: Gene, copy: bool = False) -> SubnetView:
    """
    Slice the gene's weights out of the supernet

    Views share storage with the supernet unless copy=True.
    """
    check_gene(net.space, gene)
    shapes = parameter_shapes(gene, net.vocab_size, net.max_positions)
    tensors = {}
    for name, shape in shapes.items():
        if name not in net.storage:
            raise ShapeError(f"supernet has no tensor {name}")
        view = front_slice(net.storage[name], shape)
        tensors[name] = Tensor(view.copy() if copy else view, requires_grad=True, name=name)
    return SubnetView(gene, dict(shapes), tensors)


# ============================================================================
# TRAINING STEPS
# ============================================================================

def batch_loss(model: MoeTransformer, batch, label_smoothing: float, aux_loss_coeff: float):
    """
    Returns:
        (total loss, cross-entropy, load-balance loss) tensors
    """
    logits, aux = model.forward(batch.src, batch.tgt_in)
    b, length, vocab = logits.shape
    ce = tc.cross_entropy(tc.reshape(logits, (b * length, vocab)), batch.tgt_out.reshape(-1),
                          label_smoothing=label_smoothing, ignore_index=PAD_ID)
    loss = tc.add(ce, tc.scale(aux, aux_loss_coeff)) if aux_loss_coeff else ce
    return loss, ce, aux


def train_on_gene(net: Supernet, gene: Gene, batch, lr: float, label_smoothing: float = 0.1,
                  aux_loss_coeff: float = 0.01, dropout: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> Dict:
    view = extract_subnet(net, gene)
    model = view.model(dropout=dropout)
    model.training = True
    model.rng = rng

    with tc.Tape() as tape:
        loss, ce, aux = batch_loss(model, batch, label_smoothing, aux_loss_coeff)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise NumericalError(
            f"non-finite loss {loss_value} at step {net.steps_trained}",
            diagnostics={'step': net.steps_trained, 'gene': gene_hash(gene), 'loss': loss_value,
                         'ce': ce.item(), 'aux': aux.item()},
        )
    tape.backward(loss)

    updated = net.optimizer.step(view.tensors, lr)
    for name in updated:
        if not np.isfinite(view.tensors[name].data).all():
            raise NumericalError(
                f"parameter {name} became non-finite at step {net.steps_trained}",
                diagnostics={'step': net.steps_trained, 'gene': gene_hash(gene), 'tensor': name},
            )
    net.steps_trained += 1
    return {
        'loss': loss_value,
        'ce': ce.item(),
        'aux_loss': aux.item(),
        'gene': gene_hash(gene),
        'updated_tensors': len(updated),
    }


def spos_train_step(net: Supernet, batch, rng: np.random.Generator, lr: float,
                    label_smoothing: float = 0.1, aux_loss_coeff: float = 0.01, dropout: float = 0.0,
                    dropout_rng: Optional[np.random.Generator] = None) -> Dict:
    """Sample one gene and train its slices on the batch"""
    if batch.num_pairs == 0:
        raise ConfigError("spos_train_step needs a non-empty batch")
    gene = sample_gene(net.space, rng)
    return train_on_gene(net, gene, batch, lr, label_smoothing, aux_loss_coeff, dropout, dropout_rng)


def estimate_fitness(net: Supernet, gene: Gene, batches: Iterable, label_smoothing: float = 0.1) -> float:
    """Token-weighted mean label-smoothed cross-entropy of the subnet; never updates weights"""
    model = extract_subnet(net, gene).model()
    total, tokens = 0.0, 0
    with tc.no_grad():
        for batch in batches:
            count = int((batch.tgt_out != PAD_ID).sum())
            if count == 0:
                continue
            _, ce, _ = batch_loss(model, batch, label_smoothing, 0.0)
            total += ce.item() * count
            tokens += count
    if tokens == 0:
        raise ConfigError("estimate_fitness needs a non-empty validation set")
    return total / tokens


def rank_correlation(net: Supernet, genes: Sequence[Gene], batches: Iterable,
                     standalone_losses: Sequence[float], label_smoothing: float = 0.1) -> float:
    """
    Spearman correlation between supernet fitness and stand-alone validation losses

    Both sides are losses, so a supernet that ranks architectures the way
    separate training does scores near +1.
    """
    if len(genes) != len(standalone_losses) or len(genes) < 2:
        raise ConfigError(f"rank_correlation needs >= 2 genes with one stand-alone loss each "
                          f"(got {len(genes)} genes, {len(standalone_losses)} losses)")
    batches = list(batches)
    fitness = [estimate_fitness(net, gene, batches, label_smoothing) for gene in genes]
    rho, _ = spearmanr(fitness, standalone_losses)
    logger.info(f"Supernet/stand-alone rank correlation over {len(genes)} genes: {rho:.3f}")
    return float(rho)


# ============================================================================
# CHECKPOINTS
# ============================================================================

OPTIMIZER_SLOTS = ('m', 'v', 'steps')


def save_supernet(net: Supernet, path) -> Path:
    """Weights plus the sparse-Adam moments and per-element step counts"""
    arrays = dict(net.storage)
    for slot in OPTIMIZER_SLOTS:
        for name, array in getattr(net.optimizer, slot).items():
            arrays[f"adam.{slot}.{name}"] = array
    extra = {
        'kind': 'supernet',
        'space_hash': net.fingerprint(),
        'space': net.space.to_dict(),
        'vocab_size': net.vocab_size,
        'max_positions': net.max_positions,
        'seed': net.seed,
        'steps_trained': net.steps_trained,
        'optimizer_state': True,
    }
    manifest = tc.save_tensors(path, arrays, extra)
    logger.info(f"Supernet checkpoint written to {manifest}")
    return manifest


def load_supernet(path, space: Optional[SearchSpace] = None) -> Supernet:
    arrays, manifest = tc.load_tensors(path)
    stored_space = SearchSpace.from_dict(manifest['space'])
    if manifest.get('space_hash') != stored_space.fingerprint():
        raise ConfigError(f"Checkpoint {path} manifest is inconsistent with its own space")
    if space is not None and space.fingerprint() != manifest['space_hash']:
        raise ConfigError(f"Checkpoint {path} was trained on space {manifest['space_hash']}, "
                          f"not {space.fingerprint()}")

    net = Supernet(stored_space, manifest['vocab_size'], manifest['max_positions'], manifest.get('seed', 1))
    for name in net.storage:
        if name not in arrays:
            raise ConfigError(f"Checkpoint {path} lacks tensor {name}")
        net.storage[name][...] = arrays[name]
    if manifest.get('optimizer_state'):
        for slot in OPTIMIZER_SLOTS:
            state = getattr(net.optimizer, slot)
            for name in state:
                key = f"adam.{slot}.{name}"
                if key not in arrays:
                    raise ConfigError(f"Checkpoint {path} lacks optimizer state {key}")
                state[name][...] = arrays[key]
    else:
        logger.warning(f"Checkpoint {path} carries no optimizer state; Adam restarts from zero")
    net.steps_trained = manifest.get('steps_trained', 0)
    return net
