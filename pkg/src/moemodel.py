"""
Heterogeneous MoE encoder-decoder transformer

Pre-norm encoder/decoder stacks whose FFN sublayers are Switch-style expert
layers with top-1 routing. Every layer may hold a different number of
experts, and experts inside one layer may have different widths. A layer with
a single expert is a plain dense FFN (no router, no gate). Decoder layers
attend to the mean of the last k encoder layer outputs (arbitrary
encoder-decoder attention).

Weights are a flat mapping of parameter name -> Tensor shaped by
parameter_shapes(gene, ...). Batches are [batch, length] id matrices padded
with PAD_ID.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

import tensorcore as tc
from tensorcore import Tensor
from searchspace import Gene
from utils import ShapeError, stable_hash

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ('<pad>', '<bos>', '<eos>', '<unk>')

# Parameter names whose rows are vocabulary or position entries
EMBEDDING_PARAMS = ('enc.embed', 'enc.pos', 'dec.embed', 'dec.pos', 'dec.out_proj')


# ============================================================================
# PARAMETER LAYOUT
# ============================================================================

def _ln_shapes(prefix: str, d: int):
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def _moe_shapes(prefix: str, d: int, widths) -> list:
    shapes = []
    if len(widths) > 1:
        shapes.append((f"{prefix}.router", (len(widths), d)))
    for j, h in enumerate(widths):
        shapes.append((f"{prefix}.expert.{j}.w_in", (h, d)))
        shapes.append((f"{prefix}.expert.{j}.w_out", (d, h)))
    return shapes


def parameter_shapes(gene: Gene, vocab_size: int, max_positions: int) -> Dict[str, Tuple[int, ...]]:
    """
    Name -> shape manifest of every parameter the gene's model uses

    Attention projections map [qkv × d] in and [d × qkv] out; a layer with
    one expert carries no router.
    """
    d_enc, d_dec, q = gene.embed_dim_enc, gene.embed_dim_dec, gene.qkv_dim
    shapes = [('enc.embed', (vocab_size, d_enc)), ('enc.pos', (max_positions, d_enc))]
    for l in range(gene.num_enc_layers):
        p = f"enc.{l}"
        shapes += _ln_shapes(f"{p}.attn_ln", d_enc)
        shapes += [(f"{p}.attn.{n}", (q, d_enc)) for n in ('q', 'k', 'v')]
        shapes.append((f"{p}.attn.o", (d_enc, q)))
        shapes += _ln_shapes(f"{p}.ffn_ln", d_enc)
        shapes += _moe_shapes(f"{p}.moe", d_enc, gene.enc_expert_ffn_dims[l])
    shapes += _ln_shapes('enc.final_ln', d_enc)

    shapes += [('dec.embed', (vocab_size, d_dec)), ('dec.pos', (max_positions, d_dec))]
    for l in range(gene.num_dec_layers):
        p = f"dec.{l}"
        shapes += _ln_shapes(f"{p}.self_ln", d_dec)
        shapes += [(f"{p}.self.{n}", (q, d_dec)) for n in ('q', 'k', 'v')]
        shapes.append((f"{p}.self.o", (d_dec, q)))
        shapes += _ln_shapes(f"{p}.cross_ln", d_dec)
        shapes.append((f"{p}.cross.q", (q, d_dec)))
        shapes += [(f"{p}.cross.{n}", (q, d_enc)) for n in ('k', 'v')]
        shapes.append((f"{p}.cross.o", (d_dec, q)))
        shapes += _ln_shapes(f"{p}.ffn_ln", d_dec)
        shapes += _moe_shapes(f"{p}.moe", d_dec, gene.dec_expert_ffn_dims[l])
    shapes += _ln_shapes('dec.final_ln', d_dec)
    shapes.append(('dec.out_proj', (vocab_size, d_dec)))
    return OrderedDict(shapes)


def init_array(name: str, shape: Tuple[int, ...], seed: int) -> np.ndarray:
    """Deterministic initial value of one parameter, seeded by its name"""
    rng = np.random.default_rng([seed, int(stable_hash(name, 8), 16)])
    dtype = tc.get_dtype()
    if name.endswith('.gain'):
        return np.ones(shape, dtype=dtype)
    if name.endswith('.bias'):
        return np.zeros(shape, dtype=dtype)
    if name in EMBEDDING_PARAMS:
        return rng.normal(0.0, shape[1] ** -0.5, size=shape).astype(dtype)
    if 0 in shape:
        return np.zeros(shape, dtype=dtype)
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_weights(gene: Gene, vocab_size: int, max_positions: int, seed: int = 1) -> Dict[str, Tensor]:
    return OrderedDict(
        (name, Tensor(init_array(name, shape, seed), requires_grad=True, name=name))
        for name, shape in parameter_shapes(gene, vocab_size, max_positions).items()
    )


# ============================================================================
# ROUTING AND EXPERT LAYERS
# ============================================================================

@dataclass
class MoeLayerWeights:
    router: Optional[Tensor]
    experts: List[Tuple[Tensor, Tensor]]

    def __post_init__(self):
        if not self.experts:
            raise ShapeError("MoE layer needs at least one expert")
        if self.router is not None and self.router.shape[0] != len(self.experts):
            raise ShapeError(f"router has {self.router.shape[0]} rows for {len(self.experts)} experts")
        if self.router is None and len(self.experts) > 1:
            raise ShapeError(f"{len(self.experts)} experts need a router")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def widths(self) -> List[int]:
        return [w_in.shape[0] for w_in, _ in self.experts]


@dataclass
class RoutingDecision:
    expert_index: np.ndarray
    probs: Tensor
    gate: Tensor

    @property
    def gate_prob(self) -> np.ndarray:
        return self.gate.data[:, 0]

    def histogram(self, num_experts: int) -> np.ndarray:
        return np.bincount(self.expert_index, minlength=num_experts)


def route_top1(weights: MoeLayerWeights, tokens: Tensor) -> RoutingDecision:
    """Send every token to its single highest-probability expert; ties go to the lowest index"""
    t, d = tokens.shape
    if weights.router is None:
        ones = np.ones((t, 1), dtype=tc.get_dtype())
        return RoutingDecision(np.zeros(t, dtype=np.int64), Tensor(ones), Tensor(ones))
    if weights.router.shape[1] != d:
        raise ShapeError(f"route_top1: tokens {tokens.shape} vs router {weights.router.shape}")
    probs = tc.softmax(tc.linear(tokens, weights.router), axis=-1)
    index = np.argmax(probs.data, axis=1)
    return RoutingDecision(index, probs, tc.pick(probs, index))


def expert_ffn(w_in: Tensor, w_out: Tensor, tokens: Tensor) -> Tensor:
    if w_in.shape[0] == 0:
        return tokens
    return tc.linear(tc.relu(tc.linear(tokens, w_in)), w_out)


def moe_ffn_forward(weights: MoeLayerWeights, tokens: Tensor, decision: RoutingDecision) -> Tensor:
    t = tokens.shape[0]
    if weights.router is None:
        w_in, w_out = weights.experts[0]
        return expert_ffn(w_in, w_out, tokens)
    if t == 0:
        return tokens

    pieces = []
    for j, (w_in, w_out) in enumerate(weights.experts):
        rows = np.flatnonzero(decision.expert_index == j)
        if rows.size == 0:
            continue
        routed = expert_ffn(w_in, w_out, tc.gather_rows(tokens, rows))
        pieces.append((rows, tc.mul(routed, tc.gather_rows(decision.gate, rows))))
    return tc.merge_rows(t, pieces)


def load_balance_loss(decision: RoutingDecision, e: int, valid: Optional[np.ndarray] = None) -> Tensor:
    """e * sum_i f_i * P_i with f_i the routed token fraction and P_i the mean gate probability"""
    index, probs = decision.expert_index, decision.probs
    if valid is not None:
        rows = np.flatnonzero(valid)
        index, probs = index[rows], tc.gather_rows(probs, rows)
    fractions = np.bincount(index, minlength=e) / max(len(index), 1)
    mean_probs = tc.mean(probs, axis=0)
    return tc.scale(tc.sum(tc.mul(mean_probs, Tensor(fractions))), float(e))


def arbitrary_attention_context(encoder_layer_outputs: List[Tensor], k: int) -> Tensor:
    n = len(encoder_layer_outputs)
    if k == -1:
        return encoder_layer_outputs[-1]
    if not 1 <= k <= n:
        raise ShapeError(f"arbitrary attention span {k} outside [1, {n}]")
    return tc.stack_mean(encoder_layer_outputs[n - k:])


# ============================================================================
# ROUTING TRACES
# ============================================================================

@dataclass
class RoutingTrace:
    side: str
    layer: int
    num_experts: int
    token_ids: np.ndarray
    expert_index: np.ndarray
    gate: np.ndarray


def routing_trace_records(trace: List[RoutingTrace]) -> List[Dict]:
    records = []
    for item in trace:
        for token, expert, gate in zip(item.token_ids, item.expert_index, item.gate):
            records.append({
                'token_id': int(token),
                'side': item.side,
                'layer': item.layer,
                'expert': int(expert),
                'gate': float(gate),
            })
    return records


def routed_indices(trace: List[RoutingTrace]) -> Dict[Tuple[str, int], np.ndarray]:
    """Concatenate per-token expert choices by (side, layer)"""
    merged: Dict[Tuple[str, int], List[np.ndarray]] = {}
    for item in trace:
        merged.setdefault((item.side, item.layer), []).append(item.expert_index)
    return {key: np.concatenate(parts) for key, parts in merged.items()}


def routing_entropy(trace: List[RoutingTrace]) -> float:
    """Mean over expert layers of the entropy of the expert-usage distribution"""
    counts: Dict[Tuple[str, int], np.ndarray] = {}
    for item in trace:
        if item.num_experts < 2:
            continue
        key = (item.side, item.layer)
        hist = np.bincount(item.expert_index, minlength=item.num_experts)
        counts[key] = counts.get(key, 0) + hist
    if not counts:
        return 0.0
    entropies = []
    for hist in counts.values():
        p = hist / max(hist.sum(), 1)
        p = p[p > 0]
        entropies.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(entropies))


# ============================================================================
# MODEL
# ============================================================================

@dataclass
class EncoderOutput:
    layer_outputs: List[Tensor]
    key_mask: np.ndarray
    aux_terms: List[Tensor]
    contexts: Dict[int, Tensor] = field(default_factory=dict)


@dataclass
class DecoderState:
    encoder: EncoderOutput
    cross_kv: List[Tuple[Tensor, Tensor]]
    self_k: List[Optional[Tensor]]
    self_v: List[Optional[Tensor]]
    step: int = 0

    def reorder(self, order: np.ndarray):
        """Select batch rows (beam search)"""
        pick_rows = lambda t: None if t is None else Tensor(t.data[order])
        self.self_k = [pick_rows(t) for t in self.self_k]
        self.self_v = [pick_rows(t) for t in self.self_v]
        self.cross_kv = [(pick_rows(k), pick_rows(v)) for k, v in self.cross_kv]
        self.encoder.key_mask = self.encoder.key_mask[order]


class MoeTransformer:
    """
    Executable model for one gene over a weight mapping

    The weights may be views into a larger store; the model never copies them.
    """

    def __init__(self, gene: Gene, weights: Mapping[str, Tensor], dropout: float = 0.0,
                 use_positions: bool = True):
        self.gene = gene
        self.weights = dict(weights)
        if 'dec.out_proj' not in self.weights or 'enc.pos' not in self.weights:
            raise ShapeError("weights lack the output projection or positional table")
        self.vocab_size = self.weights['dec.out_proj'].shape[0]
        self.max_positions = self.weights['enc.pos'].shape[0]

        expected = parameter_shapes(gene, self.vocab_size, self.max_positions)
        for name, shape in expected.items():
            if name not in self.weights:
                raise ShapeError(f"missing parameter {name} of shape {shape}")
            if tuple(self.weights[name].shape) != tuple(shape):
                raise ShapeError(f"parameter {name} has shape {self.weights[name].shape}, gene needs {shape}")

        self.dropout = dropout
        self.use_positions = use_positions
        self.training = False
        self.rng: Optional[np.random.Generator] = None
        self.trace: Optional[List[RoutingTrace]] = None
        self.enc_moe = [self._moe_weights(f"enc.{l}.moe", gene.enc_experts[l]) for l in range(gene.num_enc_layers)]
        self.dec_moe = [self._moe_weights(f"dec.{l}.moe", gene.dec_experts[l]) for l in range(gene.num_dec_layers)]

    def _moe_weights(self, prefix: str, e: int) -> MoeLayerWeights:
        router = self.weights.get(f"{prefix}.router") if e > 1 else None
        experts = [(self.weights[f"{prefix}.expert.{j}.w_in"], self.weights[f"{prefix}.expert.{j}.w_out"])
                   for j in range(e)]
        return MoeLayerWeights(router, experts)

    def parameters(self) -> List[Tensor]:
        return list(self.weights.values())

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return tc.layernorm(x, self.weights[f"{name}.gain"], self.weights[f"{name}.bias"])

    def _drop(self, x: Tensor) -> Tensor:
        if not self.training:
            return x
        return tc.dropout(x, self.dropout, self.rng)

    def _embed(self, side: str, ids: np.ndarray, offset: int = 0) -> Tensor:
        length = ids.shape[1]
        if offset + length > self.max_positions:
            raise ShapeError(f"sequence position {offset + length} exceeds positional table of {self.max_positions}")
        x = tc.embed(self.weights[f"{side}.embed"], ids)
        if self.use_positions:
            x = tc.add(x, tc.embed(self.weights[f"{side}.pos"], np.arange(offset, offset + length)))
        return self._drop(x)

    def _heads(self, x: Tensor, weight: Tensor, heads: int) -> Tensor:
        batch, length, _ = x.shape
        projected = tc.linear(x, weight)
        head_dim = weight.shape[0] // heads
        return tc.transpose(tc.reshape(projected, (batch, length, heads, head_dim)), (0, 2, 1, 3))

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray], out_weight: Tensor) -> Tensor:
        batch, heads, length, head_dim = q.shape
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
        probs = tc.softmax(scores, axis=-1, mask=mask)
        context = tc.matmul(probs, v)
        merged = tc.reshape(tc.transpose(context, (0, 2, 1, 3)), (batch, length, heads * head_dim))
        return tc.linear(merged, out_weight)

    def _moe(self, side: str, layer: int, x: Tensor, valid: np.ndarray, token_ids: np.ndarray,
             with_aux: bool = True) -> Tuple[Tensor, Optional[Tensor]]:
        batch, length, d = x.shape
        weights = (self.enc_moe if side == 'enc' else self.dec_moe)[layer]
        flat = tc.reshape(x, (batch * length, d))
        decision = route_top1(weights, flat)
        out = tc.reshape(moe_ffn_forward(weights, flat, decision), (batch, length, d))

        flat_valid = valid.reshape(-1)
        aux = None
        if with_aux and weights.num_experts > 1 and flat_valid.any():
            aux = load_balance_loss(decision, weights.num_experts, flat_valid)
        if self.trace is not None:
            self.trace.append(RoutingTrace(
                side, layer, weights.num_experts,
                token_ids.reshape(-1)[flat_valid],
                decision.expert_index[flat_valid],
                decision.gate_prob[flat_valid].astype(float),
            ))
        return out, aux

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------

    def encode(self, src_ids) -> EncoderOutput:
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        valid = src != PAD_ID
        key_mask = np.where(valid, 0.0, tc.MASK_VALUE).astype(tc.get_dtype())[:, None, None, :]

        x = self._embed('enc', src)
        outputs, aux_terms = [], []
        for l in range(self.gene.num_enc_layers):
            p = f"enc.{l}"
            h = self._ln(f"{p}.attn_ln", x)
            heads = self.gene.enc_heads[l]
            attn = self._attend(self._heads(h, self.weights[f"{p}.attn.q"], heads),
                                self._heads(h, self.weights[f"{p}.attn.k"], heads),
                                self._heads(h, self.weights[f"{p}.attn.v"], heads),
                                key_mask, self.weights[f"{p}.attn.o"])
            x = tc.add(x, self._drop(attn))
            h = self._ln(f"{p}.ffn_ln", x)
            y, aux = self._moe('enc', l, h, valid, src)
            x = tc.add(x, self._drop(y))
            if aux is not None:
                aux_terms.append(aux)
            outputs.append(x)
        return EncoderOutput(outputs, key_mask, aux_terms)

    def context(self, encoder: EncoderOutput, k: int) -> Tensor:
        """Normalized cross-attention memory for span k (computed once per span)"""
        key = 1 if k == -1 else k
        if key not in encoder.contexts:
            mixed = arbitrary_attention_context(encoder.layer_outputs, k)
            encoder.contexts[key] = self._ln('enc.final_ln', mixed)
        return encoder.contexts[key]

    def _cross_kv(self, encoder: EncoderOutput, layer: int) -> Tuple[Tensor, Tensor]:
        p = f"dec.{layer}"
        memory = self.context(encoder, self.gene.dec_arbitrary_attn[layer])
        heads = self.gene.dec_cross_heads[layer]
        return (self._heads(memory, self.weights[f"{p}.cross.k"], heads),
                self._heads(memory, self.weights[f"{p}.cross.v"], heads))

    # ------------------------------------------------------------------
    # decoder, teacher forced
    # ------------------------------------------------------------------

    def decode(self, encoder: EncoderOutput, tgt_in_ids) -> Tuple[Tensor, List[Tensor]]:
        tgt = np.atleast_2d(np.asarray(tgt_in_ids, dtype=np.int64))
        length = tgt.shape[1]
        valid = tgt != PAD_ID
        causal = np.triu(np.full((length, length), tc.MASK_VALUE), k=1)[None, None]
        self_mask = (causal + np.where(valid, 0.0, tc.MASK_VALUE)[:, None, None, :]).astype(tc.get_dtype())

        y = self._embed('dec', tgt)
        aux_terms = []
        for l in range(self.gene.num_dec_layers):
            p = f"dec.{l}"
            h = self._ln(f"{p}.self_ln", y)
            heads = self.gene.dec_self_heads[l]
            attn = self._attend(self._heads(h, self.weights[f"{p}.self.q"], heads),
                                self._heads(h, self.weights[f"{p}.self.k"], heads),
                                self._heads(h, self.weights[f"{p}.self.v"], heads),
                                self_mask, self.weights[f"{p}.self.o"])
            y = tc.add(y, self._drop(attn))

            h = self._ln(f"{p}.cross_ln", y)
            k, v = self._cross_kv(encoder, l)
            q = self._heads(h, self.weights[f"{p}.cross.q"], self.gene.dec_cross_heads[l])
            y = tc.add(y, self._drop(self._attend(q, k, v, encoder.key_mask, self.weights[f"{p}.cross.o"])))

            h = self._ln(f"{p}.ffn_ln", y)
            out, aux = self._moe('dec', l, h, valid, tgt)
            y = tc.add(y, self._drop(out))
            if aux is not None:
                aux_terms.append(aux)

        y = self._ln('dec.final_ln', y)
        with tc.uncounted():
            logits = tc.linear(y, self.weights['dec.out_proj'])
        return logits, aux_terms

    def forward(self, src_ids, tgt_in_ids) -> Tuple[Tensor, Tensor]:
        """
        Teacher-forced forward pass

        Returns:
            (logits [batch, tgt_len, vocab], summed load-balance loss); 1-D
            inputs give logits of shape [tgt_len, vocab]
        """
        encoder = self.encode(src_ids)
        logits, dec_aux = self.decode(encoder, tgt_in_ids)
        terms = encoder.aux_terms + dec_aux
        aux = terms[0] if terms else Tensor(0.0)
        for term in terms[1:]:
            aux = tc.add(aux, term)
        if np.asarray(tgt_in_ids).ndim == 1:
            logits = tc.reshape(logits, logits.shape[1:])
        return logits, aux

    # ------------------------------------------------------------------
    # decoder, incremental
    # ------------------------------------------------------------------

    def start_decoding(self, encoder: EncoderOutput) -> DecoderState:
        n = self.gene.num_dec_layers
        cross = [self._cross_kv(encoder, l) for l in range(n)]
        return DecoderState(encoder, cross, [None] * n, [None] * n)

    def decode_step(self, state: DecoderState, token_ids: np.ndarray) -> Tensor:
        """Feed one token per batch row; returns next-token logits [batch, vocab]"""
        tokens = np.asarray(token_ids, dtype=np.int64).reshape(-1, 1)
        valid = np.ones_like(tokens, dtype=bool)
        y = self._embed('dec', tokens, offset=state.step)
        for l in range(self.gene.num_dec_layers):
            p = f"dec.{l}"
            h = self._ln(f"{p}.self_ln", y)
            heads = self.gene.dec_self_heads[l]
            k = self._heads(h, self.weights[f"{p}.self.k"], heads)
            v = self._heads(h, self.weights[f"{p}.self.v"], heads)
            if state.self_k[l] is not None:
                k = tc.concat([state.self_k[l], k], axis=2)
                v = tc.concat([state.self_v[l], v], axis=2)
            state.self_k[l], state.self_v[l] = k, v
            q = self._heads(h, self.weights[f"{p}.self.q"], heads)
            y = tc.add(y, self._attend(q, k, v, None, self.weights[f"{p}.self.o"]))

            h = self._ln(f"{p}.cross_ln", y)
            ck, cv = state.cross_kv[l]
            q = self._heads(h, self.weights[f"{p}.cross.q"], self.gene.dec_cross_heads[l])
            y = tc.add(y, self._attend(q, ck, cv, state.encoder.key_mask, self.weights[f"{p}.cross.o"]))

            h = self._ln(f"{p}.ffn_ln", y)
            out, _ = self._moe('dec', l, h, valid, tokens, with_aux=False)
            y = tc.add(y, out)

        y = self._ln('dec.final_ln', y)
        with tc.uncounted():
            logits = tc.linear(y, self.weights['dec.out_proj'])
        state.step += 1
        return tc.reshape(logits, (tokens.shape[0], self.vocab_size))


def forward(gene: Gene, weights: Mapping[str, Tensor], src_ids, tgt_ids) -> Tuple[Tensor, Tensor]:
    return MoeTransformer(gene, weights).forward(src_ids, tgt_ids)


# ============================================================================
# DECODING
# ============================================================================

def greedy_decode(model: MoeTransformer, src_ids, max_len: int, stop_at_eos: bool = True) -> np.ndarray:
    """
    Greedy incremental translation with cached keys/values

    Returns:
        [batch, steps] generated ids; rows are PAD after their EOS
    """
    with tc.no_grad():
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        state = model.start_decoding(model.encode(src))
        tokens = np.full(src.shape[0], BOS_ID, dtype=np.int64)
        finished = np.zeros(src.shape[0], dtype=bool)
        generated = []
        for _ in range(max_len):
            logits = model.decode_step(state, tokens)
            tokens = np.where(finished, PAD_ID, np.argmax(logits.data, axis=1))
            generated.append(tokens)
            finished |= tokens == EOS_ID
            if stop_at_eos and finished.all():
                break
    return np.stack(generated, axis=1)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def beam_decode(model: MoeTransformer, src_ids, max_len: int, beam_size: int = 5,
                length_penalty: float = 0.6) -> np.ndarray:
    """Beam search for one source sentence; hypotheses are ranked by score / length**length_penalty"""
    src = np.asarray(src_ids, dtype=np.int64).reshape(-1)
    with tc.no_grad():
        state = model.start_decoding(model.encode(np.repeat(src[None, :], beam_size, axis=0)))
        hyps = [[] for _ in range(beam_size)]
        scores = np.full(beam_size, -np.inf)
        scores[0] = 0.0
        tokens = np.full(beam_size, BOS_ID, dtype=np.int64)
        finished = []

        for _ in range(max_len):
            log_probs = _log_softmax(model.decode_step(state, tokens).data.astype(np.float64))
            candidates = scores[:, None] + log_probs
            order = np.argsort(-candidates, axis=None, kind='stable')

            origins, next_tokens, next_scores, next_hyps = [], [], [], []
            for flat in order[:2 * beam_size]:
                beam, token = divmod(int(flat), model.vocab_size)
                score = candidates[beam, token]
                if not np.isfinite(score):
                    continue
                sequence = hyps[beam] + [token]
                if token == EOS_ID:
                    finished.append((score / len(sequence) ** length_penalty, sequence))
                    continue
                origins.append(beam)
                next_tokens.append(token)
                next_scores.append(score)
                next_hyps.append(sequence)
                if len(origins) == beam_size:
                    break

            if len(finished) >= beam_size or not origins:
                break
            while len(origins) < beam_size:
                origins.append(origins[0])
                next_tokens.append(next_tokens[0])
                next_scores.append(-np.inf)
                next_hyps.append(next_hyps[0])
            state.reorder(np.asarray(origins))
            tokens = np.asarray(next_tokens, dtype=np.int64)
            scores = np.asarray(next_scores)
            hyps = next_hyps

        if not finished:
            finished = [(scores[b] / max(len(hyps[b]), 1) ** length_penalty, hyps[b])
                        for b in range(beam_size) if np.isfinite(scores[b])]
    best = max(finished, key=lambda item: item[0])[1]
    return np.asarray(best, dtype=np.int64)
