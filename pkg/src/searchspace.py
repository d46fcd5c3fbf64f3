"""
Heterogeneous MoE search space

A SearchSpace is the menu of legal choices per architecture dimension; a Gene
is one concrete encoder-decoder MoE architecture drawn from it. Both are
immutable values. Genes travel on disk as YAML documents; hyphenated
per-layer strings ("5-1-1-1-2-1", "[2048-1024]-3072") are accepted on input
and normalized to explicit per-layer lists.
"""

import logging
import re
import itertools
from dataclasses import dataclass, field, asdict, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from utils import ConfigError, GeneParseError, read_yaml, write_yaml, stable_hash

logger = logging.getLogger(__name__)

WIDTH_MODES = ('fract', 'std')

_SPACE_LIST_FIELDS = (
    'embed_dim_choices',
    'encoder_layer_choices',
    'decoder_layer_choices',
    'qkv_dim_choices',
    'head_choices',
    'arbitrary_attn_choices',
    'ffn_dim_choices',
)


@dataclass(frozen=True)
class SearchSpace:
    embed_dim_choices: Tuple[int, ...]
    encoder_layer_choices: Tuple[int, ...]
    decoder_layer_choices: Tuple[int, ...]
    qkv_dim_choices: Tuple[int, ...]
    head_choices: Tuple[int, ...]
    arbitrary_attn_choices: Tuple[int, ...]
    ffn_dim_choices: Tuple[int, ...]
    max_experts_per_layer: int
    identity_experts_enabled: bool = False
    # 'fract': every expert picks its own width; 'std': one width per layer
    expert_width_mode: str = 'fract'
    # manual expert placement: fixed per-layer expert counts, or None to search
    fixed_enc_experts: Optional[Tuple[int, ...]] = None
    fixed_dec_experts: Optional[Tuple[int, ...]] = None
    # a single pinned architecture; sampling, mutation and the maximal gene all return it
    fixed_gene: Optional['Gene'] = None

    @property
    def expert_count_choices(self) -> Tuple[int, ...]:
        return tuple(range(1, self.max_experts_per_layer + 1))

    @property
    def max_enc_layers(self) -> int:
        return max(self.encoder_layer_choices)

    @property
    def max_dec_layers(self) -> int:
        return max(self.decoder_layer_choices)

    def violations(self) -> List[str]:
        problems = []
        for name in _SPACE_LIST_FIELDS:
            values = list(getattr(self, name))
            if not values:
                problems.append(f"{name} is empty")
                continue
            if values != sorted(values):
                problems.append(f"{name} is not sorted ascending: {values}")
            if len(set(values)) != len(values):
                problems.append(f"{name} has duplicates: {values}")
        if problems:
            return problems

        if self.max_experts_per_layer < 1:
            problems.append(f"max_experts_per_layer must be >= 1, got {self.max_experts_per_layer}")
        for name in ('embed_dim_choices', 'encoder_layer_choices', 'decoder_layer_choices',
                     'qkv_dim_choices', 'head_choices'):
            if min(getattr(self, name)) < 1:
                problems.append(f"{name} must hold positive ints")
        for embed in self.embed_dim_choices:
            for heads in self.head_choices:
                if embed % heads:
                    problems.append(f"embed_dim {embed} not divisible by head count {heads}")
        for qkv in self.qkv_dim_choices:
            for heads in self.head_choices:
                if qkv % heads:
                    problems.append(f"qkv_dim {qkv} not divisible by head count {heads}")
        for k in self.arbitrary_attn_choices:
            if k != -1 and not (1 <= k <= min(self.encoder_layer_choices)):
                problems.append(f"arbitrary attention {k} must be -1 or in [1, {min(self.encoder_layer_choices)}]")
        if min(self.ffn_dim_choices) < 0:
            problems.append("ffn_dim_choices must be non-negative")
        if 0 in self.ffn_dim_choices and not self.identity_experts_enabled:
            problems.append("ffn width 0 requires identity_experts_enabled")
        if self.ffn_dim_choices and max(self.ffn_dim_choices) < 1:
            problems.append("ffn_dim_choices needs at least one positive width")
        if self.expert_width_mode not in WIDTH_MODES:
            problems.append(f"expert_width_mode must be one of {WIDTH_MODES}")
        for side, pattern, depth in (('enc', self.fixed_enc_experts, self.max_enc_layers),
                                     ('dec', self.fixed_dec_experts, self.max_dec_layers)):
            if pattern is None:
                continue
            if len(pattern) < depth:
                problems.append(f"fixed_{side}_experts covers {len(pattern)} layers, need {depth}")
            for count in pattern:
                if not 1 <= count <= self.max_experts_per_layer:
                    problems.append(f"fixed_{side}_experts value {count} outside [1, {self.max_experts_per_layer}]")
        if self.fixed_gene is not None and not problems:
            problems.extend(f"pinned architecture: {p}" for p in validate_gene(self, self.fixed_gene))
        return problems

    def check(self) -> 'SearchSpace':
        problems = self.violations()
        if problems:
            raise ConfigError("Invalid search space: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        if self.fixed_gene is not None:
            data['fixed_gene'] = self.fixed_gene.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SearchSpace':
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown search space fields: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in ('fixed_enc_experts', 'fixed_dec_experts'):
                if value is None:
                    kwargs[key] = None
                elif isinstance(value, str):
                    kwargs[key] = parse_layer_counts(value)
                else:
                    kwargs[key] = tuple(int(v) for v in value)
            elif key == 'fixed_gene':
                kwargs[key] = None if value is None else gene_from_dict(value)
            elif key in _SPACE_LIST_FIELDS:
                kwargs[key] = tuple(int(v) for v in value)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"Incomplete search space: {e}")

    def fingerprint(self) -> str:
        return stable_hash(self.to_dict())


@dataclass(frozen=True)
class Gene:
    embed_dim_enc: int
    embed_dim_dec: int
    num_enc_layers: int
    num_dec_layers: int
    qkv_dim: int
    enc_heads: Tuple[int, ...]
    dec_self_heads: Tuple[int, ...]
    dec_cross_heads: Tuple[int, ...]
    dec_arbitrary_attn: Tuple[int, ...]
    enc_experts: Tuple[int, ...]
    dec_experts: Tuple[int, ...]
    enc_expert_ffn_dims: Tuple[Tuple[int, ...], ...]
    dec_expert_ffn_dims: Tuple[Tuple[int, ...], ...]

    def to_dict(self) -> Dict:
        return {
            'embed_dim_enc': self.embed_dim_enc,
            'embed_dim_dec': self.embed_dim_dec,
            'num_enc_layers': self.num_enc_layers,
            'num_dec_layers': self.num_dec_layers,
            'qkv_dim': self.qkv_dim,
            'enc_heads': list(self.enc_heads),
            'dec_self_heads': list(self.dec_self_heads),
            'dec_cross_heads': list(self.dec_cross_heads),
            'dec_arbitrary_attn': list(self.dec_arbitrary_attn),
            'enc_experts': list(self.enc_experts),
            'dec_experts': list(self.dec_experts),
            'enc_expert_ffn_dims': [list(w) for w in self.enc_expert_ffn_dims],
            'dec_expert_ffn_dims': [list(w) for w in self.dec_expert_ffn_dims],
        }

    @property
    def total_experts(self) -> int:
        return sum(self.enc_experts) + sum(self.dec_experts)

    def describe(self) -> str:
        enc = "-".join(str(e) for e in self.enc_experts)
        dec = "-".join(str(e) for e in self.dec_experts)
        widths = f"{format_layer_widths(self.enc_expert_ffn_dims)} / {format_layer_widths(self.dec_expert_ffn_dims)}"
        return f"d={self.embed_dim_enc}/{self.embed_dim_dec} enc[{enc}] dec[{dec}] ffn {widths}"


GENE_FIELDS = tuple(Gene.__dataclass_fields__)


# ============================================================================
# HYPHENATED LAYER NOTATION
# ============================================================================

_GROUP_PATTERN = re.compile(r'\[([^\]]*)\]|(\d+)')


def parse_layer_counts(text: str) -> Tuple[int, ...]:
    """Parse '5-1-1-1-2-1' into (5, 1, 1, 1, 2, 1)"""
    try:
        return tuple(int(part) for part in str(text).strip().split('-'))
    except ValueError:
        raise ConfigError(f"Malformed per-layer count string: {text!r}")


def parse_layer_widths(text: str, counts: Sequence[int]) -> Tuple[Tuple[int, ...], ...]:
    """
    Parse per-layer expert widths

    A bracketed group lists one width per expert; a bare number is a
    std-expert layer whose experts all share that width.

    Args:
        text: e.g. '[2048-3072-2048]-[3072-1024]-3072'
        counts: expert count per layer, used to expand bare numbers

    Returns:
        Tuple of per-layer width tuples
    """
    groups = []
    position = 0
    text = str(text).strip()
    while position < len(text):
        if text[position] == '-':
            position += 1
            continue
        match = _GROUP_PATTERN.match(text, position)
        if not match:
            raise ConfigError(f"Malformed width string {text!r} at offset {position}")
        if match.group(1) is not None:
            groups.append(tuple(int(w) for w in match.group(1).split('-') if w))
        else:
            # bare width, expanded once the layer's expert count is known
            groups.append(int(match.group(2)))
        position = match.end()

    if len(groups) != len(counts):
        raise ConfigError(f"Width string has {len(groups)} layers, expert counts have {len(counts)}")
    layers = []
    for group, count in zip(groups, counts):
        layers.append((group,) * count if isinstance(group, int) else group)
    return tuple(layers)


def format_layer_widths(widths: Sequence[Sequence[int]]) -> str:
    parts = []
    for layer in widths:
        if len(set(layer)) == 1:
            parts.append(str(layer[0]))
        else:
            parts.append("[" + "-".join(str(w) for w in layer) + "]")
    return "-".join(parts)


# ============================================================================
# CONSTRUCTION
# ============================================================================

def gene_from_dict(data: Dict) -> Gene:
    missing = [name for name in GENE_FIELDS if name not in data]
    if missing:
        raise GeneParseError(f"Gene document is missing fields {missing}", 0)

    def ints(value):
        if isinstance(value, str):
            return parse_layer_counts(value)
        return tuple(int(v) for v in value)

    enc_experts = ints(data['enc_experts'])
    dec_experts = ints(data['dec_experts'])

    def widths(value, counts):
        if isinstance(value, str):
            return parse_layer_widths(value, counts)
        return tuple(tuple(int(w) for w in layer) for layer in value)

    try:
        return Gene(
            embed_dim_enc=int(data['embed_dim_enc']),
            embed_dim_dec=int(data['embed_dim_dec']),
            num_enc_layers=int(data['num_enc_layers']),
            num_dec_layers=int(data['num_dec_layers']),
            qkv_dim=int(data['qkv_dim']),
            enc_heads=ints(data['enc_heads']),
            dec_self_heads=ints(data['dec_self_heads']),
            dec_cross_heads=ints(data['dec_cross_heads']),
            dec_arbitrary_attn=ints(data['dec_arbitrary_attn']),
            enc_experts=enc_experts,
            dec_experts=dec_experts,
            enc_expert_ffn_dims=widths(data['enc_expert_ffn_dims'], enc_experts),
            dec_expert_ffn_dims=widths(data['dec_expert_ffn_dims'], dec_experts),
        )
    except (TypeError, ValueError) as e:
        raise GeneParseError(f"Gene document has a malformed value: {e}", 0)


def _pick(rng: np.random.Generator, choices: Sequence[int]) -> int:
    return int(choices[int(rng.integers(len(choices)))])


def sample_layer_widths(space: SearchSpace, experts: int, rng: np.random.Generator) -> Tuple[int, ...]:
    if space.expert_width_mode == 'std':
        return tuple([_pick(rng, space.ffn_dim_choices)] * experts)
    return tuple(_pick(rng, space.ffn_dim_choices) for _ in range(experts))


def _sample_expert_count(space: SearchSpace, fixed: Optional[Tuple[int, ...]], layer: int,
                         rng: np.random.Generator) -> int:
    if fixed is not None:
        return fixed[layer]
    return _pick(rng, space.expert_count_choices)


def sample_gene(space: SearchSpace, rng: np.random.Generator) -> Gene:
    """
    Draw one architecture uniformly and independently per dimension

    Args:
        space: a valid SearchSpace
        rng: numpy Generator; the same seed yields the same gene

    Returns:
        Gene satisfying every invariant of the space
    """
    if space.fixed_gene is not None:
        return space.fixed_gene
    embed_enc = _pick(rng, space.embed_dim_choices)
    embed_dec = _pick(rng, space.embed_dim_choices)
    n_enc = _pick(rng, space.encoder_layer_choices)
    n_dec = _pick(rng, space.decoder_layer_choices)
    qkv = _pick(rng, space.qkv_dim_choices)

    enc_heads, enc_experts, enc_widths = [], [], []
    for layer in range(n_enc):
        enc_heads.append(_pick(rng, space.head_choices))
        count = _sample_expert_count(space, space.fixed_enc_experts, layer, rng)
        enc_experts.append(count)
        enc_widths.append(sample_layer_widths(space, count, rng))

    self_heads, cross_heads, arbitrary, dec_experts, dec_widths = [], [], [], [], []
    for layer in range(n_dec):
        self_heads.append(_pick(rng, space.head_choices))
        cross_heads.append(_pick(rng, space.head_choices))
        arbitrary.append(_pick(rng, space.arbitrary_attn_choices))
        count = _sample_expert_count(space, space.fixed_dec_experts, layer, rng)
        dec_experts.append(count)
        dec_widths.append(sample_layer_widths(space, count, rng))

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


def max_gene(space: SearchSpace) -> Gene:
    if space.fixed_gene is not None:
        return space.fixed_gene
    n_enc = space.max_enc_layers
    n_dec = space.max_dec_layers
    head = max(space.head_choices)
    width = max(space.ffn_dim_choices)
    enc_counts = (space.fixed_enc_experts[:n_enc] if space.fixed_enc_experts
                  else (space.max_experts_per_layer,) * n_enc)
    dec_counts = (space.fixed_dec_experts[:n_dec] if space.fixed_dec_experts
                  else (space.max_experts_per_layer,) * n_dec)
    return Gene(
        embed_dim_enc=max(space.embed_dim_choices),
        embed_dim_dec=max(space.embed_dim_choices),
        num_enc_layers=n_enc,
        num_dec_layers=n_dec,
        qkv_dim=max(space.qkv_dim_choices),
        enc_heads=(head,) * n_enc,
        dec_self_heads=(head,) * n_dec,
        dec_cross_heads=(head,) * n_dec,
        dec_arbitrary_attn=(max(space.arbitrary_attn_choices),) * n_dec,
        enc_experts=tuple(enc_counts),
        dec_experts=tuple(dec_counts),
        enc_expert_ffn_dims=tuple((width,) * count for count in enc_counts),
        dec_expert_ffn_dims=tuple((width,) * count for count in dec_counts),
    )


def manual_gene(space: SearchSpace, enc_pattern, dec_pattern, embed_dim: Optional[int] = None,
                heads: Optional[int] = None, width: Optional[int] = None,
                arbitrary_attn: int = -1) -> Gene:
    """
    Hand-designed architecture at the space maxima with the given expert placement

    Patterns may be hyphen strings ('1-2-1-2-1-2') or int sequences; the
    decoder depth is the decoder pattern's length.
    """
    enc_counts = parse_layer_counts(enc_pattern) if isinstance(enc_pattern, str) else tuple(enc_pattern)
    dec_counts = parse_layer_counts(dec_pattern) if isinstance(dec_pattern, str) else tuple(dec_pattern)
    embed_dim = embed_dim or max(space.embed_dim_choices)
    heads = heads or max(space.head_choices)
    width = width if width is not None else max(space.ffn_dim_choices)
    return Gene(
        embed_dim_enc=embed_dim,
        embed_dim_dec=embed_dim,
        num_enc_layers=len(enc_counts),
        num_dec_layers=len(dec_counts),
        qkv_dim=max(space.qkv_dim_choices),
        enc_heads=(heads,) * len(enc_counts),
        dec_self_heads=(heads,) * len(dec_counts),
        dec_cross_heads=(heads,) * len(dec_counts),
        dec_arbitrary_attn=(arbitrary_attn,) * len(dec_counts),
        enc_experts=enc_counts,
        dec_experts=dec_counts,
        enc_expert_ffn_dims=tuple((width,) * c for c in enc_counts),
        dec_expert_ffn_dims=tuple((width,) * c for c in dec_counts),
    )


def wmt_space(max_experts: int = 6, identity_experts: bool = False,
              expert_width_mode: str = 'fract') -> SearchSpace:
    ffn = (0, 3072) if identity_experts else (1024, 2048, 3072)
    return SearchSpace(
        embed_dim_choices=(512, 640),
        encoder_layer_choices=(6,),
        decoder_layer_choices=(1, 2, 3, 4, 5, 6),
        qkv_dim_choices=(512,),
        head_choices=(4, 8),
        arbitrary_attn_choices=(-1, 1, 2),
        ffn_dim_choices=ffn,
        max_experts_per_layer=max_experts,
        identity_experts_enabled=identity_experts,
        expert_width_mode=expert_width_mode,
    )


# ============================================================================
# VALIDATION
# ============================================================================

def _check_layer_list(problems: List[str], name: str, values, expected_len: int) -> bool:
    try:
        actual = len(values)
    except TypeError:
        problems.append(f"{name} is not a list")
        return False
    if actual != expected_len:
        problems.append(f"{name} has {actual} entries, expected {expected_len}")
        return False
    return True


def validate_gene(space: SearchSpace, gene: Gene) -> List[str]:
    """
    List every way the gene breaks the space's rules; an empty list means valid

    Never raises: malformed genes produce violation strings instead.
    """
    problems = []

    def check_choice(name, value, choices):
        if value not in choices:
            problems.append(f"{name}={value} not in {list(choices)}")

    try:
        check_choice('embed_dim_enc', gene.embed_dim_enc, space.embed_dim_choices)
        check_choice('embed_dim_dec', gene.embed_dim_dec, space.embed_dim_choices)
        check_choice('num_enc_layers', gene.num_enc_layers, space.encoder_layer_choices)
        check_choice('num_dec_layers', gene.num_dec_layers, space.decoder_layer_choices)
        check_choice('qkv_dim', gene.qkv_dim, space.qkv_dim_choices)

        sides = (
            ('enc', gene.num_enc_layers, gene.enc_experts, gene.enc_expert_ffn_dims,
             space.fixed_enc_experts, (('enc_heads', gene.enc_heads, space.head_choices),)),
            ('dec', gene.num_dec_layers, gene.dec_experts, gene.dec_expert_ffn_dims,
             space.fixed_dec_experts, (('dec_self_heads', gene.dec_self_heads, space.head_choices),
                                       ('dec_cross_heads', gene.dec_cross_heads, space.head_choices),
                                       ('dec_arbitrary_attn', gene.dec_arbitrary_attn,
                                        space.arbitrary_attn_choices))),
        )
        for side, depth, experts, widths, fixed, per_layer in sides:
            for name, values, choices in per_layer:
                if _check_layer_list(problems, name, values, depth):
                    for layer, value in enumerate(values):
                        check_choice(f"{name}[{layer}]", value, choices)
            if side == 'dec' and len(gene.dec_arbitrary_attn) == depth:
                for layer, k in enumerate(gene.dec_arbitrary_attn):
                    if k != -1 and k > gene.num_enc_layers:
                        problems.append(f"dec_arbitrary_attn[{layer}]={k} exceeds encoder depth {gene.num_enc_layers}")

            counts_ok = _check_layer_list(problems, f"{side}_experts", experts, depth)
            widths_ok = _check_layer_list(problems, f"{side}_expert_ffn_dims", widths, depth)
            if not (counts_ok and widths_ok):
                continue
            for layer in range(depth):
                count = experts[layer]
                if not 1 <= count <= space.max_experts_per_layer:
                    problems.append(f"{side}_experts[{layer}]={count} outside [1, {space.max_experts_per_layer}]")
                    continue
                if fixed is not None and layer < len(fixed) and fixed[layer] != count:
                    problems.append(f"{side}_experts[{layer}]={count} differs from fixed placement {fixed[layer]}")
                layer_widths = widths[layer]
                if len(layer_widths) != count:
                    problems.append(f"{side}_expert_ffn_dims[{layer}] lists {len(layer_widths)} widths "
                                    f"but {side}_experts[{layer}]={count}")
                    continue
                for j, width in enumerate(layer_widths):
                    check_choice(f"{side}_expert_ffn_dims[{layer}][{j}]", width, space.ffn_dim_choices)
                if space.expert_width_mode == 'std' and len(set(layer_widths)) > 1:
                    problems.append(f"{side}_expert_ffn_dims[{layer}] mixes widths in std-expert mode")
        if space.fixed_gene is not None and gene != space.fixed_gene:
            problems.append(f"gene differs from the pinned architecture {gene_hash(space.fixed_gene)}")
    except (AttributeError, TypeError) as e:
        problems.append(f"malformed gene: {e}")
    return problems


def check_gene(space: SearchSpace, gene: Gene) -> Gene:
    problems = validate_gene(space, gene)
    if problems:
        raise ConfigError("Invalid gene: " + "; ".join(problems))
    return gene


# ============================================================================
# TEXT FORMAT
# ============================================================================

def encode_gene(gene: Gene) -> str:
    return yaml.safe_dump(gene.to_dict(), sort_keys=False, default_flow_style=None)


def decode_gene(text: str) -> Gene:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        offset = mark.index if mark is not None else 0
        raise GeneParseError(f"Malformed gene document: {e.problem}", offset)
    except yaml.YAMLError as e:
        raise GeneParseError(f"Malformed gene document: {e}", 0)
    if not isinstance(data, dict):
        raise GeneParseError("Gene document must be a mapping", 0)
    return gene_from_dict(data)


def gene_hash(gene: Gene) -> str:
    return stable_hash(gene.to_dict())


def save_gene(path, gene: Gene):
    return write_yaml(path, gene.to_dict())


def load_gene(path) -> Gene:
    with open(path, 'r') as f:
        return decode_gene(f.read())


def save_space(path, space: SearchSpace):
    return write_yaml(path, space.to_dict())


def load_space(path) -> SearchSpace:
    return SearchSpace.from_dict(read_yaml(path)).check()


# ============================================================================
# ENUMERATION
# ============================================================================

def enumerate_layer_configs(space: SearchSpace) -> Iterator[Tuple[int, Tuple[int, ...]]]:
    """Every (expert count, per-expert widths) configuration of one layer"""
    for count in space.expert_count_choices:
        if space.expert_width_mode == 'std':
            for width in space.ffn_dim_choices:
                yield count, (width,) * count
        else:
            for widths in itertools.product(space.ffn_dim_choices, repeat=count):
                yield count, tuple(widths)
