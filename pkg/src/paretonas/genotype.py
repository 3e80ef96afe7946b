"""Position-based genotype for convolutional/capsule classifier architectures.

A genotype is an ordered tuple of layer descriptors plus a set of skip
connections and an input resize. Convolutional geometry follows "valid"
arithmetic (no padding); fully connected layers collapse the spatial grid
to a single position and always use a kernel spanning their whole input.
Every search operator here is a pure function of its inputs and an integer
seed, and returns genotypes that satisfy the structural invariants checked
by :func:`validate`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from dataclasses import dataclass
from enum import Enum

DEFAULT_KERNEL_CHOICES = (3, 5, 9)
DEFAULT_STRIDE_CHOICES = (1, 2)
DEFAULT_CHANNEL_RANGE = (1, 64)
DEFAULT_CAPSULE_RANGE = (1, 64)
DEFAULT_MIN_LAYERS = 2
DEFAULT_MAX_LAYERS = 10

# Probability that a middle layer switches to the fully connected tail even
# though a convolution would still fit, and the weights used when drawing how
# many skip connections a fresh genotype gets.
_FC_TRANSITION_PROB = 0.2
_SKIP_COUNT_CHOICES = (0, 0, 1, 1, 2)


class UnsatisfiableSpaceError(ValueError):
    """No valid genotype exists for the requested search space."""


class GenotypeDecodeError(ValueError):
    """Serialized genotype violates the published schema."""


class LayerType(Enum):
    CONV = "conv"
    CONV_CAPSULE = "conv_capsule"
    FULLY_CONNECTED = "fully_connected"
    FULLY_CONNECTED_CAPSULE = "fully_connected_capsule"

    @property
    def is_capsule(self) -> bool:
        return self in (LayerType.CONV_CAPSULE, LayerType.FULLY_CONNECTED_CAPSULE)

    @property
    def is_spatial(self) -> bool:
        """True for layers that slide a kernel over a feature-map grid."""
        return self in (LayerType.CONV, LayerType.CONV_CAPSULE)


@dataclass(frozen=True)
class LayerDescriptor:
    """One position of the genotype, holding the nine geometry fields."""

    layer_type: LayerType
    ifm_size: int
    in_channels: int
    in_capsules: int
    kernel_size: int
    stride: int
    ofm_size: int
    out_channels: int
    out_capsules: int


@dataclass(frozen=True)
class SearchSpace:
    """Bounds the generator and the variation operators draw from."""

    input_size: int
    input_channels: int
    num_classes: int
    min_layers: int = DEFAULT_MIN_LAYERS
    max_layers: int = DEFAULT_MAX_LAYERS
    kernel_choices: tuple[int, ...] = DEFAULT_KERNEL_CHOICES
    stride_choices: tuple[int, ...] = DEFAULT_STRIDE_CHOICES
    channel_range: tuple[int, int] = DEFAULT_CHANNEL_RANGE
    capsule_range: tuple[int, int] = DEFAULT_CAPSULE_RANGE

    def __post_init__(self) -> None:
        if self.input_size < 1 or self.input_channels < 1 or self.num_classes < 2:
            raise ValueError("input_size, input_channels >= 1 and num_classes >= 2 required")
        if not 2 <= self.min_layers <= self.max_layers:
            raise ValueError("need 2 <= min_layers <= max_layers")
        if not self.kernel_choices or not self.stride_choices:
            raise ValueError("kernel_choices and stride_choices must be non-empty")
        for lo, hi in (self.channel_range, self.capsule_range):
            if not 1 <= lo <= hi:
                raise ValueError("ranges must satisfy 1 <= lo <= hi")


@dataclass(frozen=True)
class Genotype:
    """An architecture: layers, skip connections, and the input resize."""

    layers: tuple[LayerDescriptor, ...]
    skip_connections: tuple[tuple[int, int], ...] = ()
    input_resize: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        skips = sorted({(int(s), int(d)) for s, d in self.skip_connections})
        object.__setattr__(self, "skip_connections", tuple(skips))
        if self.input_resize == 0 and self.layers:
            object.__setattr__(self, "input_resize", self.layers[0].ifm_size)

    def __len__(self) -> int:
        return len(self.layers)


def conv_output_size(ifm_size: int, kernel_size: int, stride: int) -> int:
    """Output grid side for a padding-free convolution."""
    return (ifm_size - kernel_size) // stride + 1


def _bounds(space: SearchSpace | None) -> tuple:
    if space is None:
        return (
            DEFAULT_MIN_LAYERS,
            DEFAULT_MAX_LAYERS,
            DEFAULT_KERNEL_CHOICES,
            DEFAULT_STRIDE_CHOICES,
            DEFAULT_CHANNEL_RANGE,
            DEFAULT_CAPSULE_RANGE,
        )
    return (
        space.min_layers,
        space.max_layers,
        space.kernel_choices,
        space.stride_choices,
        space.channel_range,
        space.capsule_range,
    )


def validate(g: Genotype, space: SearchSpace | None = None) -> bool:
    """Check every structural invariant; bounds default to the stock space."""
    min_layers, max_layers, kernels, strides, ch_range, cap_range = _bounds(space)
    n = len(g.layers)
    if not min_layers <= n <= max_layers:
        return False
    if g.input_resize < 1:
        return False

    first = g.layers[0]
    if first.ifm_size != g.input_resize or first.in_capsules != 1:
        return False
    if space is not None and first.in_channels != space.input_channels:
        return False

    for i, d in enumerate(g.layers):
        if min(d.ifm_size, d.in_channels, d.in_capsules, d.kernel_size,
               d.stride, d.ofm_size, d.out_channels, d.out_capsules) < 1:
            return False
        if i > 0:
            prev = g.layers[i - 1]
            if (d.ifm_size != prev.ofm_size
                    or d.in_channels != prev.out_channels
                    or d.in_capsules != prev.out_capsules):
                return False
        if d.layer_type.is_spatial:
            if d.kernel_size not in kernels or d.stride not in strides:
                return False
            if d.kernel_size > d.ifm_size:
                return False
            if d.ofm_size != conv_output_size(d.ifm_size, d.kernel_size, d.stride):
                return False
        else:
            if d.kernel_size != d.ifm_size or d.stride != 1 or d.ofm_size != 1:
                return False
        if d.layer_type.is_capsule:
            if not cap_range[0] <= d.out_capsules <= cap_range[1]:
                return False
        elif d.out_capsules != 1:
            return False
        is_last = i == n - 1
        if is_last:
            if d.layer_type is not LayerType.FULLY_CONNECTED_CAPSULE:
                return False
            if space is not None and d.out_channels != space.num_classes:
                return False
        elif not ch_range[0] <= d.out_channels <= ch_range[1]:
            return False

    for s, dst in g.skip_connections:
        if not (0 <= s and dst <= n - 1 and s < dst - 1):
            return False
    return True


def repair(g: Genotype, space: SearchSpace | None = None) -> Genotype | None:
    """Recompute the dimensional chain front to back and clamp bounded fields.

    Returns None when no consistent geometry exists (a kernel no longer fits
    its feature map). The last layer's out_channels is the class count and is
    never clamped. Skip connections whose endpoints became invalid are
    dropped. Idempotent on its own output.
    """
    _, _, _, _, ch_range, cap_range = _bounds(space)
    n = len(g.layers)
    if n == 0:
        return None

    repaired: list[LayerDescriptor] = []
    for i, d in enumerate(g.layers):
        if i == 0:
            ifm, in_ch, in_caps = g.input_resize, d.in_channels, 1
        else:
            prev = repaired[i - 1]
            ifm, in_ch, in_caps = prev.ofm_size, prev.out_channels, prev.out_capsules
        if d.layer_type.is_spatial:
            kernel, stride = d.kernel_size, d.stride
            if kernel > ifm:
                return None
            ofm = conv_output_size(ifm, kernel, stride)
            if ofm < 1:
                return None
        else:
            kernel, stride, ofm = ifm, 1, 1
        if i == n - 1:
            out_ch = d.out_channels
        else:
            out_ch = min(max(d.out_channels, ch_range[0]), ch_range[1])
        if d.layer_type.is_capsule:
            out_caps = min(max(d.out_capsules, cap_range[0]), cap_range[1])
        else:
            out_caps = 1
        repaired.append(LayerDescriptor(
            layer_type=d.layer_type,
            ifm_size=ifm,
            in_channels=in_ch,
            in_capsules=in_caps,
            kernel_size=kernel,
            stride=stride,
            ofm_size=ofm,
            out_channels=out_ch,
            out_capsules=out_caps,
        ))

    skips = tuple((s, d) for s, d in g.skip_connections
                  if 0 <= s and d <= n - 1 and s < d - 1)
    return Genotype(layers=tuple(repaired), skip_connections=skips,
                    input_resize=g.input_resize)


def random_genotype(space: SearchSpace, seed: int) -> Genotype:
    """Sample a valid genotype: a convolutional head, an optional middle
    section, and a closing fully connected capsule layer."""
    fitting = [k for k in space.kernel_choices if k <= space.input_size]
    if not fitting:
        raise UnsatisfiableSpaceError(
            f"smallest kernel {min(space.kernel_choices)} exceeds input size "
            f"{space.input_size}")

    rng = random.Random(seed)
    n = rng.randint(space.min_layers, space.max_layers)
    resize = rng.randint(min(fitting), space.input_size)

    layers: list[LayerDescriptor] = []
    in_fc_tail = False
    for i in range(n):
        if i == 0:
            ifm, in_ch, in_caps = resize, space.input_channels, 1
        else:
            prev = layers[-1]
            ifm, in_ch, in_caps = prev.ofm_size, prev.out_channels, prev.out_capsules

        usable = [k for k in space.kernel_choices if k <= ifm]
        is_last = i == n - 1
        if is_last:
            ltype = LayerType.FULLY_CONNECTED_CAPSULE
        elif i == 0:
            ltype = LayerType.CONV
        elif in_fc_tail or not usable or rng.random() < _FC_TRANSITION_PROB:
            ltype = rng.choice((LayerType.FULLY_CONNECTED,
                                LayerType.FULLY_CONNECTED_CAPSULE))
        else:
            ltype = rng.choice((LayerType.CONV, LayerType.CONV_CAPSULE))

        if ltype.is_spatial:
            kernel = rng.choice(usable)
            stride = rng.choice(space.stride_choices)
            ofm = conv_output_size(ifm, kernel, stride)
        else:
            kernel, stride, ofm = ifm, 1, 1
            in_fc_tail = True

        if is_last:
            out_ch = space.num_classes
        else:
            out_ch = rng.randint(*space.channel_range)
        out_caps = rng.randint(*space.capsule_range) if ltype.is_capsule else 1
        layers.append(LayerDescriptor(ltype, ifm, in_ch, in_caps, kernel,
                                      stride, ofm, out_ch, out_caps))

    pairs = _valid_skip_pairs(n)
    count = min(rng.choice(_SKIP_COUNT_CHOICES), len(pairs))
    skips = tuple(rng.sample(pairs, count)) if count else ()
    g = Genotype(layers=tuple(layers), skip_connections=skips, input_resize=resize)
    if not validate(g, space):
        raise AssertionError("generator produced an invalid genotype")
    return g


def _valid_skip_pairs(n: int) -> list[tuple[int, int]]:
    return [(s, d) for s in range(n) for d in range(s + 2, n)]


def _splice_skips(prefix: Genotype, suffix: Genotype, split_p: int,
                  split_s: int, out_len: int) -> list[tuple[int, int]]:
    # Prefix skips survive as long as both endpoints still exist at their
    # absolute indices; suffix skips travel with their layers.
    out = [(s, d) for s, d in prefix.skip_connections
           if s < split_p and d < out_len]
    shift = split_p - split_s
    out += [(s + shift, d + shift) for s, d in suffix.skip_connections
            if s >= split_s]
    return out


def crossover_at(pa: Genotype, pb: Genotype, split_a: int, split_b: int,
                 space: SearchSpace | None = None) -> tuple[Genotype, ...]:
    """Swap suffixes at explicit split points; invalid offspring are dropped."""
    raw = []
    for prefix, suffix, sp, ss in ((pa, pb, split_a, split_b),
                                   (pb, pa, split_b, split_a)):
        layers = prefix.layers[:sp] + suffix.layers[ss:]
        resize = prefix.input_resize if sp > 0 else suffix.input_resize
        skips = _splice_skips(prefix, suffix, sp, ss, len(layers))
        raw.append(Genotype(layers=layers, skip_connections=tuple(skips),
                            input_resize=resize))
    out = []
    for q in raw:
        fixed = repair(q, space)
        if fixed is not None and validate(fixed, space):
            out.append(fixed)
    return tuple(out)


def crossover(pa: Genotype, pb: Genotype, seed: int,
              space: SearchSpace | None = None) -> tuple[Genotype, ...]:
    """Single-point suffix swap with split points drawn independently per
    parent, uniform over the interior positions."""
    rng = random.Random(seed)
    split_a = rng.randint(1, len(pa.layers) - 1)
    split_b = rng.randint(1, len(pb.layers) - 1)
    return crossover_at(pa, pb, split_a, split_b, space)


def _layer_param_options(d: LayerDescriptor,
                         space: SearchSpace) -> dict[str, list[int]]:
    opts: dict[str, list[int]] = {}
    if d.layer_type.is_spatial:
        ks = [k for k in space.kernel_choices if k != d.kernel_size]
        if ks:
            opts["kernel_size"] = ks
        ss = [s for s in space.stride_choices if s != d.stride]
        if ss:
            opts["stride"] = ss
    if d.layer_type.is_capsule:
        lo, hi = space.capsule_range
        caps = [c for c in range(lo, hi + 1) if c != d.out_capsules]
        if caps:
            opts["out_capsules"] = caps
    return opts


def _draw_mutation(g: Genotype, space: SearchSpace,
                   rng: random.Random) -> tuple | None:
    """Pick one gene to change: a layer parameter or a skip connection."""
    n = len(g.layers)
    layer_opts = {i: opts for i, d in enumerate(g.layers)
                  if (opts := _layer_param_options(d, space))}

    existing = set(g.skip_connections)
    addable = [p for p in _valid_skip_pairs(n) if p not in existing]
    skip_ops = ([("skip_add", p) for p in addable]
                + [("skip_remove", p) for p in sorted(existing)])

    targets: list[tuple[str, int]] = [("layer", i) for i in sorted(layer_opts)]
    if skip_ops:
        targets.append(("skips", -1))
    if not targets:
        return None

    kind, idx = rng.choice(targets)
    if kind == "layer":
        param = rng.choice(sorted(layer_opts[idx]))
        value = rng.choice(layer_opts[idx][param])
        return (param, idx, value)
    return rng.choice(skip_ops)


def _apply_mutation(g: Genotype, mutation: tuple) -> Genotype:
    """Change exactly the drawn gene; the dimensional chain is not touched."""
    if mutation[0] == "skip_add":
        skips = g.skip_connections + (mutation[1],)
        return dataclasses.replace(g, skip_connections=skips)
    if mutation[0] == "skip_remove":
        skips = tuple(p for p in g.skip_connections if p != mutation[1])
        return dataclasses.replace(g, skip_connections=skips)
    param, idx, value = mutation
    layers = list(g.layers)
    layers[idx] = dataclasses.replace(layers[idx], **{param: value})
    return dataclasses.replace(g, layers=tuple(layers))


def mutate(g: Genotype, space: SearchSpace, seed: int) -> Genotype | None:
    """Change one randomly chosen gene, then repair the dimensional chain.

    Returns None when the space offers no alternative value or when the
    mutated geometry cannot be repaired.
    """
    rng = random.Random(seed)
    mutation = _draw_mutation(g, space, rng)
    if mutation is None:
        return None
    mutant = _apply_mutation(g, mutation)
    fixed = repair(mutant, space)
    if fixed is None or not validate(fixed, space):
        return None
    return fixed


# -- serialization ----------------------------------------------------------

_LAYER_FIELDS = ("layer_type", "ifm_size", "in_channels", "in_capsules",
                 "kernel_size", "stride", "ofm_size", "out_channels",
                 "out_capsules")
_TOP_FIELDS = ("layers", "skip_connections", "input_resize")


def to_obj(g: Genotype) -> dict:
    """Plain-data form of a genotype, ready for JSON embedding."""
    return {
        "layers": [
            {
                "layer_type": d.layer_type.value,
                "ifm_size": d.ifm_size,
                "in_channels": d.in_channels,
                "in_capsules": d.in_capsules,
                "kernel_size": d.kernel_size,
                "stride": d.stride,
                "ofm_size": d.ofm_size,
                "out_channels": d.out_channels,
                "out_capsules": d.out_capsules,
            }
            for d in g.layers
        ],
        "skip_connections": [[s, d] for s, d in g.skip_connections],
        "input_resize": g.input_resize,
    }


def encode(g: Genotype) -> str:
    """Canonical JSON: sorted keys, no whitespace, stable across runs."""
    return json.dumps(to_obj(g), sort_keys=True, separators=(",", ":"))


def _require_int(value: object, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise GenotypeDecodeError(f"{what} must be an integer, got {value!r}")
    return value


def from_obj(obj: object) -> Genotype:
    """Rebuild a genotype from its plain-data form; strict about keys."""
    if not isinstance(obj, dict):
        raise GenotypeDecodeError("top level must be an object")
    if set(obj) != set(_TOP_FIELDS):
        raise GenotypeDecodeError(
            f"top-level keys must be exactly {sorted(_TOP_FIELDS)}, "
            f"got {sorted(obj)}")
    raw_layers = obj["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise GenotypeDecodeError("layers must be a non-empty array")

    layers = []
    for pos, entry in enumerate(raw_layers):
        if not isinstance(entry, dict) or set(entry) != set(_LAYER_FIELDS):
            raise GenotypeDecodeError(
                f"layer {pos} keys must be exactly {sorted(_LAYER_FIELDS)}")
        try:
            ltype = LayerType(entry["layer_type"])
        except ValueError as exc:
            raise GenotypeDecodeError(
                f"layer {pos} has unknown layer_type {entry['layer_type']!r}"
            ) from exc
        fields = {name: _require_int(entry[name], f"layer {pos} {name}")
                  for name in _LAYER_FIELDS if name != "layer_type"}
        layers.append(LayerDescriptor(layer_type=ltype, **fields))

    raw_skips = obj["skip_connections"]
    if not isinstance(raw_skips, list):
        raise GenotypeDecodeError("skip_connections must be an array")
    skips = []
    for pos, pair in enumerate(raw_skips):
        if not isinstance(pair, list) or len(pair) != 2:
            raise GenotypeDecodeError(
                f"skip_connections[{pos}] must be a [src, dst] pair")
        skips.append((_require_int(pair[0], "skip src"),
                      _require_int(pair[1], "skip dst")))

    resize = _require_int(obj["input_resize"], "input_resize")
    return Genotype(layers=tuple(layers), skip_connections=tuple(skips),
                    input_resize=resize)


def decode(text: str) -> Genotype:
    """Inverse of :func:`encode`; rejects unknown keys and malformed fields."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeDecodeError(f"not valid JSON: {exc}") from exc
    return from_obj(obj)


def genotype_hash(g: Genotype) -> str:
    """Short stable identifier derived from the canonical serialization."""
    return hashlib.sha256(encode(g).encode("utf-8")).hexdigest()[:16]
