"""Architecture descriptions received over the wire, realized as torch modules.

The worker parses genotypes on its own so it can run without the search
package installed. A genotype names an ordered list of layers (nine integer
or enum fields each), a set of additive skip connections, and the input
resolution the network expects. Convolutional layers become real ``Conv2d``
stages; capsule layers become grouped-vector dense stages whose groups are
scaled to unit-bounded norm; the final layer always maps to class logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

LAYER_TYPES = ("conv", "conv_capsule", "fully_connected",
               "fully_connected_capsule")
CAPSULE_TYPES = ("conv_capsule", "fully_connected_capsule")

# Hidden widths are capped so a 64-channel x 64-capsule layer stays trainable
# in seconds on a CPU.
MAX_WIDTH = 256

_LAYER_FIELDS = ("layer_type", "ifm_size", "in_channels", "in_capsules",
                 "kernel_size", "stride", "ofm_size", "out_channels",
                 "out_capsules")


class GenotypeError(ValueError):
    """Received genotype violates the wire schema."""


@dataclass(frozen=True)
class LayerSpec:
    layer_type: str
    ifm_size: int
    in_channels: int
    in_capsules: int
    kernel_size: int
    stride: int
    ofm_size: int
    out_channels: int
    out_capsules: int


@dataclass(frozen=True)
class ArchSpec:
    """Parsed genotype: layer list, skip pairs, and input geometry."""

    layers: tuple[LayerSpec, ...]
    skip_connections: tuple[tuple[int, int], ...]
    input_resize: int

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_channels

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels


def _int_field(obj: dict, key: str, minimum: int) -> int:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise GenotypeError(f"layer field {key} must be an integer")
    if value < minimum:
        raise GenotypeError(f"layer field {key} must be >= {minimum}")
    return value


def _parse_layer(obj: object) -> LayerSpec:
    if not isinstance(obj, dict):
        raise GenotypeError("each layer must be an object")
    unknown = set(obj) - set(_LAYER_FIELDS)
    if unknown:
        raise GenotypeError(f"unknown layer fields: {sorted(unknown)}")
    kind = obj.get("layer_type")
    if kind not in LAYER_TYPES:
        raise GenotypeError(f"unknown layer_type: {kind!r}")
    fields = {key: _int_field(obj, key, 1) for key in _LAYER_FIELDS[1:]}
    return LayerSpec(layer_type=kind, **fields)


def parse_genotype(obj: object) -> ArchSpec:
    """Validate a decoded genotype object and return its architecture spec."""
    if not isinstance(obj, dict):
        raise GenotypeError("genotype must be an object")
    unknown = set(obj) - {"layers", "skip_connections", "input_resize"}
    if unknown:
        raise GenotypeError(f"unknown genotype fields: {sorted(unknown)}")
    raw_layers = obj.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise GenotypeError("genotype needs a non-empty layers list")
    layers = tuple(_parse_layer(layer) for layer in raw_layers)

    raw_skips = obj.get("skip_connections", [])
    if not isinstance(raw_skips, list):
        raise GenotypeError("skip_connections must be a list")
    skips = []
    for pair in raw_skips:
        if (not isinstance(pair, (list, tuple)) or len(pair) != 2
                or any(isinstance(v, bool) or not isinstance(v, int)
                       for v in pair)):
            raise GenotypeError("each skip connection must be a pair of ints")
        s, d = int(pair[0]), int(pair[1])
        if not 0 <= s < d < len(layers):
            raise GenotypeError(f"skip ({s}, {d}) out of range")
        skips.append((s, d))

    resize = obj.get("input_resize", layers[0].ifm_size)
    if isinstance(resize, bool) or not isinstance(resize, int) or resize < 1:
        raise GenotypeError("input_resize must be a positive integer")
    return ArchSpec(layers=layers, skip_connections=tuple(sorted(set(skips))),
                    input_resize=resize)


class SquashGroups(nn.Module):
    """Scale each group of ``caps`` units to norm r^2/(1+r)^2 (unit bounded)."""

    def __init__(self, caps: int):
        super().__init__()
        self.caps = caps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, width = x.shape
        grouped = x.reshape(n, width // self.caps, self.caps)
        r = torch.linalg.vector_norm(grouped, dim=2, keepdim=True)
        return (grouped * (r / (1.0 + r) ** 2)).reshape(n, width)


def _project(flat: torch.Tensor, width: int) -> torch.Tensor:
    """Identity projection for skips: truncate or zero-pad rows to width."""
    have = flat.shape[1]
    if have == width:
        return flat
    if have > width:
        return flat[:, :width]
    return nn.functional.pad(flat, (0, width - have))


class GenotypeNet(nn.Module):
    """Torch realization of an :class:`ArchSpec`.

    Stages run in genotype order. While the activation is still a feature-map
    grid, ``conv`` layers are padding-free ``Conv2d`` stages; the first dense
    stage flattens it, and everything after stays flat. Capsule layers are
    dense stages squashed in groups of their output capsule dimension, plain
    dense layers use ReLU, and the last layer produces logits. A skip pair
    (s, d) adds stage s's flattened output to stage d's input, truncated or
    zero-padded to fit.
    """

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        incoming: dict[int, list[int]] = {}
        for s, d in spec.skip_connections:
            incoming.setdefault(d, []).append(s)
        self._incoming = incoming

        stages: list[nn.Module] = []
        kinds: list[str] = []
        channels = spec.in_channels
        side = spec.input_resize
        flat_dim = channels * side * side
        last = len(spec.layers) - 1
        for i, layer in enumerate(spec.layers):
            spatial = side is not None
            if i == last:
                stages.append(nn.Linear(flat_dim, spec.num_classes))
                kinds.append("logits")
                side = None
                flat_dim = spec.num_classes
            elif layer.layer_type == "conv" and spatial:
                if layer.kernel_size > side:
                    raise GenotypeError(
                        f"layer {i}: kernel {layer.kernel_size} exceeds "
                        f"feature map side {side}")
                stages.append(nn.Conv2d(channels, layer.out_channels,
                                        layer.kernel_size, layer.stride))
                kinds.append("conv")
                side = (side - layer.kernel_size) // layer.stride + 1
                channels = layer.out_channels
                flat_dim = channels * side * side
            elif layer.layer_type in CAPSULE_TYPES:
                caps = layer.out_capsules
                groups = min(layer.out_channels, max(1, MAX_WIDTH // caps))
                width = groups * caps
                stages.append(nn.Sequential(nn.Linear(flat_dim, width),
                                            SquashGroups(caps)))
                kinds.append("dense")
                side = None
                flat_dim = width
            else:
                width = min(layer.out_channels * layer.out_capsules, MAX_WIDTH)
                stages.append(nn.Sequential(nn.Linear(flat_dim, width),
                                            nn.ReLU()))
                kinds.append("dense")
                side = None
                flat_dim = width
        self.stages = nn.ModuleList(stages)
        self._kinds = kinds

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat_outputs: list[torch.Tensor] = []
        h = x
        for i, (stage, kind) in enumerate(zip(self.stages, self._kinds)):
            sources = self._incoming.get(i, ())
            if sources:
                shape = h.shape
                flat = h.reshape(shape[0], -1)
                for s in sources:
                    flat = flat + _project(flat_outputs[s], flat.shape[1])
                h = flat.reshape(shape)
            if kind != "conv":
                h = h.reshape(h.shape[0], -1)
            h = stage(h)
            flat_outputs.append(h.reshape(h.shape[0], -1))
        return h


def build_network(spec: ArchSpec, seed: int) -> GenotypeNet:
    """Construct the network with weights drawn from the given seed."""
    torch.manual_seed(seed)
    return GenotypeNet(spec)
