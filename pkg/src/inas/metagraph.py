"""Weight-sharing meta-graph: a stack of cells, each offering up to five
parallel module options (one basic convolution plus four inverted-bottleneck
variants). Any valid module subset is a runnable child architecture.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn.params import ParameterSet, kaiming_normal

KIND_ORDER = (
    "BasicConv",
    "MBConv-3F-3K",
    "MBConv-3F-6K",
    "MBConv-5F-3K",
    "MBConv-5F-6K",
)

# kind -> (kernel size, expansion ratio); kernels must stay odd so every
# module in a cell can preserve the spatial shape under symmetric padding
MBCONV_GEOMETRY = {
    "MBConv-3F-3K": (3, 3),
    "MBConv-3F-6K": (3, 6),
    "MBConv-5F-3K": (5, 3),
    "MBConv-5F-6K": (5, 6),
}

DEFAULT_KIND = "BasicConv"


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class CellSpec:
    index: int
    in_channels: int
    out_channels: int
    stride: int
    enabled_kinds: tuple[str, ...] = KIND_ORDER

    @property
    def shape_changing(self) -> bool:
        return self.stride == 2 or self.in_channels != self.out_channels

    def validate(self) -> None:
        if self.stride not in (1, 2):
            raise SpecError(f"cell {self.index}: stride must be 1 or 2, got {self.stride}")
        if not self.enabled_kinds:
            raise SpecError(f"cell {self.index}: enabled_kinds must be non-empty")
        for kind in self.enabled_kinds:
            if kind not in KIND_ORDER:
                raise SpecError(f"cell {self.index}: unknown module kind {kind!r}")
        if self.shape_changing and DEFAULT_KIND not in self.enabled_kinds:
            raise SpecError(
                f"cell {self.index}: shape-changing cells must enable {DEFAULT_KIND} (the forced default)"
            )


@dataclass(frozen=True)
class MetaGraphSpec:
    cells: tuple[CellSpec, ...]
    stem_channels: int
    num_classes: int
    input_channels: int = 1
    input_size: int = 32

    def validate(self) -> None:
        if not self.cells:
            raise SpecError("meta-graph needs at least one cell")
        prev = self.stem_channels
        for cell in self.cells:
            cell.validate()
            if cell.in_channels != prev:
                raise SpecError(
                    f"inconsistent channel chain: cell {cell.index} expects {cell.in_channels} "
                    f"input channels but receives {prev}"
                )
            prev = cell.out_channels

    @property
    def module_count(self) -> int:
        return sum(len(c.enabled_kinds) for c in self.cells)

    def module_ids(self) -> list[tuple[int, str]]:
        return [(c.index, kind) for c in self.cells for kind in c.enabled_kinds]

    def cell_slices(self) -> list[slice]:
        out, off = [], 0
        for c in self.cells:
            out.append(slice(off, off + len(c.enabled_kinds)))
            off += len(c.enabled_kinds)
        return out

    def cell_input_hw(self) -> list[int]:
        """Spatial side length seen by each cell (stem is stride 1)."""
        sizes, s = [], self.input_size
        for c in self.cells:
            sizes.append(s)
            if c.stride == 2:
                s = (s + 2 - 3) // 2 + 1  # every module pads to kernel//2
        return sizes

    @staticmethod
    def build(channels, strides, stem_channels, num_classes, kinds=KIND_ORDER,
              input_channels=1, input_size=32) -> "MetaGraphSpec":
        if len(channels) != len(strides) + 1:
            raise SpecError(f"channel plan needs len(strides)+1 entries, got {len(channels)} vs {len(strides)}")
        if channels[0] != stem_channels:
            raise SpecError(f"channel plan must start at stem_channels ({stem_channels}), got {channels[0]}")
        cells = tuple(
            CellSpec(i, channels[i], channels[i + 1], strides[i], tuple(kinds))
            for i in range(len(strides))
        )
        spec = MetaGraphSpec(cells, stem_channels, num_classes, input_channels, input_size)
        spec.validate()
        return spec


def desk_default_spec(num_classes: int = 4, input_channels: int = 1, input_size: int = 32) -> MetaGraphSpec:
    """8 cells, 16->24->24->32->32->64->64->96->96, stride 2 at cells 1, 3, 5."""
    return MetaGraphSpec.build(
        channels=[16, 24, 24, 32, 32, 64, 64, 96, 96],
        strides=[1, 2, 1, 2, 1, 2, 1, 1],
        stem_channels=16,
        num_classes=num_classes,
        input_channels=input_channels,
        input_size=input_size,
    )


@dataclass(frozen=True)
class Selection:
    """Binary mask over all selectable modules of a MetaGraphSpec."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8))

    def active_count(self) -> int:
        return int(self.bits.sum())

    def to_string(self, spec: MetaGraphSpec) -> str:
        return "|".join("".join(str(int(b)) for b in self.bits[sl]) for sl in spec.cell_slices())

    @staticmethod
    def from_string(text: str) -> "Selection":
        return Selection(np.array([int(ch) for ch in text if ch in "01"], dtype=np.uint8))

    @staticmethod
    def all_modules(spec: MetaGraphSpec) -> "Selection":
        return Selection(np.ones(spec.module_count, dtype=np.uint8))


def selection_is_valid(spec: MetaGraphSpec, sel: Selection) -> bool:
    if sel.bits.shape != (spec.module_count,):
        return False
    for cell, sl in zip(spec.cells, spec.cell_slices()):
        group = sel.bits[sl]
        if group.sum() == 0:
            return False
        if cell.shape_changing and not group[cell.enabled_kinds.index(DEFAULT_KIND)]:
            return False
    return True


def repair_selection(spec: MetaGraphSpec, bits: np.ndarray) -> Selection:
    """Force the per-cell default on for empty cells and shape-changing cells."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape != (spec.module_count,):
        raise SpecError(f"selection length {bits.shape} != module count {spec.module_count}")
    out = bits.copy()
    for cell, sl in zip(spec.cells, spec.cell_slices()):
        group = out[sl]
        default_idx = (
            cell.enabled_kinds.index(DEFAULT_KIND)
            if DEFAULT_KIND in cell.enabled_kinds
            else 0
        )
        if cell.shape_changing or group.sum() == 0:
            group[default_idx] = 1
    return Selection(out)


def droppath_rate(epoch: int, total_epochs: int) -> float:
    """0 through the first half of pre-training, then linear up to 0.5."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    e = min(max(epoch, 0), total_epochs)
    half = total_epochs / 2.0
    if e < half:
        return 0.0
    return 0.5 * (e - half) / (total_epochs - half)


def sample_droppath_bits(spec: MetaGraphSpec, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Pre-repair drop-path mask: each module independently dropped at `rate`."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"drop rate must be in [0, 1], got {rate}")
    return (rng.random(spec.module_count) >= rate).astype(np.uint8)


def sample_droppath_selection(spec: MetaGraphSpec, rate: float, rng: np.random.Generator) -> Selection:
    return repair_selection(spec, sample_droppath_bits(spec, rate, rng))


def sample_uniform_valid(spec: MetaGraphSpec, rng: np.random.Generator) -> Selection:
    """Uniform over the valid set: per cell, pick uniformly among its valid combos."""
    bits = np.zeros(spec.module_count, dtype=np.uint8)
    for cell, sl in zip(spec.cells, spec.cell_slices()):
        k = len(cell.enabled_kinds)
        if cell.shape_changing:
            free = [i for i in range(k) if cell.enabled_kinds[i] != DEFAULT_KIND]
            combo = np.zeros(k, dtype=np.uint8)
            combo[cell.enabled_kinds.index(DEFAULT_KIND)] = 1
            for i in free:
                combo[i] = rng.integers(0, 2)
        else:
            code = int(rng.integers(1, 2 ** k))  # skip the all-zero combo
            combo = np.array([(code >> i) & 1 for i in range(k)], dtype=np.uint8)
        bits[sl] = combo
    return Selection(bits)


def count_search_space(spec: MetaGraphSpec) -> tuple[int, int]:
    """(raw, valid) child-architecture counts as exact big integers."""
    raw, valid = 1, 1
    for cell in spec.cells:
        k = len(cell.enabled_kinds)
        raw *= 2 ** k
        valid *= 2 ** (k - 1) if cell.shape_changing else 2 ** k - 1
    return raw, valid


# ---------------------------------------------------------------------------
# the graph itself


@dataclass
class _ModuleRef:
    cell: CellSpec
    kind: str
    prefix: str


class MetaGraph:
    """Shared weights plus the masked forward pass over them."""

    def __init__(self, spec: MetaGraphSpec, params: ParameterSet, dtype):
        self.spec = spec
        self.params = params
        self.dtype = np.dtype(dtype).type
        self._modules = [
            _ModuleRef(cell, kind, f"cell{cell.index}.{kind}")
            for cell in spec.cells
            for kind in cell.enabled_kinds
        ]
        self._slices = spec.cell_slices()

    @property
    def parameter_count(self) -> int:
        return self.params.count()

    # -- parameter construction -------------------------------------------

    @staticmethod
    def _init_conv(params, rng, name, oc, cg, k):
        params.add(name, kaiming_normal(rng, (oc, cg, k, k), fan_in=cg * k * k))

    @staticmethod
    def _init_norm(params, name, channels):
        params.add(f"{name}.scale", np.ones(channels))
        params.add(f"{name}.shift", np.zeros(channels))

    # -- forward ------------------------------------------------------------

    def _conv(self, x, name, stride=1, padding=0, groups=1):
        return nn.conv2d(x, self.params[name], stride=stride, padding=padding, groups=groups)

    def _norm_act(self, x, name, activate=True):
        y = nn.channel_affine(x, self.params[f"{name}.scale"], self.params[f"{name}.shift"])
        return nn.relu6(y) if activate else y

    def _module_forward(self, ref: _ModuleRef, x):
        cell, kind, p = ref.cell, ref.kind, ref.prefix
        if kind == "BasicConv":
            y = self._conv(x, f"{p}.conv.w", stride=cell.stride, padding=1)
            return self._norm_act(y, f"{p}.norm")
        k, expansion = MBCONV_GEOMETRY[kind]
        hidden = cell.in_channels * expansion
        y = self._conv(x, f"{p}.expand.w")
        y = self._norm_act(y, f"{p}.expand_norm")
        y = self._conv(y, f"{p}.dw.w", stride=cell.stride, padding=k // 2, groups=hidden)
        y = self._norm_act(y, f"{p}.dw_norm")
        y = self._conv(y, f"{p}.project.w")
        y = self._norm_act(y, f"{p}.project_norm", activate=False)
        if cell.stride == 1 and cell.in_channels == cell.out_channels:
            y = nn.add(y, x)
        return y

    def stem_forward(self, x):
        y = self._conv(x, "stem.conv.w", stride=1, padding=1)
        return self._norm_act(y, "stem.norm")

    def head_forward(self, h):
        pooled = nn.global_avg_pool(h)
        return nn.dense(pooled, self.params["head.fc.w"], self.params["head.fc.b"])

    def forward(self, x, mask: np.ndarray) -> nn.Tensor:
        """Masked forward; mask is [M] (one architecture) or [N, M] (per instance)."""
        xv = np.ascontiguousarray(x, dtype=self.dtype)
        n = xv.shape[0]
        mask = np.asarray(mask)
        per_instance = mask.ndim == 2
        if per_instance and mask.shape != (n, self.spec.module_count):
            raise SpecError(f"mask shape {mask.shape} != ({n}, {self.spec.module_count})")
        if not per_instance and mask.shape != (self.spec.module_count,):
            raise SpecError(f"mask shape {mask.shape} != ({self.spec.module_count},)")
        h = self.stem_forward(nn.Tensor(xv))
        offset = 0
        for sl in self._slices:
            outs = []
            for j in range(sl.stop - sl.start):
                ref = self._modules[offset + j]
                col = mask[:, offset + j] if per_instance else mask[offset + j]
                if not np.any(col):
                    continue
                y = self._module_forward(ref, h)
                if per_instance:
                    y = nn.mul(y, col.astype(self.dtype)[:, None, None, None])
                elif col != 1:
                    y = nn.mul(y, float(col))
                outs.append(y)
            if not outs:
                raise SpecError(f"cell {self._modules[offset].cell.index} has no active module")
            acc = outs[0]
            for y in outs[1:]:
                acc = nn.add(acc, y)
            h = acc
            offset = sl.stop
        return self.head_forward(h)

    def forward_selected(self, x, sel: Selection) -> nn.Tensor:
        if not selection_is_valid(self.spec, sel):
            raise SpecError(f"invalid selection {Selection(sel.bits).to_string(self.spec)}")
        return self.forward(x, sel.bits)


def build_metagraph(spec: MetaGraphSpec, seed: int, dtype=None) -> MetaGraph:
    spec.validate()
    dtype = np.dtype(dtype or nn.get_default_dtype()).type
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    saved_default = nn.get_default_dtype()
    nn.set_default_dtype(dtype)
    try:
        MetaGraph._init_conv(params, rng, "stem.conv.w", spec.stem_channels, spec.input_channels, 3)
        MetaGraph._init_norm(params, "stem.norm", spec.stem_channels)
        for cell in spec.cells:
            for kind in cell.enabled_kinds:
                p = f"cell{cell.index}.{kind}"
                if kind == "BasicConv":
                    MetaGraph._init_conv(params, rng, f"{p}.conv.w", cell.out_channels, cell.in_channels, 3)
                    MetaGraph._init_norm(params, f"{p}.norm", cell.out_channels)
                else:
                    k, expansion = MBCONV_GEOMETRY[kind]
                    hidden = cell.in_channels * expansion
                    MetaGraph._init_conv(params, rng, f"{p}.expand.w", hidden, cell.in_channels, 1)
                    MetaGraph._init_norm(params, f"{p}.expand_norm", hidden)
                    params.add(f"{p}.dw.w", kaiming_normal(rng, (hidden, 1, k, k), fan_in=k * k))
                    MetaGraph._init_norm(params, f"{p}.dw_norm", hidden)
                    MetaGraph._init_conv(params, rng, f"{p}.project.w", cell.out_channels, hidden, 1)
                    MetaGraph._init_norm(params, f"{p}.project_norm", cell.out_channels)
        last = spec.cells[-1].out_channels
        params.add("head.fc.w", kaiming_normal(rng, (last, spec.num_classes), fan_in=last))
        params.add("head.fc.b", np.zeros(spec.num_classes))
    finally:
        nn.set_default_dtype(saved_default)
    return MetaGraph(spec, params, dtype)
