"""Sectioned backbones with one classifier head per section.

A backbone is split into C sections; after each section an exit head
(alignment bottleneck + global pooling + fully connected layer) produces
class logits. All heads emit feature maps with the shape of the deepest
section's output, so shallow features can be compared directly against the
deepest ones. The deepest head has no bottleneck: its features are the raw
backbone output.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import BatchNorm2d, Conv2d, Linear, Module, ReLU, Sequential

ARCHS = ("mini_resnet", "plain_cnn", "mlp")


@dataclass(frozen=True)
class SectionSpec:
    """One backbone slice: `blocks` conv blocks at `channels`, optionally halving H and W."""

    blocks: int
    channels: int
    downsample: bool = False

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")


@dataclass
class ExitOutputs:
    """Per-exit logits (B x M each) and aligned feature tensors for one batch."""

    logits: list[Tensor]
    features: list[Tensor]

    def __post_init__(self):
        if len(self.logits) != len(self.features):
            raise ValueError("logits/features length mismatch")


def _halve(size: int) -> int:
    # 3x3 conv, stride 2, pad 1
    return (size + 2 - 3) // 2 + 1


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng):
        super().__init__()
        self.conv1 = self.add_child("conv1", Conv2d(cin, cout, 3, rng, stride=stride, padding=1))
        self.bn1 = self.add_child("bn1", BatchNorm2d(cout))
        self.conv2 = self.add_child("conv2", Conv2d(cout, cout, 3, rng, stride=1, padding=1))
        self.bn2 = self.add_child("bn2", BatchNorm2d(cout))
        if stride != 1 or cin != cout:
            self.proj = self.add_child("proj", Conv2d(cin, cout, 1, rng, stride=stride, padding=0))
            self.proj_bn = self.add_child("proj_bn", BatchNorm2d(cout))
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return T.relu(T.add(h, shortcut))


class ExitHead(Module):
    """Bottleneck aligning a section's features to the deepest section, plus the classifier."""

    def __init__(self, index: int, bottleneck: Module | None, fc: Linear):
        super().__init__()
        self.index = index
        self.bottleneck = bottleneck
        if bottleneck is not None:
            self.add_child("bottleneck", bottleneck)
        self.fc = self.add_child("fc", fc)

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        feats = self.bottleneck(h) if self.bottleneck is not None else h
        pooled = T.global_avgpool(feats) if feats.ndim == 4 else feats
        return self.fc(pooled), feats


def _conv_bottleneck(cin: int, spatial_in: int, cout: int, spatial_out: int, rng) -> Sequential:
    mid = max(1, cout // 4)
    mods: list[Module] = [Conv2d(cin, mid, 1, rng), BatchNorm2d(mid), ReLU()]
    size = spatial_in
    while size > spatial_out:
        mods += [Conv2d(mid, mid, 3, rng, stride=2, padding=1), BatchNorm2d(mid), ReLU()]
        size = _halve(size)
    if size != spatial_out:
        raise ValueError(f"cannot align spatial size {spatial_in} down to {spatial_out} by halving")
    mods += [Conv2d(mid, cout, 1, rng), BatchNorm2d(cout)]
    return Sequential(*mods)


class MultiExitModel(Module):
    def __init__(self, arch: str, specs: list[SectionSpec], num_classes: int, in_shape: tuple[int, ...],
                 stem: Module | None, sections: list[Module], heads: list[ExitHead],
                 exit_indices: list[int], feature_shape: tuple[int, ...]):
        super().__init__()
        self.arch = arch
        self.specs = specs
        self.num_classes = num_classes
        self.in_shape = tuple(in_shape)
        self.stem = stem
        if stem is not None:
            self.add_child("stem", stem)
        self.sections = sections
        for i, s in enumerate(sections):
            self.add_child(f"sections.{i}", s)
        self.heads = heads
        for h in heads:
            self.add_child(f"heads.{h.index}", h)
        self.exit_indices = list(exit_indices)
        self.feature_shape = tuple(feature_shape)  # per-sample aligned feature shape
        self.section_evals = [0] * len(sections)  # instrumentation: forward visits

    @property
    def num_exits(self) -> int:
        return len(self.heads)

    def _check_input(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[1:] != self.in_shape:
            raise T.ShapeError(f"model expects input of shape B x {self.in_shape}, got {x.shape}")
        return x

    def _run_sections(self, x: Tensor, upto: int) -> list[Tensor]:
        """Section outputs for sections[0:upto]; counts each section evaluation."""
        h = self.stem(x) if self.stem is not None else x
        outs = []
        for i in range(upto):
            h = self.sections[i](h)
            self.section_evals[i] += 1
            outs.append(h)
        return outs

    def forward(self, x) -> ExitOutputs:
        # Exit index i always pairs with original backbone section i, which sits
        # at list position i-1 (stripping only ever drops a suffix of sections).
        x = self._check_input(x)
        section_outs = self._run_sections(x, len(self.sections))
        logits, features = [], []
        for head in self.heads:
            z, f = head(section_outs[head.index - 1])
            if f.shape[1:] != self.feature_shape:
                raise T.ShapeError(
                    f"exit {head.index} features {f.shape[1:]} != deepest {self.feature_shape}")
            logits.append(z)
            features.append(f)
        return ExitOutputs(logits, features)

    def forward_to_exit(self, x, exit_index: int) -> tuple[Tensor, Tensor]:
        """Logits and features of one exit, evaluating only the sections on its path."""
        x = self._check_input(x)
        if exit_index not in self.exit_indices:
            raise ValueError(f"exit {exit_index} not in model (has {self.exit_indices})")
        section_outs = self._run_sections(x, exit_index)
        return self.heads[self.exit_indices.index(exit_index)](section_outs[-1])

    def reset_instrumentation(self) -> None:
        self.section_evals = [0] * len(self.sections)


def build_model(arch: str, sections: list[SectionSpec], num_classes: int,
                in_shape: tuple[int, ...] = (3, 32, 32), seed: int = 0) -> MultiExitModel:
    """Construct a multi-exit model and smoke-test its shapes on a dummy batch."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; choose one of {ARCHS}")
    if len(sections) < 2:
        raise ValueError(f"need at least 2 sections, got {len(sections)}")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)

    if arch == "mlp":
        if len(in_shape) != 1:
            raise ValueError(f"mlp expects a flat input shape like (16,), got {in_shape}")
        model = _build_mlp(sections, num_classes, in_shape, rng)
    else:
        if len(in_shape) != 3:
            raise ValueError(f"{arch} expects an input shape (channels, H, W), got {in_shape}")
        model = _build_conv(arch, sections, num_classes, in_shape, rng)

    _smoke_test(model)
    return model


def _build_conv(arch: str, specs: list[SectionSpec], num_classes: int,
                in_shape: tuple[int, ...], rng) -> MultiExitModel:
    in_ch, h, w = in_shape
    if h != w:
        raise ValueError(f"square inputs only, got {h}x{w}")
    stem = Sequential(Conv2d(in_ch, specs[0].channels, 3, rng, stride=1, padding=1),
                      BatchNorm2d(specs[0].channels), ReLU())
    size = h
    sizes = []
    sections: list[Module] = []
    ch = specs[0].channels
    for si, spec in enumerate(specs):
        mods: list[Module] = []
        for b in range(spec.blocks):
            stride = 2 if (spec.downsample and b == 0) else 1
            if stride == 2:
                if size <= 1:
                    raise ValueError(f"section {si + 1} would downsample below 1x1")
                size = _halve(size)
            if arch == "mini_resnet":
                mods.append(BasicBlock(ch, spec.channels, stride, rng))
            else:
                mods += [Conv2d(ch, spec.channels, 3, rng, stride=stride, padding=1),
                         BatchNorm2d(spec.channels), ReLU()]
            ch = spec.channels
        sections.append(Sequential(*mods))
        sizes.append(size)

    c_final, s_final = specs[-1].channels, sizes[-1]
    heads = []
    for i, spec in enumerate(specs, start=1):
        if i < len(specs):
            bott = _conv_bottleneck(spec.channels, sizes[i - 1], c_final, s_final, rng)
        else:
            bott = None
        heads.append(ExitHead(i, bott, Linear(c_final, num_classes, rng)))
    feature_shape = (c_final, s_final, s_final)
    return MultiExitModel("mini_resnet" if arch == "mini_resnet" else "plain_cnn",
                          list(specs), num_classes, in_shape, stem, sections, heads,
                          list(range(1, len(specs) + 1)), feature_shape)


def _build_mlp(specs: list[SectionSpec], num_classes: int, in_shape: tuple[int, ...], rng) -> MultiExitModel:
    width_in = in_shape[0]
    sections: list[Module] = []
    d = width_in
    for spec in specs:
        mods: list[Module] = []
        for _ in range(spec.blocks):
            mods += [Linear(d, spec.channels, rng), ReLU()]
            d = spec.channels
        sections.append(Sequential(*mods))
    d_final = specs[-1].channels
    heads = []
    for i, spec in enumerate(specs, start=1):
        bott = Sequential(Linear(spec.channels, d_final, rng)) if i < len(specs) else None
        heads.append(ExitHead(i, bott, Linear(d_final, num_classes, rng)))
    return MultiExitModel("mlp", list(specs), num_classes, in_shape, None, sections, heads,
                          list(range(1, len(specs) + 1)), (d_final,))


def _smoke_test(model: MultiExitModel) -> None:
    was_training = model.training
    model.eval()
    with T.no_grad():
        x = Tensor(np.zeros((2,) + model.in_shape, dtype=np.float32))
        outs = model.forward(x)
    model.train(was_training)
    for z in outs.logits:
        if z.shape != (2, model.num_classes):
            raise T.ShapeError(f"head emitted logits of shape {z.shape}")


def strip_heads(model: MultiExitModel, keep) -> MultiExitModel:
    """Copy of `model` keeping only the requested exits (original indices).

    Sections beyond the deepest kept exit are dropped, so the stripped model
    is exactly the inference-time network for those exits.
    """
    if isinstance(keep, int):
        keep = [keep]
    keep = sorted(set(keep))
    if not keep:
        raise ValueError("keep must name at least one exit")
    for k in keep:
        if k not in model.exit_indices:
            raise ValueError(f"exit {k} not in model (has {model.exit_indices})")

    positions = {idx: pos for pos, idx in enumerate(model.exit_indices)}
    stem = copy.deepcopy(model.stem)
    sections = [copy.deepcopy(s) for s in model.sections[:keep[-1]]]
    heads = [copy.deepcopy(model.heads[positions[k]]) for k in keep]
    stripped = MultiExitModel(model.arch, model.specs[:keep[-1]], model.num_classes,
                              model.in_shape, stem, sections, heads, keep, model.feature_shape)
    stripped.train(model.training)
    return stripped
