"""Per-exit prediction, ensembling, early exit, and analytic cost accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import MultiExitModel


@dataclass
class EnsembleSpec:
    """Weighted softmax combination over a subset of exits.

    weights align with included_exits; None means uniform over the included
    set. included_exits None means every exit of the model.
    """

    weights: list[float] | None = None
    included_exits: list[int] | None = None

    def resolve(self, model: MultiExitModel) -> tuple[list[int], np.ndarray]:
        exits = self.included_exits or list(model.exit_indices)
        for e in exits:
            if e not in model.exit_indices:
                raise ValueError(f"ensemble exit {e} not in model (has {model.exit_indices})")
        if self.weights is None:
            w = np.ones(len(exits))
        else:
            if len(self.weights) != len(exits):
                raise ValueError(f"{len(self.weights)} weights for {len(exits)} exits")
            w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any():
            raise ValueError("ensemble weights must be >= 0")
        if w.sum() <= 0:
            raise ValueError("ensemble weights must include at least one positive entry")
        return exits, w

    @staticmethod
    def deepest_three(model: MultiExitModel) -> "EnsembleSpec":
        return EnsembleSpec(included_exits=list(model.exit_indices[-3:]))


@dataclass
class CostReport:
    """Analytic per-exit inference cost for a single input.

    macs counts multiply-accumulates of the conv/fc layers on each exit's
    path (backbone prefix plus that exit's head); acceleration is
    macs(deepest)/macs(exit).
    """

    exits: list[int]
    macs: list[int]
    params: list[int]
    acceleration: list[float]

    def to_csv(self) -> str:
        lines = ["exit,macs,params,acceleration"]
        for e, m, p, a in zip(self.exits, self.macs, self.params, self.acceleration):
            lines.append(f"{e},{m},{p},{a:.4f}")
        return "\n".join(lines) + "\n"


def _as_batch(model: MultiExitModel, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float32)
    if arr.shape == model.in_shape:
        return arr[None], True
    return arr, False


def predict_at_exit(model: MultiExitModel, x, exit_index: int):
    """Class id(s) and probability vector(s) from one exit, touching only its prefix."""
    if exit_index not in model.exit_indices:
        raise ValueError(f"exit {exit_index} out of range; model has {model.exit_indices}")
    batch, single = _as_batch(model, x)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            z, _ = model.forward_to_exit(batch, exit_index)
            probs = T.softmax(z, t=1.0).data
    finally:
        model.train(was_training)
    ids = probs.argmax(axis=1)
    if single:
        return int(ids[0]), probs[0]
    return ids, probs


def ensemble(model: MultiExitModel, x, spec: EnsembleSpec | None = None):
    """Class id(s) and renormalized weighted-softmax combination over exits."""
    spec = spec or EnsembleSpec()
    exits, weights = spec.resolve(model)
    batch, single = _as_batch(model, x)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            outs = model.forward(batch)
    finally:
        model.train(was_training)
    by_index = dict(zip(model.exit_indices, outs.logits))
    combined = None
    for e, w in zip(exits, weights):
        p = T.softmax(by_index[e], t=1.0).data
        combined = w * p if combined is None else combined + w * p
    combined = combined / combined.sum(axis=1, keepdims=True)
    ids = combined.argmax(axis=1)
    if single:
        return int(ids[0]), combined[0]
    return ids, combined


def confidence_early_exit(model: MultiExitModel, x, threshold: float):
    """First exit whose max softmax probability clears the threshold, else the deepest.

    Returns (class ids, exit used per sample). Deeper sections are evaluated
    only while some sample in the batch is still undecided.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    batch, single = _as_batch(model, x)
    was_training = model.training
    model.eval()
    n = len(batch)
    ids = np.zeros(n, dtype=np.int64)
    exit_used = np.zeros(n, dtype=np.int64)
    undecided = np.ones(n, dtype=bool)
    try:
        with T.no_grad():
            x_t = model._check_input(batch)
            h = model.stem(x_t) if model.stem is not None else x_t
            next_section = 0
            for pos, head in enumerate(model.heads):
                for sec_i in range(next_section, head.index):
                    h = model.sections[sec_i](h)
                    model.section_evals[sec_i] += 1
                next_section = head.index
                z, _ = head(h)
                probs = T.softmax(z, t=1.0).data
                last = pos == model.num_exits - 1
                confident = probs.max(axis=1) >= threshold
                take = undecided & (confident | last)
                ids[take] = probs.argmax(axis=1)[take]
                exit_used[take] = head.index
                undecided &= ~take
                if not undecided.any():
                    break
    finally:
        model.train(was_training)
    if single:
        return int(ids[0]), int(exit_used[0])
    return ids, exit_used


def _path_modules(model: MultiExitModel, exit_index: int):
    mods = []
    if model.stem is not None:
        mods.append(model.stem)
    mods.extend(model.sections[:exit_index])
    mods.append(model.heads[model.exit_indices.index(exit_index)])
    return mods


def _walk(module):
    yield module
    for _, child in module._children:
        yield from _walk(child)


def count_macs(model: MultiExitModel) -> CostReport:
    """Analytic MACs and parameter counts per exit path (single input)."""
    macs, params = [], []
    for e in model.exit_indices:
        total_macs = 0
        total_params = 0
        for top in _path_modules(model, e):
            for mod in _walk(top):
                fn = getattr(mod, "macs", None)
                if fn is not None:
                    total_macs += fn()
                for _, p in mod._params:
                    total_params += p.size
        macs.append(total_macs)
        params.append(total_params)
    deepest = macs[-1]
    accel = [deepest / m for m in macs]
    return CostReport(list(model.exit_indices), macs, params, accel)
