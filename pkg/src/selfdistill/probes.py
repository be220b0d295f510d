"""Diagnostics for trained models.

noise_probe      : Gaussian parameter perturbation vs train accuracy/loss,
                   the flat-vs-sharp-minimum comparison.
grad_stats       : mean |gradient| per conv/fc layer in depth order, showing
                   how much signal reaches early layers under each regime.
separability     : within-class (SSE) vs between-class (SSB) feature spread
                   per exit; lower SSE/SSB means cleaner clusters.
export_features_pca: top principal components of per-exit features, via
                   power iteration with deflation.

All probes leave the model untouched and emit plain CSV.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import Split, batches
from .losses import cross_entropy_logits, total_loss
from .models import MultiExitModel

NOISE_CSV_HEADER = "sigma,trial,accuracy,loss"
GRAD_CSV_HEADER = "layer,depth_index,mean_abs_grad"
SEP_CSV_HEADER = "exit,sse,ssb,ratio,accuracy"


@dataclass
class NoiseProbeResult:
    sigmas: list[float]
    accuracy: np.ndarray      # sigmas x trials, percent
    loss: np.ndarray          # sigmas x trials, mean CE
    trials: int

    def mean_accuracy(self) -> np.ndarray:
        return self.accuracy.mean(axis=1)

    def std_accuracy(self) -> np.ndarray:
        return self.accuracy.std(axis=1)

    def mean_loss(self) -> np.ndarray:
        return self.loss.mean(axis=1)

    def to_csv(self) -> str:
        lines = [NOISE_CSV_HEADER]
        for i, s in enumerate(self.sigmas):
            for t in range(self.trials):
                lines.append(f"{s:.8g},{t},{self.accuracy[i, t]:.6f},{self.loss[i, t]:.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class GradStats:
    layers: list[str]             # depth order
    mean_abs_grad: list[float]

    def to_csv(self) -> str:
        lines = [GRAD_CSV_HEADER]
        for i, (name, v) in enumerate(zip(self.layers, self.mean_abs_grad)):
            lines.append(f"{name},{i},{v:.10g}")
        return "\n".join(lines) + "\n"

    def section_means(self, model: MultiExitModel) -> dict[str, float]:
        """Mean of the per-layer stats grouped by top-level model part."""
        groups: dict[str, list[float]] = {}
        for name, v in zip(self.layers, self.mean_abs_grad):
            top = ".".join(name.split(".")[:2]) if name.startswith("sections") else name.split(".")[0]
            groups.setdefault(top, []).append(v)
        return {k: float(np.mean(v)) for k, v in groups.items()}


@dataclass
class SeparabilityReport:
    exits: list[int]
    sse: list[float]
    ssb: list[float]
    ratio: list[float | None]     # None where SSB == 0
    accuracy: list[float]

    def to_csv(self) -> str:
        lines = [SEP_CSV_HEADER]
        for e, s, b, r, a in zip(self.exits, self.sse, self.ssb, self.ratio, self.accuracy):
            rtxt = "nan" if r is None else f"{r:.6f}"
            lines.append(f"{e},{s:.6f},{b:.6f},{rtxt},{a:.6f}")
        return "\n".join(lines) + "\n"


def parameter_hash(model: MultiExitModel) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def weight_std(model: MultiExitModel) -> float:
    """Std of all conv/fc weight entries pooled together (bias/norm excluded)."""
    chunks = [p.data.reshape(-1) for name, p in model.named_parameters()
              if name.endswith("weight")]
    return float(np.concatenate(chunks).std())


def default_sigma_grid(model: MultiExitModel, steps: int = 10) -> list[float]:
    return list(np.linspace(0.0, 2.0 * weight_std(model), steps))


def _eval_accuracy_loss(model: MultiExitModel, split: Split, exit_index: int,
                        batch_size: int = 256) -> tuple[float, float]:
    correct = 0
    loss_sum = 0.0
    nb = 0
    with T.no_grad():
        for xb, yb in batches(split, batch_size):
            z, _ = model.forward_to_exit(xb, exit_index)
            correct += int((z.data.argmax(axis=1) == yb).sum())
            loss_sum += cross_entropy_logits(z, yb).item()
            nb += 1
    return 100.0 * correct / len(split), loss_sum / nb


def noise_probe(model: MultiExitModel, train_split: Split, sigmas=None, trials: int = 5,
                seed: int = 0, exit_index: int | None = None) -> NoiseProbeResult:
    """Accuracy/loss on the train split after adding N(0, sigma^2) to every parameter.

    Perturbations hit weights, biases, and norm scale/shift, never the
    running statistics. The probed exit defaults to the deepest one. The
    input model's parameters are restored exactly after every trial.
    """
    if sigmas is None:
        sigmas = default_sigma_grid(model)
    sigmas = list(sigmas)
    if sorted(sigmas) != sigmas or (sigmas and sigmas[0] != 0.0):
        raise ValueError("sigmas must be sorted ascending and start at 0")
    exit_index = exit_index if exit_index is not None else model.exit_indices[-1]
    was_training = model.training
    model.eval()
    params = model.parameters()
    originals = [p.data.copy() for p in params]
    streams = np.random.SeedSequence(seed).spawn(len(sigmas) * trials)
    acc = np.zeros((len(sigmas), trials))
    loss = np.zeros((len(sigmas), trials))
    try:
        for i, sigma in enumerate(sigmas):
            for t in range(trials):
                if sigma > 0.0:
                    rng = np.random.default_rng(streams[i * trials + t])
                    for p, orig in zip(params, originals):
                        p.data = orig + rng.normal(0.0, sigma, size=orig.shape).astype(orig.dtype)
                acc[i, t], loss[i, t] = _eval_accuracy_loss(model, train_split, exit_index)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
        model.train(was_training)
    return NoiseProbeResult(sigmas, acc, loss, trials)


def grad_stats(model: MultiExitModel, batch_x, batch_y, regime: str = "self_distill",
               distill=None) -> GradStats:
    """Mean |d loss / d weight| for each conv/fc weight, in depth order."""
    from .losses import DistillConfig
    from .training import TrainPlan

    plan = TrainPlan(regime=regime, distill=distill or DistillConfig())
    config = plan.effective_distill()
    was_training = model.training
    model.train(True)
    model.zero_grad()
    try:
        x = Tensor(np.asarray(batch_x, dtype=np.float32))
        if plan.regime == "standard":
            z, _ = model.forward_to_exit(x, model.exit_indices[-1])
            loss = cross_entropy_logits(z, batch_y)
        else:
            loss = total_loss(model.forward(x), batch_y, config).total
        T.backward(loss)
        layers, values = [], []
        for name, p in model.named_parameters():
            if not name.endswith("weight"):
                continue
            g = p.grad
            layers.append(name)
            values.append(0.0 if g is None else float(np.abs(g).mean()))
    finally:
        model.zero_grad()
        model.train(was_training)
    return GradStats(layers, values)


def _pooled_exit_features(model: MultiExitModel, split: Split, batch_size: int = 256):
    """Per-exit feature matrix (N x D): aligned features, globally pooled."""
    feats = [[] for _ in range(model.num_exits)]
    labels = []
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            for xb, yb in batches(split, batch_size):
                outs = model.forward(xb)
                for i, f in enumerate(outs.features):
                    pooled = T.global_avgpool(f).data if f.ndim == 4 else f.data
                    feats[i].append(pooled)
                labels.append(yb)
    finally:
        model.train(was_training)
    return [np.concatenate(f) for f in feats], np.concatenate(labels)


def sse_ssb(features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Within-class and between-class sums of squares, per-class normalized.

    SSE = sum over classes of mean_{x in class} ||x - mu_class||^2
    SSB = sum over classes of ||mu_class - mu_global||^2
    """
    mu_global = features.mean(axis=0)
    sse = 0.0
    ssb = 0.0
    for cls in np.unique(labels):
        idx = labels == cls
        n_c = int(idx.sum())
        if n_c < 1:
            warnings.warn(f"class {cls} has no samples; skipped")
            continue
        mu_c = features[idx].mean(axis=0)
        sse += float(((features[idx] - mu_c) ** 2).sum()) / n_c
        ssb += float(((mu_c - mu_global) ** 2).sum())
    return sse, ssb


def separability(model: MultiExitModel, split: Split) -> SeparabilityReport:
    """Per-exit SSE, SSB, their ratio, and exit accuracy on a labeled split."""
    feats, labels = _pooled_exit_features(model, split)
    from .training import evaluate
    accs, _ = evaluate(model, split)
    sses, ssbs, ratios = [], [], []
    for f in feats:
        sse, ssb = sse_ssb(f, labels)
        sses.append(sse)
        ssbs.append(ssb)
        ratios.append(sse / ssb if ssb > 0 else None)
    return SeparabilityReport(list(model.exit_indices), sses, ssbs, ratios, accs)


def top_eigenpairs(cov: np.ndarray, k: int, tol: float = 1e-8, max_iter: int = 10_000,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenvalues/vectors of a symmetric PSD matrix.

    Power iteration with deflation: after converging each direction, its
    component is subtracted from the matrix and iteration restarts.
    """
    d = cov.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= components <= {d}, got {k}")
    rng = np.random.default_rng(seed)
    mat = cov.astype(np.float64).copy()
    values = np.zeros(k)
    vectors = np.zeros((d, k))
    for j in range(k):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            nxt = mat @ v
            norm = np.linalg.norm(nxt)
            if norm == 0.0:
                break  # exhausted spectrum: remaining eigenvalues are 0
            nxt /= norm
            if np.linalg.norm(nxt - v) < tol or np.linalg.norm(nxt + v) < tol:
                v = nxt
                break
            v = nxt
        lam = float(v @ mat @ v)
        values[j] = lam
        vectors[:, j] = v
        mat -= lam * np.outer(v, v)
    return values, vectors


def export_features_pca(model: MultiExitModel, split: Split, exit_index: int,
                        components: int = 2, seed: int = 0):
    """Project one exit's pooled features onto their leading principal axes.

    Returns (rows, eigenvalues) where rows is an N x (2 + components) array
    of (sample, label, pc1, pc2, ...). Features are centered; the covariance
    uses the 1/(N-1) normalization.
    """
    feats, labels = _pooled_exit_features(model, split)
    if exit_index not in model.exit_indices:
        raise ValueError(f"exit {exit_index} not in model (has {model.exit_indices})")
    f = feats[model.exit_indices.index(exit_index)].astype(np.float64)
    n, d = f.shape
    if n <= components:
        raise ValueError(f"need more samples ({n}) than components ({components})")
    centered = f - f.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    values, vectors = top_eigenpairs(cov, components, seed=seed)
    proj = centered @ vectors
    rows = np.column_stack([np.arange(n), labels, proj])
    return rows, values


def pca_csv(rows: np.ndarray) -> str:
    k = rows.shape[1] - 2
    header = "sample,label," + ",".join(f"pc{i + 1}" for i in range(k))
    lines = [header]
    for r in rows:
        comps = ",".join(f"{v:.8g}" for v in r[2:])
        lines.append(f"{int(r[0])},{int(r[1])},{comps}")
    return "\n".join(lines) + "\n"
