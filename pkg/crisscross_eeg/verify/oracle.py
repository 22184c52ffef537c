"""Brute-force references for attention, the energy vector, the masked loss
and the metric suite, and a runner that reports the worst deviation of the
production code from each of them.

Every reference is written with plain numpy loops or dense masks so that it
shares no code with the implementation it checks.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from crisscross_eeg.core import metrics
from crisscross_eeg.core.attention import GridAttention, s_attention, t_attention
from crisscross_eeg.core.encoder import fft_energy
from crisscross_eeg.core.model import ATTENTION_VARIANTS, ModelConfig, masked_mse
from crisscross_eeg.core.params import build_model
from crisscross_eeg.core.utils import derive_seed

logger = logging.getLogger(__name__)

STRIPE_GRIDS = tuple(itertools.product((1, 3, 8), (1, 4, 10)))
KAPPA_ANCHOR = 0.6939


@dataclass
class OracleCheck:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation < self.tolerance)


@dataclass
class OracleReport:
    checks: list[OracleCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failing(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "check": [c.name for c in self.checks],
                "max_deviation": [c.deviation for c in self.checks],
                "tolerance": [c.tolerance for c in self.checks],
                "passed": [c.passed for c in self.checks],
            }
        )


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def stripe_mask(channels: int, n_patches: int, axis: str) -> np.ndarray:
    """``[Cn, Cn]`` boolean mask of allowed (query, key) pairs, tokens channel-major."""
    c = np.repeat(np.arange(channels), n_patches)
    t = np.tile(np.arange(n_patches), channels)
    if axis == "spatial":
        return t[:, None] == t[None, :]
    if axis == "temporal":
        return c[:, None] == c[None, :]
    return np.ones((channels * n_patches,) * 2, dtype=bool)


def masked_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, allowed: np.ndarray
) -> np.ndarray:
    """Softmax attention over flattened tokens with disallowed logits at -inf."""
    logits = q @ k.T / np.sqrt(q.shape[-1])
    logits = np.where(allowed, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights @ v


def _layer_norm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * weight


def grid_attention_reference(module: GridAttention, x: np.ndarray) -> np.ndarray:
    """Multi-head stripe attention on one ``[C, n, d]`` grid, from module weights."""
    channels, n_patches, d = x.shape
    w = {n: p.detach().double().numpy() for n, p in module.named_parameters()}
    tokens = x.reshape(channels * n_patches, d)
    q = tokens @ w["q_proj.weight"].T + w["q_proj.bias"]
    k = tokens @ w["k_proj.weight"].T + w["k_proj.bias"]
    v = tokens @ w["v_proj.weight"].T + w["v_proj.bias"]
    dk = module.dk
    heads = []
    for h, axis in enumerate(module.head_axes):
        cols = slice(h * dk, (h + 1) * dk)
        heads.append(
            masked_attention(
                _layer_norm(q[:, cols], w["q_norm.weight"]),
                _layer_norm(k[:, cols], w["k_norm.weight"]),
                v[:, cols],
                stripe_mask(channels, n_patches, axis),
            )
        )
    merged = np.concatenate(heads, axis=-1)
    out = merged @ w["out_proj.weight"].T + w["out_proj.bias"]
    return out.reshape(channels, n_patches, d)


def check_stripe_equivalence(seed: int = 0, d: int = 16, n_heads: int = 2) -> float:
    """Worst gap between single stripe heads and masked full attention."""
    rng = np.random.default_rng(seed)
    dk = d // n_heads
    worst = 0.0
    for channels, n_patches in STRIPE_GRIDS:
        x = rng.normal(size=(channels, n_patches, d))
        flat = x.reshape(-1, d)
        for head_fn, axis in ((s_attention, "spatial"), (t_attention, "temporal")):
            for _ in range(n_heads):
                w_q, w_k, w_v = rng.normal(size=(3, d, dk)) / np.sqrt(d)
                got = head_fn(*(torch.from_numpy(a) for a in (x, w_q, w_k, w_v)))
                allowed = stripe_mask(channels, n_patches, axis)
                want = masked_attention(flat @ w_q, flat @ w_k, flat @ w_v, allowed)
                gap = np.abs(got.numpy().reshape(-1, dk) - want).max()
                worst = max(worst, float(gap))
    return worst


def check_variant_layers(variant: str, seed: int = 0) -> float:
    """Worst gap between every layer's attention and the dense reference."""
    cfg = ModelConfig.tiny(attention_variant=variant)
    model = build_model(cfg, seed=derive_seed(seed, "oracle", variant))
    rng = np.random.default_rng(derive_seed(seed, "oracle-input", variant))
    worst = 0.0
    for channels, n_patches in ((1, 1), (3, 4), (1, 4), (3, 1)):
        x = rng.normal(size=(channels, n_patches, cfg.d))
        for block in model.blocks:
            with torch.no_grad():
                got, _ = block.attn(torch.from_numpy(x).unsqueeze(0))
            want = grid_attention_reference(block.attn, x)
            worst = max(worst, float(np.abs(got.squeeze(0).numpy() - want).max()))
    return worst


# ---------------------------------------------------------------------------
# Energy vector and loss
# ---------------------------------------------------------------------------


def naive_dft_power(patch: np.ndarray) -> np.ndarray:
    """``|X_k|^2 / t`` for ``k = 0 .. t//2`` by direct summation."""
    t = patch.shape[-1]
    out = np.empty(t // 2 + 1)
    for k in range(t // 2 + 1):
        phase = np.exp(-2j * np.pi * k * np.arange(t) / t)
        out[k] = np.abs(np.sum(patch * phase)) ** 2 / t
    return out


def check_dft(seed: int = 0) -> float:
    """Worst relative gap between ``fft_energy`` and the direct DFT."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in (16, 17, 200):
        for _ in range(4):
            patch = rng.normal(size=t)
            got = fft_energy(torch.from_numpy(patch)).numpy()
            want = naive_dft_power(patch)
            worst = max(worst, float(np.abs(got - want).max() / np.abs(want).max()))
    return worst


def tone_concentration(frequency: int = 10, t: int = 200) -> float:
    """Share of a pure tone's energy that lands in its own bin."""
    patch = np.sin(2 * np.pi * frequency * np.arange(t) / t)
    energy = fft_energy(torch.from_numpy(patch)).numpy()
    return float(energy[frequency] / energy.sum())


def loop_masked_mse(
    x_hat: np.ndarray, originals: np.ndarray, mask: np.ndarray
) -> float:
    """Scalar-loop masked MSE for ``[B, C, n, t]`` arrays."""
    batch, channels, n_patches, t = x_hat.shape
    sample_means = []
    for b in range(batch):
        total, count = 0.0, 0
        for c in range(channels):
            for j in range(n_patches):
                if not mask[b, c, j]:
                    continue
                for i in range(t):
                    total += (x_hat[b, c, j, i] - originals[b, c, j, i]) ** 2
                count += 1
        if count:
            sample_means.append(total / (count * t))
    return sum(sample_means) / len(sample_means)


def check_masked_mse(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in ((3, 4, 5, 8), (1, 1, 1, 4), (2, 1, 6, 3)):
        x_hat, originals = rng.normal(size=shape), rng.normal(size=shape)
        mask = rng.random(shape[:-1]) < 0.5
        mask.reshape(shape[0], -1)[:, 0] = True
        tensors = (torch.from_numpy(a) for a in (x_hat, originals, mask))
        got = masked_mse(*tensors).item()
        worst = max(worst, abs(got - loop_masked_mse(x_hat, originals, mask)))
    return worst


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _confusion(preds, labels) -> tuple[np.ndarray, list]:
    classes = sorted(set(labels.tolist()) | set(preds.tolist()))
    table = np.zeros((len(classes), len(classes)))
    for p, y in zip(preds, labels):
        table[classes.index(y), classes.index(p)] += 1
    return table, classes


def brute_balanced_accuracy(preds, labels) -> float:
    table, _ = _confusion(preds, labels)
    support = table.sum(axis=1)
    recalls = [table[k, k] / support[k] for k in range(len(table)) if support[k]]
    return sum(recalls) / len(recalls)


def brute_kappa(preds, labels) -> float:
    table, _ = _confusion(preds, labels)
    n = table.sum()
    observed = np.trace(table) / n
    expected = sum(table[k].sum() * table[:, k].sum() for k in range(len(table))) / n**2
    return (observed - expected) / (1 - expected)


def brute_weighted_f1(preds, labels) -> float:
    table, _ = _confusion(preds, labels)
    total, support_sum = 0.0, 0.0
    for k in range(len(table)):
        tp = table[k, k]
        fp = table[:, k].sum() - tp
        fn = table[k].sum() - tp
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += table[k].sum() * f1
        support_sum += table[k].sum()
    return total / support_sum


def brute_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def brute_auc_pr(scores, labels) -> float:
    """Average precision as a step sum over distinct thresholds, highest first."""
    positives = sum(1 for y in labels if y == 1)
    area, previous_recall = 0.0, 0.0
    for threshold in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= threshold and y == 1)
        predicted = sum(1 for s in scores if s >= threshold)
        recall = tp / positives
        area += (recall - previous_recall) * tp / predicted
        previous_recall = recall
    return area


def brute_pearson(preds, labels) -> float:
    n = len(preds)
    mp, ml = sum(preds) / n, sum(labels) / n
    cov = sum((p - mp) * (y - ml) for p, y in zip(preds, labels))
    sp = sum((p - mp) ** 2 for p in preds) ** 0.5
    sl = sum((y - ml) ** 2 for y in labels) ** 0.5
    return cov / (sp * sl)


def brute_r2(preds, labels) -> float:
    mean = sum(labels) / len(labels)
    residual = sum((y - p) ** 2 for p, y in zip(preds, labels))
    spread = sum((y - mean) ** 2 for y in labels)
    return 1 - residual / spread


def brute_rmse(preds, labels) -> float:
    return (sum((p - y) ** 2 for p, y in zip(preds, labels)) / len(labels)) ** 0.5


def check_metrics(seed: int = 0, trials: int = 25) -> float:
    """Worst gap between the metric suite and the references on sets of n <= 50."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(5, 51))
        labels = rng.integers(0, 3, size=n)
        preds = np.where(rng.random(n) < 0.6, labels, rng.integers(0, 3, size=n))
        labels[:2], preds[:2] = (0, 1), (1, 0)
        pairs = (
            (metrics.balanced_accuracy, brute_balanced_accuracy),
            (metrics.cohen_kappa, brute_kappa),
            (metrics.weighted_f1, brute_weighted_f1),
        )
        for fast, slow in pairs:
            worst = max(worst, abs(fast(preds, labels) - slow(preds, labels)))

        binary = rng.integers(0, 2, size=n)
        binary[:2] = (0, 1)
        scores = np.round(rng.random(n), 1)
        pairs = ((metrics.auroc, brute_auroc), (metrics.auc_pr, brute_auc_pr))
        for fast, slow in pairs:
            worst = max(worst, abs(fast(scores, binary) - slow(scores, binary)))

        target = rng.normal(size=n)
        estimate = target + rng.normal(scale=0.5, size=n)
        pairs = (
            (metrics.pearson_r, brute_pearson),
            (metrics.r2, brute_r2),
            (metrics.rmse, brute_rmse),
        )
        for fast, slow in pairs:
            worst = max(worst, abs(fast(estimate, target) - slow(estimate, target)))
    return float(worst)


def kappa_anchor_labels() -> tuple[np.ndarray, np.ndarray]:
    """Predictions and labels whose confusion matrix is ``[[50, 10], [5, 35]]``."""
    labels = np.array([0] * 60 + [1] * 40)
    preds = np.array([0] * 50 + [1] * 10 + [0] * 5 + [1] * 35)
    return preds, labels


def run_oracles(seed: int = 0) -> OracleReport:
    report = OracleReport()
    stripes = check_stripe_equivalence(seed)
    report.checks.append(OracleCheck("stripe_equivalence", stripes, 1e-6))
    for variant in ATTENTION_VARIANTS:
        report.checks.append(
            OracleCheck(
                f"attention_{variant}", check_variant_layers(variant, seed), 1e-6
            )
        )
    report.checks.append(OracleCheck("dft_energy", check_dft(seed), 1e-9))
    leakage = 1.0 - tone_concentration()
    report.checks.append(OracleCheck("tone_bin_leakage", leakage, 0.01))
    report.checks.append(OracleCheck("masked_mse", check_masked_mse(seed), 1e-10))
    report.checks.append(OracleCheck("metrics", check_metrics(seed), 1e-9))
    preds, labels = kappa_anchor_labels()
    gap = abs(metrics.cohen_kappa(preds, labels) - KAPPA_ANCHOR)
    report.checks.append(OracleCheck("kappa_anchor", gap, 1e-3))
    logger.info(
        "Oracles: %s",
        "all within tolerance" if report.passed else f"FAIL in {report.failing}",
    )
    return report
