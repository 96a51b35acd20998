"""Evaluation measures: equivariance gap, adversary score, test MMD, accuracy.

The distance-based measures are computed on feature-wise min-max normalized
vectors; the adversary is a freshly initialized three-hidden-layer network
with batch normalization trained for a fixed budget per call.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import losses
from .data import SiteDataset
from .liegroup import ConfigError
from .losses import KernelConfig
from .nn import Adam, ModelBundle

ADV_EPOCHS = 150
ADV_BATCH = 128
ADV_LR = 1e-3
ADV_HIDDEN = 64
ADV_TRAIN_CAP = 4096
PAIR_BUDGET = 50_000


class DegenerateFeatureError(ValueError):
    """A vector with max == min cannot be min-max normalized."""


@dataclass(frozen=True)
class MetricsReport:
    delta_eq: float
    delta_eq_sum: float
    adv: float
    mmd: float
    mmd_x100: float
    acc: float

    def as_dict(self) -> dict:
        return asdict(self)


def minmax_normalize(z: np.ndarray) -> np.ndarray:
    """Scale a vector to [0, 1]; errors on constant input."""
    z = np.asarray(z, dtype=np.float64)
    lo, hi = z.min(), z.max()
    if hi <= lo:
        raise DegenerateFeatureError("constant vector cannot be min-max normalized")
    return (z - lo) / (hi - lo)


def minmax_normalize_columns(mat: np.ndarray) -> np.ndarray:
    """Column-wise min-max over an evaluation set; constant columns map to 0."""
    mat = np.asarray(mat, dtype=np.float64)
    lo = mat.min(axis=0)
    span = mat.max(axis=0) - lo
    out = np.zeros_like(mat)
    keep = span > 0
    out[:, keep] = (mat[:, keep] - lo[keep]) / span[keep]
    return out


def _sample_pairs(count: int, budget: int, seed: int):
    total = count * (count - 1) // 2
    if total <= budget:
        rows, cols = np.triu_indices(count, k=1)
        return rows, cols
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, count, size=budget)
    offs = rng.integers(1, count, size=budget)
    cols = (rows + offs) % count
    return rows, cols


def delta_eq(test: SiteDataset, bundle: ModelBundle, pair_budget: int = PAIR_BUDGET,
             seed: int = 0):
    """Covariate-weighted pairwise distance of normalized rotation features.

    Returns (per-pair mean, raw sum over the sampled pairs). Pair sampling is
    tied to the sorted sample ids so reordering the dataset cannot change
    the value.
    """
    if len(test) < 2:
        raise ConfigError("delta_eq needs at least two samples")
    order = np.argsort(test.ids, kind="stable")
    data = test.subset(order)
    latents = bundle.encoder(ad.constant(data.features)).value
    flats = bundle.tau_net(ad.constant(latents)).value
    normed = minmax_normalize_columns(flats)
    rows, cols = _sample_pairs(len(data), pair_budget, seed)
    diffs = normed[rows] - normed[cols]
    weights = np.abs(data.covariate[rows] - data.covariate[cols])
    contributions = weights * np.einsum("pd,pd->p", diffs, diffs)
    return float(contributions.mean()), float(contributions.sum())


class _Adversary:
    """Three-hidden-layer site predictor with batch normalization."""

    def __init__(self, dim: int, n_classes: int, seed: int):
        rng = np.random.default_rng(seed)
        widths = [dim, ADV_HIDDEN, ADV_HIDDEN, ADV_HIDDEN, n_classes]
        self.weights, self.biases, self.gammas, self.betas = [], [], [], []
        self.run_mean, self.run_var = [], []
        for k, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (fi + fo))
            self.weights.append(ad.Parameter(rng.uniform(-limit, limit, (fi, fo)),
                                             f"adv.w{k}"))
            self.biases.append(ad.Parameter(np.zeros(fo), f"adv.b{k}"))
            if k < len(widths) - 2:
                self.gammas.append(ad.Parameter(np.ones(fo), f"adv.g{k}"))
                self.betas.append(ad.Parameter(np.zeros(fo), f"adv.be{k}"))
                self.run_mean.append(np.zeros(fo))
                self.run_var.append(np.ones(fo))

    @property
    def params(self):
        return self.weights + self.biases + self.gammas + self.betas

    def train_logits(self, x: np.ndarray) -> ad.Node:
        h = ad.constant(x)
        for k in range(len(self.weights) - 1):
            h = ad.bias_add(ad.matmul(h, self.weights[k]), self.biases[k])
            self.run_mean[k] = 0.9 * self.run_mean[k] + 0.1 * h.value.mean(axis=0)
            self.run_var[k] = 0.9 * self.run_var[k] + 0.1 * h.value.var(axis=0)
            h = ad.relu(ad.batch_norm(h, self.gammas[k], self.betas[k]))
        return ad.bias_add(ad.matmul(h, self.weights[-1]), self.biases[-1])

    def eval_probs(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for k in range(len(self.weights) - 1):
            h = h @ self.weights[k].value + self.biases[k].value
            h = (h - self.run_mean[k]) / np.sqrt(self.run_var[k] + 1e-5)
            h = np.maximum(h * self.gammas[k].value + self.betas[k].value, 0.0)
        logits = h @ self.weights[-1].value + self.biases[-1].value
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC for binary labels with tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    # average ranks over ties
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    pos_ranks = ranks[labels == 1]
    return float((pos_ranks.sum() - len(pos) * (len(pos) + 1) / 2)
                 / (len(pos) * len(neg)))


def adv_metric(train_codes: np.ndarray, train_sites: np.ndarray,
               test_codes: np.ndarray, test_sites: np.ndarray,
               skewed: bool = False, seed: int = 0) -> float:
    """Test score of a freshly trained site adversary.

    Accuracy by default, ROC-AUC when the skewed flag is set (binary site
    only). A new network is initialized on every call. Training rows are
    capped for runtime; the cap draw is seeded.
    """
    sites = np.unique(train_sites)
    if len(sites) < 2:
        raise ConfigError("adversary needs at least two sites in training data")
    remap = {s: k for k, s in enumerate(sites)}
    y_train = np.array([remap[s] for s in train_sites])
    y_test = np.array([remap[s] for s in test_sites])
    x_train = np.asarray(train_codes, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if len(x_train) > ADV_TRAIN_CAP:
        keep = rng.choice(len(x_train), ADV_TRAIN_CAP, replace=False)
        x_train, y_train = x_train[keep], y_train[keep]
    net = _Adversary(x_train.shape[1], len(sites), seed)
    opt = Adam(net.params, lr=ADV_LR)
    for _ in range(ADV_EPOCHS):
        order = rng.permutation(len(x_train))
        for start in range(0, len(x_train), ADV_BATCH):
            idx = order[start:start + ADV_BATCH]
            if len(idx) < 2:
                continue  # batch statistics are undefined on singletons
            opt.zero_grad()
            loss = ad.softmax_cross_entropy(net.train_logits(x_train[idx]),
                                            y_train[idx])
            ad.backward(loss)
            opt.step()
    probs = net.eval_probs(np.asarray(test_codes, dtype=np.float64))
    if skewed:
        if len(sites) != 2:
            raise ConfigError("ROC-AUC adversary score requires exactly two sites")
        return roc_auc(probs[:, 1], y_test)
    return float((probs.argmax(axis=1) == y_test).mean())


def mmd_test_metric(codes_by_site, cfg: KernelConfig = KernelConfig()) -> dict:
    """Multi-site MMD on min-max normalized test codes; raw and x100."""
    batches = [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in codes_by_site]
    if len(batches) < 2 or any(len(z) < 2 for z in batches):
        raise ConfigError("mmd metric needs >= 2 sites with >= 2 samples each")
    pooled = minmax_normalize_columns(np.vstack(batches))
    split_at = np.cumsum([len(z) for z in batches])[:-1]
    normed = np.split(pooled, split_at)
    value = float(losses.mmd_multisite(normed, cfg).value)
    return {"raw": value, "x100": 100.0 * value}


def codes_for(dataset: SiteDataset, bundle: ModelBundle) -> np.ndarray:
    """Invariant codes of a dataset under the trained model (no gradients)."""
    latents = bundle.encoder(ad.constant(dataset.features)).value
    return losses.phi_batch(ad.constant(latents), bundle.tau_net, bundle.b_net).value


def acc_metric(test: SiteDataset, bundle: ModelBundle) -> float:
    """Fraction of correct thresholded head predictions on the test set.

    The head is fit by squared error against labels in {0, 1}, so the
    decision boundary sits at the midpoint 0.5 of the two target values.
    """
    if len(test) == 0:
        raise ConfigError("empty test set")
    scores = bundle.head(ad.constant(codes_for(test, bundle))).value[:, 0]
    preds = (scores > 0.5).astype(np.int64)
    return float((preds == test.labels).mean())


def evaluate(bundle: ModelBundle, train: SiteDataset, test: SiteDataset,
             cfg=None, adv_skewed: bool = False, seed: int = 0) -> MetricsReport:
    """All four measures on the held-out test partition."""
    d_mean, d_sum = delta_eq(test, bundle, seed=seed)
    train_codes = codes_for(train, bundle)
    test_codes = codes_for(test, bundle)
    adv = adv_metric(train_codes, train.site, test_codes, test.site,
                     skewed=adv_skewed, seed=seed)
    by_site = [test_codes[test.site == s] for s in np.unique(test.site)]
    mmd = mmd_test_metric(by_site)
    acc = acc_metric(test, bundle)
    return MetricsReport(delta_eq=d_mean, delta_eq_sum=d_sum, adv=adv,
                         mmd=mmd["raw"], mmd_x100=mmd["x100"], acc=acc)


def aggregate(reports) -> dict:
    """Seed-wise mean/std for every metric field."""
    fields = ["delta_eq", "delta_eq_sum", "adv", "mmd", "mmd_x100", "acc"]
    out = {}
    for name in fields:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(values.mean()), "std": float(values.std())}
    return out


def export_embeddings(dataset: SiteDataset, bundle: ModelBundle, path) -> None:
    """CSV of per-sample codes and flattened rotation features."""
    latents = bundle.encoder(ad.constant(dataset.features)).value
    flats = bundle.tau_net(ad.constant(latents)).value
    codes = losses.phi_batch(ad.constant(latents), bundle.tau_net, bundle.b_net).value
    n = codes.shape[1]
    header = (["id", "site", "covariate", "label"]
              + [f"phi_{k}" for k in range(n)]
              + [f"tau_{k}" for k in range(flats.shape[1])])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            writer.writerow([dataset.ids[i], dataset.site[i],
                             repr(float(dataset.covariate[i])), dataset.labels[i]]
                            + [repr(float(v)) for v in codes[i]]
                            + [repr(float(v)) for v in flats[i]])
