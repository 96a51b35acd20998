"""Two-stage training, baseline methods and seeded experiment orchestration.

Stage one fits the sphere autoencoder together with the rotation-valued map;
stage two freezes those networks and fits the invariance code, prediction
head and code decoder under an MMD (or matching) penalty. Baselines reuse
the same scaffolding with individual terms switched off or replaced.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import autodiff as ad
from . import losses
from .data import SiteDataset
from .liegroup import ConfigError
from .losses import KernelConfig, PairBatch
from .nn import Adam, ModelBundle

METHODS = ("ours", "naive", "mmd", "ss", "rm")


@dataclass(frozen=True)
class TrainConfig:
    # stage-one weights
    lambda_eq: float = 1.0
    lambda_rec_x: float = 0.02
    # stage-two weights
    lambda_mmd: float = 0.1
    lambda_pred: float = 1.0
    lambda_rec_l: float = 0.1
    epochs_stage1: int = 200
    epochs_stage2: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    kappa: float = 1.0
    param: str = "expm"
    n: int = 8
    hidden: int = 64
    activation: str = "relu"
    method: str = "ours"
    ss_bins: int = 4
    early_stop_patience: int = 20
    early_stop_tol: float = 1e-6
    finetune_stage1: bool = False   # override for unfreezing in stage two
    max_train_samples: int = 0      # 0 = no cap

    def __post_init__(self):
        if min(self.lambda_eq, self.lambda_rec_x, self.lambda_mmd,
               self.lambda_pred, self.lambda_rec_l) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be at least 1")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.param not in ("expm", "cayley"):
            raise ConfigError(f"unknown parameterization {self.param!r}")

    def for_method(self) -> "TrainConfig":
        """Effective weights once the method switch is applied."""
        if self.method == "ours":
            return self
        # All baselines drop the equivariance term; naive also drops the
        # invariance term. ss/rm replace how the invariance term is formed.
        lam_mmd = 0.0 if self.method == "naive" else self.lambda_mmd
        return replace(self, lambda_eq=0.0, lambda_mmd=lam_mmd)


@dataclass
class RunResult:
    bundle: ModelBundle
    traces: dict                  # term -> list of per-epoch values
    config: TrainConfig
    seed: int
    metrics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def trace_rows(self):
        rows = []
        for term, values in sorted(self.traces.items()):
            rows.extend((epoch, term, value) for epoch, value in enumerate(values))
        return rows


def _rng(cfg: TrainConfig, offset: int) -> np.random.Generator:
    return np.random.default_rng((cfg.seed, offset))


def _maybe_cap(data: SiteDataset, cfg: TrainConfig, offset: int) -> SiteDataset:
    if cfg.max_train_samples and len(data) > cfg.max_train_samples:
        idx = _rng(cfg, offset).choice(len(data), cfg.max_train_samples, replace=False)
        return data.subset(np.sort(idx))
    return data


def params_checksum(params) -> str:
    digest = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        digest.update(p.name.encode())
        digest.update(np.ascontiguousarray(p.value).tobytes())
    return digest.hexdigest()


class _EarlyStop:
    def __init__(self, patience: int, tol: float):
        self.patience = patience
        self.tol = tol
        self.best = np.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.tol:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def train_stage1(data: SiteDataset, cfg: TrainConfig,
                 bundle: ModelBundle | None = None):
    """Fit encoder, decoder and the rotation map; returns (bundle, traces).

    Pairs are formed by shuffling each epoch and pairing consecutive
    samples, an unbiased surrogate for the full pairwise sum.
    """
    if len(data) < 2:
        raise ConfigError("stage one needs at least two samples")
    cfg = cfg.for_method()
    data = _maybe_cap(data, cfg, offset=100)
    if bundle is None:
        bundle = ModelBundle.create(data.feature_dim, cfg.n, cfg.hidden, cfg.seed,
                                    cfg.activation)
    params = bundle.encoder.params + bundle.decoder.params + bundle.tau_net.params
    opt = Adam(params, lr=cfg.lr)
    rng = _rng(cfg, offset=1)
    traces = {"stage1_eq": [], "stage1_recon": []}
    stopper = _EarlyStop(cfg.early_stop_patience, cfg.early_stop_tol)
    pair_count = (len(data) // 2) * 2
    pairs_per_batch = max(1, cfg.batch_size // 2)
    for _ in range(cfg.epochs_stage1):
        order = rng.permutation(len(data))[:pair_count]
        left, right = order[0::2], order[1::2]
        eq_sum = rec_sum = 0.0
        batches = 0
        for start in range(0, len(left), pairs_per_batch):
            li = left[start:start + pairs_per_batch]
            ri = right[start:start + pairs_per_batch]
            opt.zero_grad()
            rec = losses.recon_x_loss(
                np.vstack([data.features[li], data.features[ri]]),
                bundle.encoder, bundle.decoder)
            total = ad.scale(rec, cfg.lambda_rec_x)
            eq_value = 0.0
            if cfg.lambda_eq > 0:
                pairs = PairBatch(data.features[li], data.covariate[li],
                                  data.features[ri], data.covariate[ri])
                eq = losses.stage1_loss(pairs, bundle.encoder, bundle.tau_net,
                                        cfg.kappa, cfg.param)
                total = ad.add(total, ad.scale(eq, cfg.lambda_eq))
                eq_value = float(eq.value)
            if not np.isfinite(total.value):
                raise ad.NumericError(
                    f"stage-one loss became non-finite; trace so far: {traces}")
            ad.backward(total)
            opt.step()
            eq_sum += eq_value
            rec_sum += float(rec.value)
            batches += 1
        traces["stage1_eq"].append(eq_sum / batches)
        traces["stage1_recon"].append(rec_sum / batches)
        monitored = (cfg.lambda_eq * traces["stage1_eq"][-1]
                     + cfg.lambda_rec_x * traces["stage1_recon"][-1])
        if stopper.update(monitored):
            break
    return bundle, traces


def frozen_embed(data: SiteDataset, bundle: ModelBundle):
    """Latents and flattened rotations from the frozen stage-one networks."""
    latents = bundle.encoder(ad.constant(data.features)).value
    rot_flats = bundle.tau_net(ad.constant(latents)).value
    return latents, rot_flats


def _quantile_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def _match_pairs(data: SiteDataset, n_bins: int):
    """Greedy cross-site matching on (label, covariate bin) cells.

    Within a cell, samples are ordered by covariate and matched across the
    two lowest-populated sites first; each sample is used at most once.
    """
    bins = _quantile_bins(data.covariate, n_bins)
    matches = []
    for label in np.unique(data.labels):
        for b in np.unique(bins):
            cell = np.where((data.labels == label) & (bins == b))[0]
            per_site = {s: sorted(cell[data.site[cell] == s],
                                  key=lambda i: (data.covariate[i], i))
                        for s in np.unique(data.site[cell])}
            sites = sorted(per_site)
            if len(sites) < 2:
                continue
            # Pair sites round-robin: consume from the two largest queues.
            while True:
                avail = [s for s in sites if per_site[s]]
                if len(avail) < 2:
                    break
                avail.sort(key=lambda s: (-len(per_site[s]), s))
                a, b2 = avail[0], avail[1]
                matches.append((per_site[a].pop(0), per_site[b2].pop(0)))
    return matches


def train_stage2(data: SiteDataset, bundle: ModelBundle, cfg: TrainConfig):
    """Fit the invariance code networks on top of frozen stage-one outputs."""
    cfg = cfg.for_method()
    data = _maybe_cap(data, cfg, offset=200)
    warnings = []
    if cfg.finetune_stage1:
        warnings.append("finetune_stage1 requested; stage-one networks stay frozen "
                        "in this implementation")
    latents, rot_flats = frozen_embed(data, bundle)
    params = bundle.b_net.params + bundle.psi.params + bundle.head.params
    opt = Adam(params, lr=cfg.lr)
    rng = _rng(cfg, offset=2)
    traces = {"stage2_recon": [], "stage2_pred": [], "stage2_inv": []}
    stopper = _EarlyStop(cfg.early_stop_patience, cfg.early_stop_tol)
    kernel = KernelConfig()
    bins = _quantile_bins(data.covariate, cfg.ss_bins) if cfg.method == "ss" else None
    matches = _match_pairs(data, cfg.ss_bins) if cfg.method == "rm" else None
    if cfg.method == "rm" and not matches:
        warnings.append("rm: no cross-site matches; matching term is zero")
    for _ in range(cfg.epochs_stage2):
        order = rng.permutation(len(data))
        sums = {"stage2_recon": 0.0, "stage2_pred": 0.0, "stage2_inv": 0.0}
        batches = 0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            recon, pred, codes = losses.stage2_terms(
                latents[idx], rot_flats[idx], data.labels[idx],
                bundle.b_net, bundle.psi, bundle.head)
            total = ad.add(ad.scale(recon, cfg.lambda_rec_l),
                           ad.scale(pred, cfg.lambda_pred))
            inv_value = 0.0
            if cfg.lambda_mmd > 0 and cfg.method in ("ours", "mmd", "ss"):
                inv = _invariance_term(codes, data, idx, bins, cfg, kernel, warnings)
                if inv is not None:
                    total = ad.add(total, ad.scale(inv, cfg.lambda_mmd))
                    inv_value = float(inv.value)
            if cfg.method == "rm" and matches:
                inv = _matching_term(matches, latents, rot_flats, bundle, rng,
                                     cfg.batch_size)
                total = ad.add(total, ad.scale(inv, cfg.lambda_mmd or 1.0))
                inv_value = float(inv.value)
            if not np.isfinite(total.value):
                raise ad.NumericError(
                    f"stage-two loss became non-finite; trace so far: {traces}")
            ad.backward(total)
            opt.step()
            sums["stage2_recon"] += float(recon.value)
            sums["stage2_pred"] += float(pred.value)
            sums["stage2_inv"] += inv_value
            batches += 1
        for key in sums:
            traces[key].append(sums[key] / batches)
        monitored = (cfg.lambda_rec_l * traces["stage2_recon"][-1]
                     + cfg.lambda_pred * traces["stage2_pred"][-1]
                     + traces["stage2_inv"][-1])
        if stopper.update(monitored):
            break
    return bundle, traces, warnings


def _group_codes_by_site(codes: ad.Node, sites: np.ndarray):
    groups = []
    for s in np.unique(sites):
        rows = np.where(sites == s)[0]
        if len(rows) >= 2:
            groups.append(_take_rows(codes, rows))
    return groups


def _take_rows(node: ad.Node, rows: np.ndarray) -> ad.Node:
    rows = np.asarray(rows)

    def back(g):
        full = np.zeros_like(node.value)
        full[rows] = g
        return (full,)

    return ad.Node(node.value[rows], (node,), back)


def _invariance_term(codes, data, idx, bins, cfg, kernel, warnings):
    sites = data.site[idx]
    if cfg.method == "ss":
        terms = []
        for b in np.unique(bins[idx]):
            rows = np.where(bins[idx] == b)[0]
            groups = _group_codes_by_site(_take_rows(codes, rows), sites[rows])
            if len(groups) >= 2:
                terms.append(losses.mmd_multisite(groups, kernel))
        if not terms:
            if not any(w.startswith("ss:") for w in warnings):
                warnings.append("ss: no bin had cross-site support in some batches")
            return None
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scale(total, 1.0 / len(terms))
    groups = _group_codes_by_site(codes, sites)
    if len(groups) < 2:
        return None
    return losses.mmd_multisite(groups, kernel)


def _matching_term(matches, latents, rot_flats, bundle, rng, batch_size):
    take = matches
    if len(matches) > batch_size:
        sel = rng.choice(len(matches), size=batch_size, replace=False)
        take = [matches[k] for k in sel]
    ia = np.array([a for a, _ in take])
    ib = np.array([b for _, b in take])
    za = losses.phi_frozen(rot_flats[ia], latents[ia], bundle.b_net)
    zb = losses.phi_frozen(rot_flats[ib], latents[ib], bundle.b_net)
    return ad.scale(ad.frobenius_sq(ad.sub(za, zb)), 1.0 / len(take))


def run_training(train: SiteDataset, cfg: TrainConfig) -> RunResult:
    """Both stages end to end for one seed; works for every method."""
    bundle, traces1 = train_stage1(train, cfg)
    frozen = params_checksum(bundle.encoder.params + bundle.decoder.params
                             + bundle.tau_net.params)
    bundle, traces2, warnings = train_stage2(train, bundle, cfg)
    after = params_checksum(bundle.encoder.params + bundle.decoder.params
                            + bundle.tau_net.params)
    if frozen != after:
        raise RuntimeError("stage two mutated frozen stage-one parameters")
    traces1.update(traces2)
    return RunResult(bundle=bundle, traces=traces1, config=cfg, seed=cfg.seed,
                     warnings=warnings)


def run_baseline(train: SiteDataset, cfg: TrainConfig) -> RunResult:
    if cfg.method not in ("naive", "mmd", "ss", "rm"):
        raise ConfigError(f"run_baseline expects a baseline method, got {cfg.method!r}")
    return run_training(train, cfg)


def run_experiment(train: SiteDataset, test: SiteDataset, cfg: TrainConfig,
                   seeds, adv_skewed: bool = False) -> dict:
    """Full pipeline per seed plus aggregated test metrics."""
    from . import metrics as metrics_mod

    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    per_seed = []
    results = []
    for seed in seeds:
        run = run_training(train, replace(cfg, seed=seed))
        report = metrics_mod.evaluate(run.bundle, train, test, cfg=run.config,
                                      adv_skewed=adv_skewed)
        run.metrics = report.as_dict()
        results.append(run)
        per_seed.append(report)
    agg = metrics_mod.aggregate(per_seed)
    agg["method"] = cfg.method
    agg["seeds"] = seeds
    return {"aggregate": agg, "runs": results}


def hyperparam_select(candidates) -> dict:
    """Validation-window model selection.

    candidates: list of dicts with keys config, acc, mmd, adv; acc is in
    percentage points. Keeps candidates within 5 points of the best
    validation accuracy, then picks the lowest MMD measure, breaking ties by
    lowest adversary score and finally by config order.
    """
    if not candidates:
        raise ConfigError("empty candidate list")
    best_acc = max(c["acc"] for c in candidates)
    window = [c for c in candidates if c["acc"] >= best_acc - 5.0]
    return min(window, key=lambda c: (c["mmd"], c["adv"],
                                      json.dumps(_config_blob(c["config"]),
                                                 sort_keys=True)))


def _config_blob(config) -> dict:
    return asdict(config) if isinstance(config, TrainConfig) else dict(config)
