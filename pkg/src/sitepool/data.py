"""Tabular ingestion, split management and the synthetic generator.

Real datasets arrive as CSV plus a small schema naming the label, site and
covariate columns. All statistics (z-scores, one-hot categories, covariate
range) are fitted on the training split only. The synthetic generator plants
a known one-parameter rotation action of the covariate on the latent sphere
so that equivariance recovery can be checked against ground truth.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .liegroup import ConfigError, SkewCoords, algebra_dim, expm_so, skew_embed


class SchemaError(ValueError):
    """The input table does not match its declared schema."""


@dataclass(frozen=True)
class TableSchema:
    label_col: str
    site_col: str
    covariate_col: str
    positive_label: str
    categorical_cols: tuple = ()
    drop_covariate_feature: bool = False

    @classmethod
    def from_json(cls, path) -> "TableSchema":
        with open(path) as fh:
            blob = json.load(fh)
        return cls(
            label_col=blob["label_col"],
            site_col=blob["site_col"],
            covariate_col=blob["covariate_col"],
            positive_label=str(blob["positive_label"]),
            categorical_cols=tuple(blob.get("categorical_cols", [])),
            drop_covariate_feature=bool(blob.get("drop_covariate_feature", False)),
        )

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({
                "label_col": self.label_col,
                "site_col": self.site_col,
                "covariate_col": self.covariate_col,
                "positive_label": self.positive_label,
                "categorical_cols": list(self.categorical_cols),
                "drop_covariate_feature": self.drop_covariate_feature,
            }, fh, indent=2)


@dataclass
class SiteDataset:
    """A site-partitioned collection of encoded samples."""

    features: np.ndarray        # (N, d)
    labels: np.ndarray          # (N,) in {0, 1}
    covariate: np.ndarray       # (N,) normalized to [0, 1] on train stats
    covariate_raw: np.ndarray   # (N,) original scale
    site: np.ndarray            # (N,) small integer ids
    ids: np.ndarray             # (N,) stable sample ids
    feature_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def sites(self) -> np.ndarray:
        return np.unique(self.site)

    def subset(self, idx) -> "SiteDataset":
        idx = np.asarray(idx)
        return SiteDataset(self.features[idx], self.labels[idx], self.covariate[idx],
                           self.covariate_raw[idx], self.site[idx], self.ids[idx],
                           self.feature_names)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.7, 0.15, 0.15)
    stratify: bool = True
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9 or len(self.fractions) != 3:
            raise ConfigError(f"split fractions must be 3 values summing to 1, got {self.fractions}")


def load_tabular(path, schema: TableSchema) -> pd.DataFrame:
    """Parse a CSV with header, validate the schema, drop rows with '?' cells."""
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # pandas reports the offending line in its message
        raise SchemaError(f"failed to parse {path}: {exc}") from exc
    for col in (schema.label_col, schema.site_col, schema.covariate_col):
        if col not in frame.columns:
            raise SchemaError(f"missing column {col!r} in {path}")
    for col in schema.categorical_cols:
        if col not in frame.columns:
            raise SchemaError(f"missing categorical column {col!r} in {path}")
    frame = frame.replace("?", np.nan).dropna().reset_index(drop=True)
    return frame


class Preprocessor:
    """Encodes a raw frame into numeric tensors using train-only statistics."""

    def __init__(self, schema: TableSchema):
        self.schema = schema
        self.categories: dict = {}
        self.cont_cols: list = []
        self.cont_mean: np.ndarray | None = None
        self.cont_std: np.ndarray | None = None
        self.cov_min = 0.0
        self.cov_max = 1.0
        self.site_values: list = []

    def fit(self, train: pd.DataFrame) -> "Preprocessor":
        schema = self.schema
        feature_cols = [c for c in train.columns
                        if c not in (schema.label_col, schema.site_col)]
        if schema.drop_covariate_feature:
            feature_cols = [c for c in feature_cols if c != schema.covariate_col]
        self.cont_cols = sorted(c for c in feature_cols
                                if c not in schema.categorical_cols)
        for col in sorted(schema.categorical_cols):
            self.categories[col] = sorted(train[col].astype(str).unique())
        cont = train[self.cont_cols].to_numpy(dtype=np.float64)
        self.cont_mean = cont.mean(axis=0)
        self.cont_std = np.where(cont.std(axis=0) > 0, cont.std(axis=0), 1.0)
        cov = train[schema.covariate_col].to_numpy(dtype=np.float64)
        self.cov_min = float(cov.min())
        self.cov_max = float(cov.max())
        if self.cov_max <= self.cov_min:
            raise SchemaError(f"covariate {schema.covariate_col!r} is constant on train")
        self.site_values = sorted(train[schema.site_col].astype(str).unique())
        return self

    @property
    def feature_names(self) -> list:
        names = [f"z:{c}" for c in self.cont_cols]
        for col in sorted(self.categories):
            names.extend(f"onehot:{col}={v}" for v in self.categories[col])
        return names

    def transform(self, frame: pd.DataFrame) -> SiteDataset:
        schema = self.schema
        blocks = [(frame[self.cont_cols].to_numpy(dtype=np.float64) - self.cont_mean)
                  / self.cont_std]
        for col in sorted(self.categories):
            values = frame[col].astype(str).to_numpy()
            onehot = np.zeros((len(frame), len(self.categories[col])))
            for k, cat in enumerate(self.categories[col]):
                onehot[:, k] = values == cat
            blocks.append(onehot)
        features = np.hstack(blocks)
        labels = (frame[schema.label_col].astype(str).str.strip()
                  == schema.positive_label).to_numpy().astype(np.int64)
        cov_raw = frame[schema.covariate_col].to_numpy(dtype=np.float64)
        cov = np.clip((cov_raw - self.cov_min) / (self.cov_max - self.cov_min), 0.0, 1.0)
        site_lookup = {v: k for k, v in enumerate(self.site_values)}
        try:
            site = np.array([site_lookup[v] for v in frame[schema.site_col].astype(str)])
        except KeyError as exc:
            raise SchemaError(f"site value {exc} not seen during fit") from exc
        ids = frame.index.to_numpy()
        return SiteDataset(features, labels, cov, cov_raw, site, ids,
                           self.feature_names)


def make_splits(frame: pd.DataFrame, spec: SplitSpec,
                schema: TableSchema | None = None):
    """Deterministic (train, val, test) row split, stratified on (label, site)."""
    if len(frame) == 0:
        raise SchemaError("cannot split an empty table")
    rng = np.random.default_rng(spec.seed)
    if spec.stratify and schema is not None:
        keys = (frame[schema.label_col].astype(str) + "||"
                + frame[schema.site_col].astype(str))
    else:
        keys = pd.Series(["all"] * len(frame), index=frame.index)
    train_idx, val_idx, test_idx = [], [], []
    f_train, f_val, _ = spec.fractions
    for _, group in sorted(frame.groupby(keys.to_numpy()).groups.items()):
        order = np.array(sorted(group))
        rng.shuffle(order)
        n_train = int(round(f_train * len(order)))
        n_val = int(round(f_val * len(order)))
        train_idx.extend(order[:n_train])
        val_idx.extend(order[n_train:n_train + n_val])
        test_idx.extend(order[n_train + n_val:])
    return (frame.loc[sorted(train_idx)], frame.loc[sorted(val_idx)],
            frame.loc[sorted(test_idx)])


def prepare_tabular(train_path, schema: TableSchema, split: SplitSpec,
                    test_path=None):
    """Load, split and encode; returns (train, val, test) SiteDatasets.

    With an external test file (e.g. the official Adult test partition) the
    train file is split train/val only and the remaining test fraction is
    folded into train.
    """
    frame = load_tabular(train_path, schema)
    if test_path is not None:
        f_train, f_val, f_test = split.fractions
        inner = SplitSpec((f_train + f_test, f_val, 0.0), split.stratify, split.seed)
        train_df, val_df, _ = make_splits(frame, inner, schema)
        test_df = load_tabular(test_path, schema)
    else:
        train_df, val_df, test_df = make_splits(frame, split, schema)
    prep = Preprocessor(schema).fit(train_df)
    return prep.transform(train_df), prep.transform(val_df), prep.transform(test_df), prep


# ---------------------------------------------------------------------------
# dataset-specific readers


GERMAN_COLUMNS = [
    "checking_status", "duration", "credit_history", "purpose", "credit_amount",
    "savings", "employment_since", "installment_rate", "personal_status",
    "other_debtors", "residence_since", "property", "age", "other_installments",
    "housing", "existing_credits", "job", "num_dependents", "telephone",
    "foreigner", "credit_risk",
]

GERMAN_CATEGORICAL = (
    "checking_status", "credit_history", "purpose", "savings", "employment_since",
    "personal_status", "other_debtors", "property", "other_installments",
    "housing", "job", "telephone",
)


def german_schema() -> TableSchema:
    # Label convention: 1 = default (bad credit), the UCI class "2".
    return TableSchema(label_col="credit_risk", site_col="foreigner",
                       covariate_col="age", positive_label="2",
                       categorical_cols=GERMAN_CATEGORICAL)


def read_german(path) -> pd.DataFrame:
    """Read the UCI german.data file (space-separated, no header)."""
    frame = pd.read_csv(path, sep=r"\s+", header=None, names=GERMAN_COLUMNS)
    if frame.shape[1] != len(GERMAN_COLUMNS):
        raise SchemaError(f"expected {len(GERMAN_COLUMNS)} columns in {path}")
    return frame


ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num", "marital_status",
    "occupation", "relationship", "race", "sex", "capital_gain", "capital_loss",
    "hours_per_week", "native_country", "income",
]

ADULT_CATEGORICAL = (
    "workclass", "education", "marital_status", "occupation", "relationship",
    "race", "native_country",
)


def adult_schema() -> TableSchema:
    return TableSchema(label_col="income", site_col="sex", covariate_col="age",
                       positive_label=">50K", categorical_cols=ADULT_CATEGORICAL)


def read_adult(path) -> pd.DataFrame:
    """Read UCI adult.data / adult.test; strips the test file's trailing dots."""
    frame = pd.read_csv(path, header=None, names=ADULT_COLUMNS,
                        skipinitialspace=True, comment="|")
    frame = frame.dropna(how="all")
    frame["income"] = frame["income"].astype(str).str.strip().str.rstrip(".")
    frame = frame.replace("?", np.nan).dropna().reset_index(drop=True)
    return frame


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 600
    n: int = 4                      # sphere ambient dimension
    feature_dim: int = 12
    kappa: float = 1.0
    n_sites: int = 2
    site_bias: float = 0.5
    noise_sigma: float = 0.05
    label_margin: float = 0.0
    label_flip_prob: float = 0.02
    base_dispersion: float = 0.3    # spread of base points; <= 0 => uniform sphere
    covariate_overlap: float = 1.0  # 1 = identical supports, 0 = disjoint blocks
    seed: int = 0

    def __post_init__(self):
        for name in ("kappa", "site_bias", "noise_sigma", "label_margin",
                     "label_flip_prob"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.covariate_overlap <= 1.0:
            raise ConfigError("covariate_overlap must be in [0, 1]")
        if self.n_samples < 1 or self.n < 2 or self.n_sites < 1:
            raise ConfigError("n_samples, n and n_sites must be positive (n >= 2)")


def site_covariate_ranges(cfg: SynthConfig) -> list:
    """Per-site covariate support intervals inside [0, 1].

    With overlap 1 every site sees the full range; with overlap 0 the sites
    occupy disjoint contiguous blocks.
    """
    if cfg.n_sites == 1:
        return [(0.0, 1.0)]
    block = 1.0 / cfg.n_sites
    width = block + cfg.covariate_overlap * (1.0 - block)
    ranges = []
    for s in range(cfg.n_sites):
        lo = s * block * (1.0 - cfg.covariate_overlap)
        ranges.append((lo, min(1.0, lo + width)))
    return ranges


def gen_synthetic(cfg: SynthConfig):
    """Draw a dataset with a planted covariate rotation action.

    Returns (SiteDataset, ground_truth) where ground_truth carries the base
    sphere points, the mixing matrices and enough digests to audit a run.
    """
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n, cfg.feature_dim
    gen = skew_embed(SkewCoords(np.ones(algebra_dim(n)), n))
    mix = rng.normal(size=(d, n))
    label_w = rng.normal(size=n)
    label_w /= np.linalg.norm(label_w)
    site_biases = rng.normal(size=(cfg.n_sites, d)) * cfg.site_bias
    ranges = site_covariate_ranges(cfg)

    site = rng.integers(0, cfg.n_sites, size=cfg.n_samples)
    cov = np.empty(cfg.n_samples)
    for s in range(cfg.n_sites):
        mask = site == s
        lo, hi = ranges[s]
        cov[mask] = rng.uniform(lo, hi, size=mask.sum())

    # Base points concentrate around a fixed center so the covariate's
    # rotation action stays recoverable from the features; a uniform base
    # distribution would make the latents independent of the covariate.
    center = np.zeros(n)
    center[0] = 1.0
    if cfg.base_dispersion > 0:
        base = center + cfg.base_dispersion * rng.normal(size=(cfg.n_samples, n))
    else:
        base = rng.normal(size=(cfg.n_samples, n))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    # Threshold at the empirical median of the label scores so classes stay
    # balanced regardless of where the base points concentrate.
    threshold = float(np.median(base @ label_w))
    if cfg.label_margin > 0:
        for i in range(cfg.n_samples):
            while abs(base[i] @ label_w - threshold) < cfg.label_margin:
                v = center + cfg.base_dispersion * rng.normal(size=n) \
                    if cfg.base_dispersion > 0 else rng.normal(size=n)
                base[i] = v / np.linalg.norm(v)

    latent = np.empty_like(base)
    for i in range(cfg.n_samples):
        latent[i] = expm_so(cfg.kappa * cov[i] * gen).matrix @ base[i]
    features = latent @ mix.T + site_biases[site]
    features += rng.normal(size=features.shape) * cfg.noise_sigma
    labels = (base @ label_w > threshold).astype(np.int64)
    flips = rng.uniform(size=cfg.n_samples) < cfg.label_flip_prob
    labels[flips] = 1 - labels[flips]

    dataset = SiteDataset(features, labels, cov.copy(), cov.copy(), site,
                          np.arange(cfg.n_samples),
                          [f"synth_{k}" for k in range(d)])
    ground_truth = {
        "seed": cfg.seed,
        "kappa": cfg.kappa,
        "base_points": base,
        "latents": latent,
        "mix": mix,
        "label_w": label_w,
        "generator": gen,
        "mix_digest": hashlib.sha256(mix.tobytes()).hexdigest(),
        "label_w_digest": hashlib.sha256(label_w.tobytes()).hexdigest(),
    }
    return dataset, ground_truth


def split_site_dataset(dataset: SiteDataset, spec: SplitSpec):
    """Stratified (label, site) split directly on an encoded dataset."""
    rng = np.random.default_rng(spec.seed)
    keys = [f"{y}||{s}" for y, s in zip(dataset.labels, dataset.site)]
    buckets: dict = {}
    for i, key in enumerate(keys):
        buckets.setdefault(key, []).append(i)
    f_train, f_val, _ = spec.fractions
    parts = ([], [], [])
    for key in sorted(buckets):
        order = np.array(buckets[key])
        rng.shuffle(order)
        n_train = int(round(f_train * len(order)))
        n_val = int(round(f_val * len(order)))
        parts[0].extend(order[:n_train])
        parts[1].extend(order[n_train:n_train + n_val])
        parts[2].extend(order[n_train + n_val:])
    return tuple(dataset.subset(sorted(p)) for p in parts)
