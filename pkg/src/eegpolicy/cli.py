"""End-to-end pipeline behind one executable.

Raw layout expected by ``preprocess``/``features``::

    <dir>/
        subjects.csv            subject_id,treatment,outcome[,covariate...]
        <subject_id>/
            <recording>.json    header (+ matching .bin), or a .csv recording

``run`` executes the staged pipeline into a work directory and records a
manifest (input/output hashes, seeds, versions, timings).  A stage whose
fingerprint, input hashes, and output hashes all match the previous manifest
is skipped.  Exit codes: 0 success, 1 validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .causal_forest import (ForestParams, RegressionForest, fit_causal_forest,
                            load_model, predict_cate, save_model, tune_r_loss,
                            variable_importance)
from .eeg_io import (CATEGORICAL, CONTINUOUS, FeatureMatrix, Recording,
                     common_channel_names, load_feature_table, load_recording,
                     one_hot_expand, save_feature_table, save_recording)
from .effects import ate, blp_from_model, doubly_robust_scores, scores_from_model
from .policy import (OPolicy, PolicyTreeModel, QPolicy, estimate_value,
                     o_learning_fit, q_learning_fit, search_policy_tree)
from .preprocess import (BadChannelConfig, PreprocessConfig,
                         preprocess_recording, segment_epochs)
from .sim import GeneratorSpec, default_spec, run_benchmark, weaken_effects

__all__ = [
    "CliError",
    "StageError",
    "PipelineConfig",
    "upsample_minority",
    "run_pipeline",
    "main",
]

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2

# canonical execution order; "simulate" is opt-in and independent of the rest
PIPELINE_STAGES = ("preprocess", "features", "fit-forest", "ate", "blp-test",
                   "importance", "policy", "value", "simulate")
DEFAULT_STAGES = PIPELINE_STAGES[:-1]

POLICY_METHODS = ("tree", "qlearn", "olearn")


class CliError(ValueError):
    """Invalid arguments, configuration, or input files (exit code 1)."""


class StageError(RuntimeError):
    """A stage failed while running (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration

_SIM_DEFAULTS = {"spec": None, "effect": "strong", "train_sizes": [200, 500],
                 "replicates": 20, "n_test": 10_000}


@dataclass(frozen=True)
class PipelineConfig:
    """One JSON document drives the whole pipeline; CLI flags override keys."""

    input_dir: str = ""
    work_dir: str = ""
    stages: tuple[str, ...] = DEFAULT_STAGES
    split_fraction: float = 0.7     # train share of subjects
    upsample: bool = True           # balance minority outcome class (train only)
    seed: int = 0
    threads: int = 1
    epoch_length_s: float = 2.0
    propensity: float | None = None  # known assignment probability, e.g. RCT
    num_trees: int = 500
    nuisance_trees: int = 200
    min_node_size: int = 5
    subsample_ratio: float = 0.5
    n_folds: int = 10
    tune_grid: tuple = ()           # candidate ForestParams overrides
    policy_method: str = "tree"
    policy_depth: int = 2
    o_ridge: float = 1e-4
    importance_depth: int = 4
    site_config: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not 0.0 < self.split_fraction < 1.0:
            raise CliError("split_fraction must be in (0, 1)")
        unknown = set(self.stages) - set(PIPELINE_STAGES)
        if unknown:
            raise CliError(f"unknown stages: {sorted(unknown)}")
        if not self.stages:
            raise CliError("no stages requested")
        if self.policy_method not in POLICY_METHODS:
            raise CliError(f"policy_method must be one of {POLICY_METHODS}")
        if self.propensity is not None and not 0.0 < self.propensity < 1.0:
            raise CliError("propensity must be in (0, 1)")
        if self.threads < 1:
            raise CliError("threads must be >= 1")
        if not self.work_dir:
            raise CliError("work_dir is required")
        needs_input = any(s in self.stages for s in ("preprocess", "features"))
        if needs_input:
            if not self.input_dir:
                raise CliError("input_dir is required for preprocess/features")
            if not Path(self.input_dir).is_dir():
                raise CliError(f"input_dir {self.input_dir!r} does not exist")
        sim_unknown = set(self.simulate) - set(_SIM_DEFAULTS)
        if sim_unknown:
            raise CliError(f"unknown simulate keys: {sorted(sim_unknown)}")

    def sim_settings(self) -> dict:
        return {**_SIM_DEFAULTS, **self.simulate}

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["stages"] = list(self.stages)
        out["tune_grid"] = [dict(g) for g in self.tune_grid]
        return out


def config_from_dict(raw: dict) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "stages" in kwargs:
        kwargs["stages"] = tuple(kwargs["stages"])
    if "tune_grid" in kwargs:
        kwargs["tune_grid"] = tuple(dict(g) for g in kwargs["tune_grid"])
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise CliError(f"bad config: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path.name}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise CliError(f"{path.name}: config must be a JSON object")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# minority-class upsampling (training split only)

def _upsample_order(y: np.ndarray, seed: int) -> np.ndarray:
    """Original row order followed by resampled minority rows."""
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise CliError("upsampling needs both outcome classes present")
    if classes.size > 2:
        raise CliError("upsampling expects a binary outcome")
    n = y.shape[0]
    if counts[0] == counts[1]:
        return np.arange(n)
    minority = classes[np.argmin(counts)]
    need = int(counts.max() - counts.min())
    rng = np.random.default_rng(seed)
    extra = rng.choice(np.flatnonzero(y == minority), size=need, replace=True)
    return np.concatenate([np.arange(n), extra])


def _take_rows(fm: FeatureMatrix, rows: np.ndarray) -> FeatureMatrix:
    return FeatureMatrix(
        subject_ids=tuple(fm.subject_ids[i] for i in rows),
        X=fm.X[rows], W=fm.W[rows], Y=fm.Y[rows],
        column_names=fm.column_names, column_kinds=fm.column_kinds)


def upsample_minority(fm: FeatureMatrix, seed: int = 0) -> FeatureMatrix:
    """Resample the minority outcome class with replacement to equal counts.

    Balanced input is returned unchanged; duplicated rows are exact copies.
    """
    order = _upsample_order(fm.Y, seed)
    if order.shape[0] == fm.n:
        return fm
    return _take_rows(fm, order)


# ---------------------------------------------------------------------------
# input discovery and subject metadata

def _subject_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise CliError(f"{root} is not a directory")
    subs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subs:
        raise CliError(f"no subject directories under {root}")
    return subs


def _recording_paths(sub: Path) -> list[Path]:
    out = []
    for p in sorted(sub.iterdir()):
        if p.name.startswith("qc_"):
            continue
        if p.suffix == ".csv":
            out.append(p)
        elif p.suffix == ".json":
            if p.with_suffix(".bin").exists():
                out.append(p)
            elif not p.with_suffix(".csv").exists():  # csv sidecars are fine
                raise CliError(f"{p} has no matching .bin payload")
    if not out:
        raise CliError(f"no recordings under {sub}")
    return out


_META_REQUIRED = ("subject_id", "treatment", "outcome")


def _read_subjects_csv(path: Path) -> tuple[dict[str, dict], list[str], dict]:
    """Rows keyed by subject id, covariate column order, rejection report.

    Rows with any missing value are rejected (counted, not fatal); malformed
    treatment/outcome entries are validation errors.
    """
    if not path.exists():
        raise CliError(f"{path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CliError(f"{path.name} is empty")
        header = [h.strip() for h in reader.fieldnames]
        for required in _META_REQUIRED:
            if required not in header:
                raise CliError(f"{path.name} missing column {required!r}")
        covariates = [h for h in header if h not in _META_REQUIRED]
        rows: dict[str, dict] = {}
        rejected: dict[str, str] = {}
        for raw in reader:
            row = {(k or "").strip(): (v or "").strip()
                   for k, v in raw.items() if k is not None}
            sid = row.get("subject_id", "")
            if not sid:
                rejected[f"<row {len(rows) + len(rejected) + 2}>"] = \
                    "missing subject_id"
                continue
            if sid in rows or sid in rejected:
                raise CliError(f"{path.name}: duplicate subject id {sid!r}")
            holes = sorted(k for k, v in row.items() if v == "")
            if holes:
                rejected[sid] = f"missing values in {holes}"
                continue
            if row["treatment"] not in ("0", "1"):
                raise CliError(f"{path.name}: treatment for {sid!r} must be "
                               f"0 or 1, got {row['treatment']!r}")
            try:
                float(row["outcome"])
            except ValueError:
                raise CliError(f"{path.name}: outcome for {sid!r} is not "
                               "numeric") from None
            rows[sid] = row
    report = {"n_rows": len(rows) + len(rejected),
              "n_rejected": len(rejected), "rejected": rejected}
    return rows, covariates, report


# ---------------------------------------------------------------------------
# stage bodies (shared by standalone subcommands and `run`)

def _site_preprocess_config(site: dict | None, seed: int) -> PreprocessConfig:
    cfg = PreprocessConfig(common_channels=tuple(common_channel_names()),
                           seed=seed)
    if not site:
        return cfg
    site = dict(site)
    bad = site.pop("bad_channels", None)
    unknown = set(site) - set(PreprocessConfig.__dataclass_fields__)
    if unknown:
        raise CliError(f"unknown site-config keys: {sorted(unknown)}")
    if site.get("threshold_grid") is not None:
        site["threshold_grid"] = np.asarray(site["threshold_grid"], float)
    if site.get("common_channels") is not None:
        site["common_channels"] = tuple(site["common_channels"])
    cfg = replace(cfg, **site)
    if bad:
        unknown = set(bad) - set(BadChannelConfig.__dataclass_fields__)
        if unknown:
            raise CliError(f"unknown bad_channels keys: {sorted(unknown)}")
        cfg = replace(cfg, bad_channels=replace(cfg.bad_channels, **bad))
    return cfg


def preprocess_dir(in_dir: Path, out_dir: Path, site_config: dict | None = None,
                   seed: int = 0) -> list[Path]:
    """Clean every recording; write surviving epochs plus a QC report each."""
    subjects = _subject_dirs(in_dir)
    cfg = _site_preprocess_config(site_config, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    table = in_dir / "subjects.csv"
    if table.exists():
        target = out_dir / "subjects.csv"
        target.write_bytes(table.read_bytes())
        outputs.append(target)
    for sub in subjects:
        tdir = out_dir / sub.name
        tdir.mkdir(parents=True, exist_ok=True)
        for rp in _recording_paths(sub):
            rec = load_recording(rp)
            es, qc = preprocess_recording(rec, cfg)
            kept = es.epochs[es.keep_mask]
            if kept.shape[0] == 0:
                raise StageError(f"{sub.name}/{rp.name}: every epoch rejected")
            data = kept.transpose(1, 0, 2).reshape(len(es.channel_names), -1)
            by_name = {c.name: c for c in rec.channels}
            cleaned = Recording(
                channels=tuple(by_name[n] for n in es.channel_names),
                sample_rate=es.sample_rate,
                data=np.ascontiguousarray(data),
                condition=es.condition,
                block_index=es.block_index)
            out_json = tdir / (rp.stem + ".json")
            save_recording(cleaned, out_json)
            qc_path = tdir / f"qc_{rp.stem}.json"
            qc_path.write_text(qc.to_json() + "\n")
            outputs += [out_json, out_json.with_suffix(".bin"), qc_path]
    return outputs


def build_features(in_dir: Path, out_csv: Path,
                   epoch_length_s: float = 2.0) -> dict:
    """Band powers per subject merged with subjects.csv; rows with missing
    metadata are dropped and counted."""
    from .spectral import extract_features

    channels = common_channel_names()
    subjects = _subject_dirs(in_dir)
    meta, covariates, report = _read_subjects_csv(in_dir / "subjects.csv")
    ids = [s.name for s in subjects]
    known = set(meta) | set(report["rejected"])
    unmatched = sorted(i for i in ids if i not in known)
    if unmatched:
        raise CliError(f"subjects.csv has no row for: {unmatched}")
    orphans = sorted(set(meta) - set(ids))
    if orphans:
        raise CliError(f"subjects.csv lists subjects without recordings: "
                       f"{orphans}")
    used = [i for i in ids if i in meta]
    if not used:
        raise CliError("all subject rows were rejected for missing values")

    eeg_rows = []
    eeg_names: tuple[str, ...] = ()
    for sid in used:
        sets = [segment_epochs(load_recording(p), epoch_length_s)
                for p in _recording_paths(in_dir / sid)]
        row = extract_features(sets, channels, subject_id=sid)
        eeg_names = row.names
        eeg_rows.append(row.values)

    blocks = [np.vstack(eeg_rows)]
    names = list(eeg_names)
    kinds = [CONTINUOUS] * len(eeg_names)
    for col in covariates:
        values = [meta[sid][col] for sid in used]
        try:
            blocks.append(np.array([float(v) for v in values])[:, None])
            names.append(col)
            kinds.append(CONTINUOUS)
        except ValueError:
            expanded, expanded_names = one_hot_expand(values, col)
            blocks.append(expanded)
            names += list(expanded_names)
            kinds += [CATEGORICAL] * len(expanded_names)
    fm = FeatureMatrix(
        subject_ids=tuple(used),
        X=np.column_stack(blocks),
        W=np.array([float(meta[s]["treatment"]) for s in used]),
        Y=np.array([float(meta[s]["outcome"]) for s in used]),
        column_names=tuple(names), column_kinds=tuple(kinds))
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    save_feature_table(fm, out_csv)
    report.update(n_subjects=fm.n, n_columns=fm.d,
                  n_eeg_columns=len(eeg_names))
    return report


def _split_rows(n: int, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fraction * n))
    if n_train < 2 or n - n_train < 1:
        raise CliError(f"split_fraction {fraction} leaves too few rows "
                       f"(n={n})")
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _class_counts(y: np.ndarray) -> dict[str, int]:
    classes, counts = np.unique(y, return_counts=True)
    return {repr(float(c)): int(k) for c, k in zip(classes, counts)}


def fit_forest_files(features_csv: Path, model_out: Path, *,
                     scores_out: Path | None = None,
                     split_out: Path | None = None,
                     split_fraction: float | None = None,
                     upsample: bool = True,
                     num_trees: int = 500, nuisance_trees: int = 200,
                     min_node_size: int = 5, subsample_ratio: float = 0.5,
                     n_folds: int = 10,
                     propensity: float | None = None,
                     tune_grid: tuple = (), seed: int = 0) -> dict:
    """Fit the causal forest; optionally split first and persist DR scores.

    Without ``split_fraction`` the whole table is training data (callers can
    pre-split).  With it, a train/test partition of subjects is drawn, the
    training split optionally rebalanced, and the row bookkeeping written to
    ``split_out`` so later stages reuse the same rows.
    """
    fm = load_feature_table(features_csv)
    if split_fraction is None:
        train_rows = np.arange(fm.n)
        test_rows = np.array([], dtype=np.int64)
    else:
        train_rows, test_rows = _split_rows(fm.n, split_fraction, seed)
    train = _take_rows(fm, train_rows)
    counts_before = _class_counts(train.Y)
    order = _upsample_order(train.Y, seed + 1) if upsample \
        else np.arange(train.n)
    train_up_rows = train_rows[order]
    train = _take_rows(fm, train_up_rows)

    params = ForestParams(num_trees=num_trees, min_node_size=min_node_size,
                          subsample_ratio=subsample_ratio, seed=seed)
    nuisance = ForestParams(num_trees=nuisance_trees,
                            min_node_size=min_node_size,
                            subsample_ratio=subsample_ratio, seed=seed + 2)
    folds = min(n_folds, train.n)
    if folds < 2:
        raise CliError("need at least 2 training rows")
    if tune_grid:
        params = tune_r_loss(train.X, train.W, train.Y, [dict(g) for g in
                             tune_grid], base=params, nuisance_params=nuisance,
                             propensity=propensity, n_folds=folds)
    model = fit_causal_forest(train.X, train.W, train.Y, params,
                              nuisance_params=nuisance,
                              propensity=propensity, n_folds=folds)
    model_out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_out)

    scores = scores_from_model(model)
    if scores_out is not None:
        payload = {
            "n": int(train.n),
            "feature_names": list(fm.column_names),
            "gamma": scores.gamma.tolist(),
            "gamma1": scores.gamma_treated.tolist(),
            "gamma0": scores.gamma_control.tolist(),
            "tau_hat": scores.tau_hat.tolist(),
            "m_hat": scores.m_hat.tolist(),
            "e_hat": scores.e_hat.tolist(),
        }
        scores_out.write_text(json.dumps(payload) + "\n")
    if split_out is not None:
        split_out.write_text(json.dumps({
            "fraction": split_fraction, "seed": seed, "upsample": upsample,
            "train_rows": train_rows.tolist(),
            "train_rows_upsampled": train_up_rows.tolist(),
            "test_rows": test_rows.tolist(),
            "train_class_counts_before": counts_before,
            "train_class_counts_after": _class_counts(train.Y),
        }) + "\n")
    return {"n_train": int(train.n), "n_test": int(test_rows.size),
            "params": params.__dict__ if hasattr(params, "__dict__")
            else str(params)}


def _ate_payload(model) -> dict:
    result = ate(scores_from_model(model))
    return {"tau_hat": result.tau_hat, "se": result.standard_error,
            "ci": list(result.ci_95), "p": result.p_value}


def _blp_payload(model) -> dict:
    r = blp_from_model(model)
    rows = [
        {"term": "mean_forest_prediction", "estimate": r.alpha_hat,
         "std_error": r.alpha_se, "t": r.alpha_t, "p": r.alpha_p},
        {"term": "differential_forest_prediction", "estimate": r.beta_hat,
         "std_error": r.beta_se, "t": r.beta_t, "p": r.beta_p},
    ]
    return {"n": r.n, "dropped": r.dropped,
            "mean_prediction": r.mean_prediction, "rows": rows}


def _write_blp_csv(payload: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "estimate", "std_error", "t", "p"])
        for row in payload["rows"]:
            writer.writerow([row["term"], *(repr(float(row[k])) for k in
                                            ("estimate", "std_error", "t",
                                             "p"))])


def _importance_csv(model, names, max_depth: int, out: Path) -> None:
    report = variable_importance(model, max_depth=max_depth)
    if names is not None and len(names) != report.importances.shape[0]:
        raise CliError("feature_names length does not match the model")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "feature", "importance"])
        for rank, j in enumerate(report.ranking, start=1):
            label = names[j] if names is not None else f"x{j}"
            writer.writerow([rank, label,
                             repr(float(report.importances[j]))])


def _policy_to_payload(model, method: str) -> dict:
    if method == "tree":
        return {"method": "tree", **model.to_dict()}
    payload = {}
    for f in fields(model):
        v = getattr(model, f.name)
        payload[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return {"method": method, "model": payload}


def _policy_from_payload(d: dict):
    method = d.get("method")
    if method == "tree":
        return PolicyTreeModel.from_dict(d)
    if method in ("qlearn", "olearn"):
        cls = QPolicy if method == "qlearn" else OPolicy
        kwargs = {k: (np.asarray(v) if isinstance(v, list) else v)
                  for k, v in d["model"].items()}
        return cls(**kwargs)
    raise CliError(f"policy file has unknown method {method!r}")


def _load_scores(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"scores file {path} does not exist")
    sc = json.loads(path.read_text())
    for key in ("gamma0", "gamma1"):
        if key not in sc:
            raise CliError(f"{path.name} is missing {key!r}")
    return sc


def fit_policy_files(scores_json: Path, features_csv: Path, method: str,
                     out_json: Path, *, split_json: Path | None = None,
                     depth: int = 2, o_ridge: float = 1e-4,
                     seed: int = 0) -> dict:
    """Learn a treatment rule on the (training) rows behind the scores."""
    if method not in POLICY_METHODS:
        raise CliError(f"method must be one of {POLICY_METHODS}")
    sc = _load_scores(scores_json)
    fm = load_feature_table(features_csv)
    if split_json is not None:
        rows = np.asarray(json.loads(split_json.read_text())
                          ["train_rows_upsampled"], dtype=np.int64)
    else:
        rows = np.arange(fm.n)
    g0 = np.asarray(sc["gamma0"], dtype=np.float64)
    g1 = np.asarray(sc["gamma1"], dtype=np.float64)
    if g0.shape[0] != rows.shape[0]:
        raise CliError(f"scores cover {g0.shape[0]} rows but the feature "
                       f"table provides {rows.shape[0]}")
    train = _take_rows(fm, rows)
    if method == "tree":
        model = search_policy_tree(train.X, g0, g1, depth=depth,
                                   feature_names=fm.column_names)
    elif method == "qlearn":
        model = q_learning_fit(train.X, train.W, train.Y,
                               folds=min(10, train.n), seed=seed)
    else:
        e_hat = np.asarray(sc.get("e_hat", np.full(train.n, 0.5)), float)
        prob = np.where(train.W == 1.0, e_hat, 1.0 - e_hat)
        model = o_learning_fit(train.X, 2.0 * train.W - 1.0, train.Y, prob,
                               ridge=o_ridge)
    payload = _policy_to_payload(model, method)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(json.dumps(payload, indent=1) + "\n")
    return payload


def policy_value_files(policy_json: Path, scores_json: Path,
                       features_csv: Path | None) -> dict:
    """Doubly robust value of a saved policy on the rows behind the scores."""
    policy = _policy_from_payload(json.loads(policy_json.read_text()))
    sc = _load_scores(scores_json)
    g0 = np.asarray(sc["gamma0"], dtype=np.float64)
    g1 = np.asarray(sc["gamma1"], dtype=np.float64)
    X = None
    if features_csv is not None:
        X = load_feature_table(features_csv).X
    value = estimate_value(policy, X, gamma0=g0, gamma1=g1)
    return {"value": value, "n": int(g0.shape[0])}


# ---------------------------------------------------------------------------
# simulation benchmark

def simulate_files(out_dir: Path, *, spec_path: Path | None = None,
                   effect: str = "strong", train_sizes=(200, 500),
                   replicates: int = 20, n_test: int = 10_000,
                   seed: int = 0, threads: int = 1) -> list[Path]:
    if effect not in ("strong", "weak"):
        raise CliError("effect must be 'strong' or 'weak'")
    if spec_path is not None:
        if not Path(spec_path).exists():
            raise CliError(f"spec file {spec_path} does not exist")
        spec = GeneratorSpec.from_json(Path(spec_path).read_text())
        if effect == "weak":
            spec = weaken_effects(spec)
    else:
        spec = default_spec()
        if effect == "weak":
            spec = weaken_effects(spec)
    report = run_benchmark(spec, train_sizes=tuple(train_sizes),
                           n_test=n_test, n_replicates=replicates,
                           seed=seed, max_workers=threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows_csv = out_dir / "rows.csv"
    summary_json = out_dir / "summary.json"
    report.to_csv(rows_csv)
    report.to_json(summary_json)
    return [rows_csv, summary_json]


# ---------------------------------------------------------------------------
# manifest plumbing

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_files(paths) -> dict[str, str]:
    out = {}
    for p in sorted(Path(p) for p in paths):
        if not p.exists():
            raise CliError(f"required input {p} does not exist; run the "
                           "producing stage first")
        out[str(p)] = _sha256(p)
    return out


def _fingerprint(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _work_paths(cfg: PipelineConfig) -> dict[str, Path]:
    work = Path(cfg.work_dir)
    return {
        "preprocessed": work / "preprocessed",
        "features": work / "features.csv",
        "features_report": work / "features_report.json",
        "split": work / "split.json",
        "model": work / "model.bin",
        "scores": work / "scores.json",
        "ate": work / "ate.json",
        "blp_json": work / "blp.json",
        "blp_csv": work / "blp.csv",
        "importance": work / "importance.csv",
        "policy": work / "policy.json",
        "value": work / "value.json",
        "sim": work / "sim",
    }


def _raw_inputs(cfg: PipelineConfig) -> list[Path]:
    root = Path(cfg.input_dir)
    files = []
    table = root / "subjects.csv"
    if table.exists():
        files.append(table)
    for sub in _subject_dirs(root):
        for rp in _recording_paths(sub):
            files.append(rp)
            if rp.suffix == ".json":
                files.append(rp.with_suffix(".bin"))
            elif rp.with_suffix(".json").exists():
                files.append(rp.with_suffix(".json"))
    return files


def _preprocessed_files(cfg: PipelineConfig) -> list[Path]:
    root = _work_paths(cfg)["preprocessed"]
    if not root.is_dir():
        raise CliError(f"{root} does not exist; run the preprocess stage "
                       "first")
    return sorted(p for p in root.rglob("*") if p.is_file())


def _stage_value_body(cfg: PipelineConfig) -> dict:
    """Honest test-set value: forest CATE plus out-of-sample nuisances."""
    paths = _work_paths(cfg)
    fm = load_feature_table(paths["features"])
    split = json.loads(paths["split"].read_text())
    test_rows = np.asarray(split["test_rows"], dtype=np.int64)
    if test_rows.size == 0:
        raise CliError("split.json has no test rows to evaluate on")
    train_rows = np.asarray(split["train_rows_upsampled"], dtype=np.int64)
    train, test = _take_rows(fm, train_rows), _take_rows(fm, test_rows)
    model = load_model(paths["model"])
    tau_hat = predict_cate(model, test.X)
    nuisance = ForestParams(num_trees=cfg.nuisance_trees,
                            min_node_size=cfg.min_node_size,
                            subsample_ratio=cfg.subsample_ratio,
                            seed=cfg.seed + 3)
    m_hat = RegressionForest(nuisance).fit(train.X, train.Y).predict(test.X)
    if cfg.propensity is not None:
        e_hat = np.full(test.n, float(cfg.propensity))
    else:
        e_hat = RegressionForest(replace(nuisance, seed=cfg.seed + 4)) \
            .fit(train.X, train.W).predict(test.X)
    e_hat = np.clip(e_hat, 0.05, 0.95)
    scores = doubly_robust_scores(tau_hat, e_hat, m_hat, test.W, test.Y)
    policy = _policy_from_payload(json.loads(paths["policy"].read_text()))
    value = estimate_value(policy, test.X, gamma0=scores.gamma_control,
                           gamma1=scores.gamma_treated)
    return {"value": value, "n_test": int(test.n),
            "method": cfg.policy_method}


# stage name -> (input paths, body returning output paths)

def _stage_spec(cfg: PipelineConfig, name: str):
    paths = _work_paths(cfg)
    model_inputs = [paths["model"]]

    if name == "preprocess":
        def body():
            return preprocess_dir(Path(cfg.input_dir), paths["preprocessed"],
                                  cfg.site_config, cfg.seed)
        return (_raw_inputs(cfg), body,
                {"site_config": cfg.site_config, "seed": cfg.seed})

    if name == "features":
        def body():
            report = build_features(paths["preprocessed"] if "preprocess" in
                                    cfg.stages else Path(cfg.input_dir),
                                    paths["features"], cfg.epoch_length_s)
            paths["features_report"].write_text(json.dumps(report, indent=1)
                                                + "\n")
            return [paths["features"], paths["features_report"]]
        inputs = _preprocessed_files(cfg) if "preprocess" in cfg.stages \
            else _raw_inputs(cfg)
        return inputs, body, {"epoch_length_s": cfg.epoch_length_s}

    if name == "fit-forest":
        def body():
            fit_forest_files(
                paths["features"], paths["model"],
                scores_out=paths["scores"], split_out=paths["split"],
                split_fraction=cfg.split_fraction, upsample=cfg.upsample,
                num_trees=cfg.num_trees, nuisance_trees=cfg.nuisance_trees,
                min_node_size=cfg.min_node_size,
                subsample_ratio=cfg.subsample_ratio, n_folds=cfg.n_folds,
                propensity=cfg.propensity, tune_grid=cfg.tune_grid,
                seed=cfg.seed)
            return [paths["model"], paths["scores"], paths["split"]]
        fp = {k: getattr(cfg, k) for k in
              ("split_fraction", "upsample", "num_trees", "nuisance_trees",
               "min_node_size", "subsample_ratio", "n_folds", "propensity",
               "seed")}
        fp["tune_grid"] = [dict(g) for g in cfg.tune_grid]
        return [paths["features"]], body, fp

    if name == "ate":
        def body():
            payload = _ate_payload(load_model(paths["model"]))
            paths["ate"].write_text(json.dumps(payload, indent=1) + "\n")
            return [paths["ate"]]
        return model_inputs, body, {}

    if name == "blp-test":
        def body():
            payload = _blp_payload(load_model(paths["model"]))
            paths["blp_json"].write_text(json.dumps(payload, indent=1) + "\n")
            _write_blp_csv(payload, paths["blp_csv"])
            return [paths["blp_json"], paths["blp_csv"]]
        return model_inputs, body, {}

    if name == "importance":
        def body():
            names = load_feature_table(paths["features"]).column_names
            _importance_csv(load_model(paths["model"]), names,
                            cfg.importance_depth, paths["importance"])
            return [paths["importance"]]
        return [paths["model"], paths["features"]], body, \
            {"importance_depth": cfg.importance_depth}

    if name == "policy":
        def body():
            fit_policy_files(paths["scores"], paths["features"],
                             cfg.policy_method, paths["policy"],
                             split_json=paths["split"],
                             depth=cfg.policy_depth, o_ridge=cfg.o_ridge,
                             seed=cfg.seed)
            return [paths["policy"]]
        fp = {k: getattr(cfg, k) for k in
              ("policy_method", "policy_depth", "o_ridge", "seed")}
        return [paths["scores"], paths["features"], paths["split"]], body, fp

    if name == "value":
        def body():
            payload = _stage_value_body(cfg)
            paths["value"].write_text(json.dumps(payload, indent=1) + "\n")
            return [paths["value"]]
        inputs = [paths["policy"], paths["model"], paths["features"],
                  paths["split"]]
        fp = {"seed": cfg.seed, "propensity": cfg.propensity,
              "nuisance_trees": cfg.nuisance_trees}
        return inputs, body, fp

    if name == "simulate":
        sim = cfg.sim_settings()

        def body():
            return simulate_files(
                paths["sim"],
                spec_path=Path(sim["spec"]) if sim["spec"] else None,
                effect=sim["effect"], train_sizes=tuple(sim["train_sizes"]),
                replicates=int(sim["replicates"]), n_test=int(sim["n_test"]),
                seed=cfg.seed, threads=cfg.threads)
        inputs = [Path(sim["spec"])] if sim["spec"] else []
        # thread count deliberately left out: outputs are thread-invariant
        return inputs, body, {"simulate": sim, "seed": cfg.seed}

    raise CliError(f"unknown stage {name!r}")


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute the requested stages in order; write work_dir/manifest.json.

    Stages whose fingerprint, input hashes, and output hashes match the
    previous manifest are skipped as cache hits.  A stage failure halts the
    run, is recorded, and the partial manifest is persisted.
    """
    cfg.validate()
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    manifest_path = work / "manifest.json"
    previous: dict[str, dict] = {}
    if manifest_path.exists():
        try:
            for rec in json.loads(manifest_path.read_text())["stages"]:
                previous[rec["name"]] = rec
        except (json.JSONDecodeError, KeyError, TypeError):
            previous = {}

    manifest = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "stages": [],
    }

    def persist():
        manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")

    for name in (s for s in PIPELINE_STAGES if s in cfg.stages):
        inputs_list, body, fp_cfg = _stage_spec(cfg, name)
        fingerprint = _fingerprint({"stage": name, "config": fp_cfg,
                                    "version": __version__})
        inputs = _hash_files(inputs_list)
        prev = previous.get(name)
        if (prev and prev.get("status") in ("ok", "cached")
                and prev.get("fingerprint") == fingerprint
                and prev.get("inputs") == inputs
                and all(Path(p).exists() and _sha256(Path(p)) == h
                        for p, h in prev.get("outputs", {}).items())):
            manifest["stages"].append({
                "name": name, "status": "cached", "seconds": 0.0,
                "fingerprint": fingerprint, "inputs": inputs,
                "outputs": prev["outputs"]})
            persist()
            continue
        t0 = time.perf_counter()
        try:
            out_paths = body()
        except CliError:
            persist()
            raise
        except Exception as exc:
            manifest["stages"].append({
                "name": name, "status": "failed",
                "seconds": time.perf_counter() - t0,
                "fingerprint": fingerprint, "inputs": inputs,
                "outputs": {}, "error": f"{type(exc).__name__}: {exc}"})
            persist()
            raise StageError(f"stage {name!r} failed: {exc}") from exc
        manifest["stages"].append({
            "name": name, "status": "ok",
            "seconds": time.perf_counter() - t0,
            "fingerprint": fingerprint, "inputs": inputs,
            "outputs": {str(p): _sha256(Path(p)) for p in out_paths}})
        persist()
    return manifest


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # validation problems exit 1, not argparse's 2
        raise CliError(message)


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {path!r} does not exist")
    return p


def _seed_of(args, cfg: PipelineConfig | None) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.seed if cfg else 0


def _threads_of(args, cfg: PipelineConfig | None) -> int:
    if args.threads is not None:
        return args.threads
    return cfg.threads if cfg else 1


def _cmd_preprocess(args, cfg):
    site = cfg.site_config if cfg else {}
    if args.site_config:
        site = json.loads(_require(args.site_config, "site config")
                          .read_text())
    _require(args.in_dir, "input directory")
    try:
        preprocess_dir(Path(args.in_dir), Path(args.out_dir), site,
                       _seed_of(args, cfg))
    except (CliError, StageError):
        raise
    except Exception as exc:
        raise StageError(f"preprocess failed: {exc}") from exc
    return EXIT_OK


def _cmd_features(args, cfg):
    _require(args.in_dir, "input directory")
    epoch_length = cfg.epoch_length_s if cfg else 2.0
    try:
        report = build_features(Path(args.in_dir), Path(args.out),
                                epoch_length)
    except (CliError, StageError):
        raise
    except Exception as exc:
        raise StageError(f"feature extraction failed: {exc}") from exc
    if report["n_rejected"]:
        print(f"rejected {report['n_rejected']} subject row(s) with missing "
              "values", file=sys.stderr)
    return EXIT_OK


def _cmd_fit_forest(args, cfg):
    _require(args.features, "features file")
    grid: tuple = cfg.tune_grid if cfg else ()
    if args.tune:
        raw = json.loads(_require(args.tune, "tuning grid").read_text())
        if not isinstance(raw, list):
            raise CliError("tuning grid must be a JSON array of objects")
        grid = tuple(dict(g) for g in raw)
    kwargs = dict(num_trees=cfg.num_trees, nuisance_trees=cfg.nuisance_trees,
                  min_node_size=cfg.min_node_size,
                  subsample_ratio=cfg.subsample_ratio, n_folds=cfg.n_folds,
                  propensity=cfg.propensity, upsample=False) if cfg else \
        dict(upsample=False)
    try:
        fit_forest_files(Path(args.features), Path(args.out),
                         scores_out=Path(args.scores_out) if args.scores_out
                         else None, tune_grid=grid,
                         seed=_seed_of(args, cfg), **kwargs)
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"forest fit failed: {exc}") from exc
    return EXIT_OK


def _with_model(path: str, features: str | None):
    model = load_model(_require(path, "model file"))
    if features:
        fm = load_feature_table(_require(features, "features file"))
        if fm.n != model.X.shape[0]:
            raise CliError(f"features file has {fm.n} rows but the model "
                           f"was fit on {model.X.shape[0]}")
        return model, fm
    return model, None


def _cmd_ate(args, cfg):
    try:
        model, _ = _with_model(args.model, args.features)
        payload = _ate_payload(model)
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"ate failed: {exc}") from exc
    _emit(payload, args.out)
    return EXIT_OK


def _cmd_blp(args, cfg):
    try:
        model, _ = _with_model(args.model, args.features)
        payload = _blp_payload(model)
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"blp-test failed: {exc}") from exc
    if args.csv:
        _write_blp_csv(payload, Path(args.csv))
    _emit(payload, args.out)
    return EXIT_OK


def _cmd_importance(args, cfg):
    try:
        model, fm = _with_model(args.model, args.features)
        names = fm.column_names if fm is not None else None
        depth = args.max_depth if args.max_depth is not None else \
            (cfg.importance_depth if cfg else 4)
        _importance_csv(model, names, depth, Path(args.out))
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"importance failed: {exc}") from exc
    return EXIT_OK


def _cmd_policy(args, cfg):
    try:
        fit_policy_files(
            _require(args.scores, "scores file"),
            _require(args.features, "features file"),
            args.method, Path(args.out),
            split_json=_require(args.split, "split file") if args.split
            else None,
            depth=cfg.policy_depth if cfg else 2,
            o_ridge=cfg.o_ridge if cfg else 1e-4,
            seed=_seed_of(args, cfg))
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"policy fit failed: {exc}") from exc
    return EXIT_OK


def _cmd_value(args, cfg):
    try:
        payload = policy_value_files(
            _require(args.policy, "policy file"),
            _require(args.scores, "scores file"),
            _require(args.features, "features file") if args.features
            else None)
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"value estimation failed: {exc}") from exc
    _emit(payload, args.out)
    return EXIT_OK


def _cmd_simulate(args, cfg):
    sim = (cfg.sim_settings() if cfg else dict(_SIM_DEFAULTS))
    if args.spec:
        sim["spec"] = args.spec
    if args.effect:
        sim["effect"] = args.effect
    if args.train_n:
        try:
            sim["train_sizes"] = [int(v) for v in args.train_n.split(",")]
        except ValueError:
            raise CliError("--train-n expects comma-separated integers") \
                from None
    if args.replicates is not None:
        sim["replicates"] = args.replicates
    if args.test_n is not None:
        sim["n_test"] = args.test_n
    try:
        simulate_files(Path(args.out),
                       spec_path=Path(sim["spec"]) if sim["spec"] else None,
                       effect=sim["effect"],
                       train_sizes=tuple(sim["train_sizes"]),
                       replicates=int(sim["replicates"]),
                       n_test=int(sim["n_test"]),
                       seed=_seed_of(args, cfg),
                       threads=_threads_of(args, cfg))
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"simulate failed: {exc}") from exc
    return EXIT_OK


def _cmd_run(args, cfg):
    base = cfg.to_dict() if cfg else {}
    overrides = {
        "input_dir": args.in_dir,
        "work_dir": args.work,
        "split_fraction": args.split_fraction,
        "policy_method": args.policy_method,
        "upsample": args.upsample,
        "seed": args.seed,
        "threads": args.threads,
    }
    if args.stages:
        overrides["stages"] = [s.strip() for s in args.stages.split(",")]
    base.update({k: v for k, v in overrides.items() if v is not None})
    merged = config_from_dict(base)
    manifest = run_pipeline(merged)
    done = [f"{s['name']}:{s['status']}" for s in manifest["stages"]]
    print(" ".join(done))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eegpolicy",
                     description="EEG band powers, honest causal forests, "
                                 "and interpretable treatment policies.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (overrides config)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes for parallel stages")
    common.add_argument("--config", default=None,
                        help="pipeline config JSON; flags win over keys")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("preprocess", parents=[common],
                       help="clean raw recordings and emit QC reports")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--site-config", default=None,
                   help="JSON with per-site filter/threshold overrides")
    p.set_defaults(handler=_cmd_preprocess)

    p = sub.add_parser("features", parents=[common],
                       help="relative band powers per subject -> CSV")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="preprocessed directory (with subjects.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_features)

    p = sub.add_parser("fit-forest", parents=[common],
                       help="fit the honest causal forest")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tune", default=None,
                   help="JSON array of parameter overrides to R-loss tune")
    p.add_argument("--scores-out", default=None,
                   help="also write per-subject doubly robust scores")
    p.set_defaults(handler=_cmd_fit_forest)

    p = sub.add_parser("ate", parents=[common],
                       help="doubly robust average treatment effect")
    p.add_argument("--model", required=True)
    p.add_argument("--features", default=None,
                   help="optional table to cross-check row counts")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_ate)

    p = sub.add_parser("blp-test", parents=[common],
                       help="best linear projection heterogeneity test")
    p.add_argument("--model", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None, help="also write a CSV table")
    p.set_defaults(handler=_cmd_blp)

    p = sub.add_parser("importance", parents=[common],
                       help="split-frequency variable importance")
    p.add_argument("--model", required=True)
    p.add_argument("--features", default=None,
                   help="features CSV supplying column names")
    p.add_argument("--out", required=True)
    p.add_argument("--max-depth", type=int, default=None)
    p.set_defaults(handler=_cmd_importance)

    p = sub.add_parser("policy", parents=[common],
                       help="learn a treatment rule from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--method", required=True, choices=POLICY_METHODS)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None,
                   help="split.json restricting to training rows")
    p.set_defaults(handler=_cmd_policy)

    p = sub.add_parser("value", parents=[common],
                       help="doubly robust value of a saved policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--features", default=None,
                   help="needed when the policy maps covariates to arms")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_value)

    p = sub.add_parser("simulate", parents=[common],
                       help="benchmark methods on synthetic cohorts")
    p.add_argument("--spec", default=None,
                   help="generator spec JSON (default: bundled strong spec)")
    p.add_argument("--train-n", default=None, metavar="200,500")
    p.add_argument("--effect", choices=("strong", "weak"), default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--test-n", type=int, default=None)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("run", parents=[common],
                       help="run the staged pipeline with a manifest")
    p.add_argument("--in", dest="in_dir", default=None)
    p.add_argument("--work", default=None)
    p.add_argument("--stages", default=None,
                   help="comma-separated subset of: "
                        + ",".join(PIPELINE_STAGES))
    p.add_argument("--split-fraction", type=float, default=None)
    p.add_argument("--policy-method", choices=POLICY_METHODS, default=None)
    p.add_argument("--upsample", action=argparse.BooleanOptionalAction,
                   default=None)
    p.set_defaults(handler=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "handler", None) is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = load_config(args.config) if args.config else None
        return args.handler(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # anything else that escaped a stage body
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
