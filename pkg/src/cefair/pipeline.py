"""Run configuration, seed derivation and the checkpointed pipeline stages
(ingest, train, explain, evaluate, curve) shared by the command line."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (BaselineRanking, efm_average_ranking, popularity_ranking,
                        random_ranking, shapley_ranking)
from .cef import CEFConfig, FeatureExplanation, explain_all
from .data import (Catalog, DataError, DatasetSplit, GroupAssignment, assign_groups,
                   chronological_split, filter_min_reviews, parse_interactions,
                   parse_quadruples, write_interactions, write_quadruples)
from .erasure import curves_to_csv, curves_to_json, erase_and_eval, plot_data, tradeoff_curve
from .features import FeatureMatrices, build_matrices, load_matrices, save_matrices
from .ranker import (NumericError, TrainConfig, evaluate_ranking, init_model, load_model,
                     param_digest, save_model, top_k, train)
from .synthetic import SynthConfig, synth_generate

log = logging.getLogger(__name__)

METHODS = ("random", "pop_user", "pop_item", "efm_user", "efm_item", "shapley", "cef")

# config keys each stage depends on, cumulative along the pipeline
STAGE_KEYS = {
    "ingest": ("seed", "interactions", "quadruples", "format", "synthetic", "M", "min_count",
               "holdout", "negatives", "top_fraction"),
    "train": ("merge_kind", "train"),
    "explain": ("cef", "shapley_samples"),
}


class StaleArtifactError(DataError):
    """Upstream checkpoint was produced under a different configuration."""


def sub_seed(global_seed: int, stage: str) -> int:
    """Stable 32-bit seed for a named stage."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    interactions: str | None = None
    quadruples: str | None = None
    format: str | None = None
    synthetic: dict | None = None
    M: float = 5.0
    min_count: int = 20
    holdout: int = 5
    negatives: int = 100
    top_fraction: float = 0.2
    merge_kind: str = "product"
    train: TrainConfig = field(default_factory=TrainConfig)
    cef: CEFConfig = field(default_factory=CEFConfig)
    baselines: list[str] = field(default_factory=lambda: [m for m in METHODS if m != "cef"])
    shapley_samples: int = 100
    E_schedule: list[int] = field(default_factory=lambda: [0, 5, 10, 15, 20])
    curve_step: int = 5
    curve_max_E: int | None = None
    K_list: list[int] = field(default_factory=lambda: [5, 20, 50])

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.cef, dict):
            self.cef = CEFConfig(**self.cef)
        unknown = set(self.baselines) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown baseline methods {sorted(unknown)}")
        # every seeded stage draws from the global seed
        self.train.seed = sub_seed(self.seed, "train")
        self.cef.seed = sub_seed(self.seed, "cef")
        if self.synthetic is not None:
            self.synthetic = SynthConfig(**{**self.synthetic,
                                            "seed": sub_seed(self.seed, "synthetic")}).to_dict()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def stage_hash(self, stage: str) -> str:
        """Digest of every config key the stage (and its upstream stages) depends on."""
        d = self.to_dict()
        keys = []
        for name, ks in STAGE_KEYS.items():
            keys.extend(ks)
            if name == stage:
                break
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def set_path(d: dict, dotted: str, value):
    """Assign ``value`` at a dotted key path, creating nested dicts."""
    *parents, last = dotted.split(".")
    for p in parents:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ValueError(f"{dotted}: {p} is not a section")
    d[last] = value


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "-C", str(here), "describe", "--tags", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        desc = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"cefair {__version__}" + (f" ({desc})" if desc else "")


# ---------------------------------------------------------------- checkpoints

def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    if not path.exists():
        raise DataError(f"missing upstream artifact: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _report(config: RunConfig, stage: str, **body) -> dict:
    return {"stage": stage, "config": config.to_dict(), "config_hash": config.stage_hash(stage),
            "version": version_string(), **body}


def check_upstream(config: RunConfig, out: Path, stage: str, force: bool = False):
    """Compare the stored config hash of ``stage`` with the current config."""
    stored = _read_json(out / f"{stage}.json").get("config_hash")
    current = config.stage_hash(stage)
    if stored != current:
        msg = (f"config for stage '{stage}' changed since its artifacts were written "
               f"({stored} != {current})")
        if not force:
            raise StaleArtifactError(msg + "; rerun the stage or pass --force")
        log.warning("%s; continuing because of --force", msg)


@dataclass
class Dataset:
    catalog: Catalog
    split: DatasetSplit
    groups: GroupAssignment
    matrices: FeatureMatrices
    planted: list[int] | None = None


def load_dataset(out: Path) -> Dataset:
    catalog = Catalog.from_dict(_read_json(out / "catalog.json"))
    split = DatasetSplit.from_dict(_read_json(out / "split.json"))
    groups = GroupAssignment(np.asarray(_read_json(out / "groups.json"), dtype=np.int8))
    if not (out / "matrices.bin").exists():
        raise DataError(f"missing upstream artifact: {out / 'matrices.bin'}")
    planted = _read_json(out / "ingest.json").get("planted")
    return Dataset(catalog, split, groups, load_matrices(out / "matrices.bin"), planted)


# ---------------------------------------------------------------- stages

def build_dataset(config: RunConfig, synthetic: bool = False) -> tuple[Dataset, list, list]:
    """Returns ``(dataset, interactions, quadruples)`` without touching disk for outputs."""
    planted = None
    if synthetic or config.synthetic is not None:
        synth = SynthConfig(**(config.synthetic or {"seed": sub_seed(config.seed, "synthetic")}))
        inter, quads, full, pl = synth_generate(synth)
        planted = sorted(pl)
        features = full.features
    else:
        if not config.interactions or not config.quadruples:
            raise DataError("config needs 'interactions' and 'quadruples' paths (or synthetic mode)")
        inter = parse_interactions(config.interactions, config.format)
        quads = parse_quadruples(config.quadruples, config.format)
        features = None
    inter, quads, catalog = filter_min_reviews(inter, quads, config.min_count, features)
    split = chronological_split(inter, catalog, config.holdout, config.negatives,
                                sub_seed(config.seed, "split"))
    groups = assign_groups(split.train, catalog, config.top_fraction)
    matrices = build_matrices(quads, catalog, config.M)
    return Dataset(catalog, split, groups, matrices, planted), inter, quads


def cmd_ingest(config: RunConfig, synthetic: bool = False) -> dict:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, inter, quads = build_dataset(config, synthetic)
    if ds.planted is not None:
        write_interactions(inter, out / "interactions.tsv")
        write_quadruples(quads, out / "quadruples.tsv")
    _write_json(out / "catalog.json", ds.catalog.to_dict())
    _write_json(out / "split.json", ds.split.to_dict())
    _write_json(out / "groups.json", ds.groups.group_of.tolist())
    save_matrices(ds.matrices, out / "matrices.bin")
    report = _report(config, "ingest", users=ds.catalog.m, items=ds.catalog.n,
                     features=ds.catalog.r, popular_items=ds.groups.g0_size,
                     planted=ds.planted)
    _write_json(out / "ingest.json", report)
    return report


def fit_model(config: RunConfig, ds: Dataset):
    model = init_model(config.merge_kind, ds.catalog.r, seed=sub_seed(config.seed, "init"))
    return train(model, ds.matrices, ds.split, ds.catalog, config.train)


def cmd_train(config: RunConfig, force: bool = False) -> dict:
    out = Path(config.output_dir)
    check_upstream(config, out, "ingest", force)
    ds = load_dataset(out)
    model, trace = fit_model(config, ds)
    save_model(model, out / "model.bin")
    slates = top_k(model, ds.matrices, np.arange(ds.catalog.m), ds.split.candidates,
                   max(config.K_list))
    metrics = evaluate_ranking(slates, ds.split, config.K_list)
    report = _report(config, "train", loss_trace=trace, test_metrics=metrics,
                     param_digest=param_digest(model))
    _write_json(out / "train.json", report)
    return report


def _rows_from_cef(ranked: list[FeatureExplanation]):
    return [{"rank": i + 1, **e.to_dict(), "score": e.es} for i, e in enumerate(ranked)]


def _rows_from_baseline(ranking: BaselineRanking, names):
    return [{"rank": i + 1, "feature_id": f, "feature_name": names[f], "score": s,
             "validity": None, "proximity": None, "es": None, "iters": None}
            for i, (f, s) in enumerate(zip(ranking.ranked_features, ranking.scores))]


def method_label(method: str, target: str | None = None) -> str:
    if method == "cef" and target and target != "both":
        return f"cef_{target}"
    return method


def run_method(config: RunConfig, ds: Dataset, model, method: str, target: str | None = None):
    """Returns ``(rows, failures)``; rows follow the shared ranking schema."""
    names = ds.catalog.features
    if method == "cef":
        cef_cfg = dataclasses.replace(config.cef, target=target or config.cef.target)
        ranked, failures = explain_all(model, ds.matrices, ds.groups, ds.split, cef_cfg,
                                       feature_names=names)
        if not ranked:
            raise NumericError(f"optimisation diverged for every feature: {failures}")
        return _rows_from_cef(ranked), failures
    if method == "random":
        ranking = random_ranking(ds.catalog.r, sub_seed(config.seed, "random"))
    elif method in ("pop_user", "pop_item"):
        ranking = popularity_ranking(ds.matrices, method.split("_")[1])
    elif method in ("efm_user", "efm_item"):
        ranking = efm_average_ranking(ds.matrices, method.split("_")[1])
    elif method == "shapley":
        ranking = shapley_ranking(model, ds.matrices, ds.groups, ds.split, config.cef.K,
                                  config.shapley_samples, sub_seed(config.seed, "shapley"))
    else:
        raise ValueError(f"unknown method {method!r}")
    return _rows_from_baseline(ranking, names), {}


def cmd_explain(config: RunConfig, method: str, target: str | None = None,
                force: bool = False) -> dict:
    out = Path(config.output_dir)
    check_upstream(config, out, "train", force)
    ds = load_dataset(out)
    if not (out / "model.bin").exists():
        raise DataError(f"missing upstream artifact: {out / 'model.bin'}")
    model = load_model(out / "model.bin")
    rows, failures = run_method(config, ds, model, method, target)
    label = method_label(method, target)
    report = _report(config, "explain", method=label, target=target if method == "cef" else None,
                     explanations=rows, failures={str(k): v for k, v in failures.items()})
    _write_json(out / f"explain_{label}.json", report)
    # marker for downstream hash checks
    _write_json(out / "explain.json", {"config_hash": config.stage_hash("explain")})
    return report


def load_rankings(config: RunConfig, out: Path) -> dict[str, list[int]]:
    rankings = {}
    for path in sorted(out.glob("explain_*.json")):
        doc = _read_json(path)
        rankings[doc["method"]] = [row["feature_id"] for row in doc["explanations"]]
    if not rankings:
        raise DataError(f"missing upstream artifact: no explain_*.json in {out}")
    return rankings


def _evaluation_inputs(config: RunConfig, force: bool):
    out = Path(config.output_dir)
    check_upstream(config, out, "explain", force)
    ds = load_dataset(out)
    model = load_model(out / "model.bin")
    return out, ds, model, load_rankings(config, out)


def cmd_evaluate(config: RunConfig, force: bool = False) -> dict:
    out, ds, model, rankings = _evaluation_inputs(config, force)
    digest = param_digest(model)
    points = [erase_and_eval(model, ds.matrices, ranking, E, ds.split, ds.groups,
                             config.K_list, method)
              for method, ranking in rankings.items()
              for E in config.E_schedule if E <= len(ranking)]
    if param_digest(model) != digest:
        raise NumericError("model parameters changed during evaluation")
    (out / "metrics.csv").write_text(curves_to_csv(points), encoding="utf-8")
    (out / "metrics.json").write_text(
        curves_to_json(points, config.to_dict(), version_string()) + "\n", encoding="utf-8")
    return {"points": len(points), "methods": sorted(rankings)}


def cmd_curve(config: RunConfig, force: bool = False) -> dict:
    out, ds, model, rankings = _evaluation_inputs(config, force)
    max_E = config.curve_max_E if config.curve_max_E is not None else ds.catalog.r
    points = [p for method, ranking in rankings.items()
              for p in tradeoff_curve(model, ds.matrices, ranking, ds.split, ds.groups,
                                      config.curve_step, max_E, config.K_list, method)]
    (out / "curve.csv").write_text(curves_to_csv(points), encoding="utf-8")
    (out / "curve.json").write_text(
        curves_to_json(points, config.to_dict(), version_string()) + "\n", encoding="utf-8")
    for K, series in plot_data(points).items():
        _write_json(out / f"plot_ltr_ndcg_at_{K}.json",
                    {"K": K, "x": "long-tail rate (%)", "y": "NDCG (%)", "series": series,
                     "config": config.to_dict(), "version": version_string()})
    return {"points": len(points), "methods": sorted(rankings)}
