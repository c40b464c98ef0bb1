"""Command-line pipeline: ``synth``, ``features`` and ``run``.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import cluster, features, ingest, spline, srvf
from .errors import NumericalError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


@dataclass(frozen=True)
class PipelineConfig:
    input: str | None = None
    out: str = "out"
    features: str | None = None
    spar_combined: float = spline.SPAR_COMBINED
    spar_trend: float = spline.SPAR_TREND
    srvf_samples: int = srvf.DEFAULT_SAMPLES
    lam: float = srvf.DEFAULT_LAMBDA
    template_peak: str = "05-05"
    radius: float = ingest.DEFAULT_RADIUS
    clusters: int = 3
    eta: float = 0.9
    alpha: float = 0.001
    beta: float = 0.001
    iterations: int = 160_000
    burn_in: int = 10_000
    thin: int = 5
    seed: int = 0
    workers: int = 1
    emit_debug: bool = False
    emit_labels: bool = False

    def __post_init__(self):
        lo, hi = spline.SPAR_RANGE
        for name in ("spar_combined", "spar_trend"):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValidationError(f"{name} must lie in [{lo}, {hi}], got {v}")
        if self.srvf_samples < srvf.MIN_SAMPLES:
            raise ValidationError(f"srvf_samples must be >= {srvf.MIN_SAMPLES}")
        if not self.lam >= 0:
            raise ValidationError("lambda must be >= 0")
        if not self.radius > 0:
            raise ValidationError("radius must be > 0")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        self.peak()
        self.model()

    def peak(self) -> tuple[int, int]:
        try:
            month, day = (int(p) for p in self.template_peak.split("-"))
            dt.date(2001, month, day)
        except (ValueError, TypeError):
            raise ValidationError(f"template_peak must be MM-DD, got {self.template_peak!r}") from None
        return month, day

    def model(self) -> cluster.ModelConfig:
        return cluster.ModelConfig(K=self.clusters, eta=self.eta, alpha=self.alpha, beta=self.beta,
                                   iterations=self.iterations, burn_in=self.burn_in, thin=self.thin,
                                   seed=self.seed)


_CONFIG_KEYS = {f.name for f in fields(PipelineConfig)}


def _read_toml(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    data = {k.replace("-", "_"): v for k, v in data.items()}
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {', '.join(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the TOML file, then explicit flags."""
    merged = _read_toml(getattr(args, "config", None))
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    try:
        return PipelineConfig(**merged)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


# ---------------------------------------------------------------- stages

def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _feature_stage(cfg: PipelineConfig, dataset: ingest.Dataset, out: Path) -> features.FeatureMatrix:
    fm, decomps, templates = features.dataset_features(
        dataset, cfg.spar_combined, cfg.spar_trend, cfg.srvf_samples, cfg.lam, cfg.peak(), cfg.workers)
    features.write_features_csv(fm, out / "features.csv")
    _write_json(fm.report(), out / "features_report.json")
    if cfg.emit_debug:
        debug = out / "debug"
        debug.mkdir(exist_ok=True)
        for d, r in zip(decomps, fm.results):
            if r.flag:
                continue
            d.to_csv(debug / f"{d.location_id}_decomposition.csv")
            r.alignment.to_csv(debug / f"{d.location_id}_alignment.csv",
                               srvf.standardize(r.q_osc), srvf.standardize(templates.oscillation))
    return fm


def _load_input(cfg: PipelineConfig) -> ingest.Dataset:
    if not cfg.input:
        raise ValidationError("--input is required")
    return ingest.load_long_csv(cfg.input)


def write_condition_map(dataset: ingest.Dataset, report: cluster.ClusterReport, out: Path) -> None:
    K = report.probabilities.shape[1]
    probs = [f"p_{k + 1}" for k in range(K)]
    lines = [",".join(["location_id", "lon", "lat", "label", *probs])]
    feats = []
    for loc, label, p in zip(dataset.locations, report.map_labels, report.probabilities):
        lines.append(",".join([loc.id, repr(loc.lon), repr(loc.lat), str(int(label) + 1),
                               *(repr(float(v)) for v in p)]))
        props = {"location_id": loc.id, "label": int(label) + 1}
        props.update({name: float(v) for name, v in zip(probs, p)})
        feats.append({"type": "Feature",
                      "geometry": {"type": "Point", "coordinates": [loc.lon, loc.lat]},
                      "properties": props})
    (out / "condition_map.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json({"type": "FeatureCollection", "features": feats}, out / "condition_map.geojson")


def cmd_synth(args: argparse.Namespace) -> int:
    kwargs = {}
    if args.n_per_cluster is not None:
        kwargs["n_per_cluster"] = tuple(args.n_per_cluster)
    if args.noise_sd is not None:
        kwargs["noise_sd"] = args.noise_sd
    if args.seed is not None:
        kwargs["seed"] = args.seed
    dataset, labels = ingest.synthesize_dataset(ingest.SynthConfig(**kwargs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_long_csv(dataset, out / "dataset.csv")
    ingest.write_labels_csv(dataset.ids, labels, out / "labels.csv")
    return EXIT_OK


def cmd_features(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _feature_stage(cfg, _load_input(cfg), out)
    _write_json(asdict(cfg), out / "resolved_config.json")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_input(cfg)
    if cfg.features:
        fm = features.read_features_csv(cfg.features)
        if fm.location_ids != dataset.ids:
            raise ValidationError("features file locations do not match the input dataset order")
        features.write_features_csv(fm, out / "features.csv")
        _write_json(fm.report(), out / "features_report.json")
    else:
        fm = _feature_stage(cfg, dataset, out)
    graph = ingest.build_neighborhoods(dataset.locations, cfg.radius)
    model = cfg.model()
    chain = cluster.run_sampler(fm, graph, model, store_labels=cfg.emit_labels)
    if not np.all(np.isfinite(chain.log_posterior)):
        raise NumericalError("non-finite log posterior in the chain")
    report = cluster.summarize(chain)
    write_condition_map(dataset, report, out)
    cluster.write_chain_csv(chain, out / "trace.csv")
    if cfg.emit_labels:
        cluster.write_label_trace(chain, dataset.ids, out / "labels_trace.csv")
    _write_json({
        "n_samples": report.n_samples,
        "features": list(features.FEATURE_NAMES),
        "mu": {f"cluster_{k + 1}": dict(zip(features.FEATURE_NAMES, report.mean_mu[k].tolist()))
               for k in range(model.K)},
        "sigma2": report.mean_sigma2,
        "cluster_sizes": np.bincount(report.map_labels, minlength=model.K).tolist(),
        "log_posterior_trace": "trace.csv",
    }, out / "chain_summary.json")
    _write_json(asdict(cfg), out / "resolved_config.json")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_feature_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file of settings; flags override it")
    p.add_argument("--input", help="long-format displacement CSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--spar-combined", type=float)
    p.add_argument("--spar-trend", type=float)
    p.add_argument("--srvf-samples", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="warping penalty")
    p.add_argument("--template-peak", help="template peak date as MM-DD")
    p.add_argument("--workers", type=int, help="threads for per-location alignment")
    p.add_argument("--emit-debug", action="store_const", const=True,
                   help="write per-location decomposition and alignment CSVs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peatcluster", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic three-archetype dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-per-cluster", type=int, nargs=3, metavar="N")
    p.add_argument("--noise-sd", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="decompose, register and write features.csv")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("run", help="full pipeline to condition maps")
    _add_feature_flags(p)
    p.add_argument("--features", help="reuse a features.csv instead of recomputing")
    p.add_argument("--radius", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--clusters", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--emit-labels", action="store_const", const=True, help="write the kept label trace")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
