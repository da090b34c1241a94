"""Command-line entry point: ``groupdest <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run writes ``run_config.json`` (all options materialised, minus
``jobs`` and the output directory) and ``manifest.json`` with the SHA-256 of
every artifact. Output bytes never depend on ``--jobs``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, synth
from .domain import DataError, load_dataset, validate_dataset, write_dataset
from .estimator import ModelSpec, SingularHessianError, estimate
from .impedance import (ConvergenceError, ImpedanceKind, MissingSkimError, ModeClassifier, SpeedProvider,
                        ego_records, load_skim, resolve_modes, train_mode_classifier)
from .sampling import CORRECTIONS, FEATURES, InsufficientAlternativesError, SamplingConfig, sample_choice_data

SUBCOMMANDS = ("generate", "estimate", "validate", "elasticity", "curves", "segment", "mode-model", "recover")
KINDS = tuple(k.value for k in ImpedanceKind)
BASELINE = "ego"
INCREASE_LABEL = "increase against individual model"


class UsageError(Exception):
    pass


class NumericalFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunConfig:
    subcommand: str
    data: str | None = None
    out: str = "out"
    impedance: str = "mean"
    replicates: int = 50
    k: int = 20
    seed: int = 0
    correction: str = "none"
    segment: str | None = None
    folds: int = 10
    weighting: str = "unweighted"
    by_clique: bool = False
    skim: str | None = None
    skim_cell_km: float = 1.0
    mode_model: str | None = None
    beta: tuple | None = None
    curve_max: float = 60.0
    curve_step: float = 1.0
    max_failed_share: float = 0.5
    n_seeds: int = 1
    n_situations: int = 261
    n_cliques: int = 101
    n_zones: int = 119
    jobs: int = field(default=1, repr=False)

    @property
    def kinds(self):
        return KINDS if self.impedance == "all" else (self.impedance,)

    @property
    def sampling(self):
        return SamplingConfig(k=self.k, correction=self.correction, rng_seed=self.seed)

    @property
    def bootstrap(self):
        return analysis.BootstrapConfig(r=self.replicates, rng_seed=self.seed, sampling=self.sampling,
                                        weighting=self.weighting)

    def to_dict(self):
        d = dataclasses.asdict(self)
        del d["jobs"], d["out"]
        if d["beta"] is not None:
            d["beta"] = list(d["beta"])
        return d


# ---------------------------------------------------------------------------
# argument handling


def build_parser():
    p = _Parser(prog="groupdest", description="Group destination choice estimation pipeline.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--data", help="directory with zones.csv, cliques.csv, situations.csv")
    p.add_argument("--out", help="output directory")
    p.add_argument("--impedance", choices=KINDS + ("all",))
    p.add_argument("--replicates", type=int, help="bootstrap replicates")
    p.add_argument("--k", type=int, help="sampled non-chosen alternatives per situation")
    p.add_argument("--seed", type=int)
    p.add_argument("--correction", choices=CORRECTIONS)
    p.add_argument("--segment", help="segmentation rule name, or 'all'")
    p.add_argument("--folds", type=int)
    p.add_argument("--weighting", choices=analysis.WEIGHTINGS)
    p.add_argument("--by-clique", action="store_const", const=True, help="draw CV folds by clique")
    p.add_argument("--skim", help="skim CSV (origin_cell, zone_id, mode, minutes)")
    p.add_argument("--skim-cell-km", type=float)
    p.add_argument("--mode-model", help="saved mode classifier JSON")
    p.add_argument("--beta", help="comma-separated coefficients (major_station,ln_restaurants,cost)")
    p.add_argument("--curve-max", type=float)
    p.add_argument("--curve-step", type=float)
    p.add_argument("--max-failed-share", type=float)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--n-situations", type=int)
    p.add_argument("--n-cliques", type=int)
    p.add_argument("--n-zones", type=int)
    p.add_argument("--jobs", type=int)
    return p


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment, keys may use dashes."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(name, value):
    fields_ = {f.name: f for f in dataclasses.fields(RunConfig)}
    if name not in fields_ or name == "subcommand":
        raise UsageError(f"unknown config key {name!r}")
    default = fields_[name].default
    if value is None:
        return None
    if name == "beta":
        return _parse_beta(value)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes"):
            return True
        if str(value).lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"{name}: {exc}") from exc
    return str(value)


def _parse_beta(value):
    if isinstance(value, tuple):
        return value
    try:
        beta = tuple(float(x) for x in str(value).split(","))
    except ValueError as exc:
        raise UsageError(f"beta: {exc}") from exc
    if len(beta) != len(FEATURES):
        raise UsageError(f"beta needs {len(FEATURES)} values, got {len(beta)}")
    return beta


def parse_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    values = {}
    if ns.config:
        try:
            values.update(read_config_file(ns.config))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    for key, value in vars(ns).items():
        if key not in ("subcommand", "config") and value is not None:
            values[key] = value
    cfg = RunConfig(ns.subcommand, **{k: _coerce(k, v) for k, v in values.items()})
    if cfg.impedance not in KINDS + ("all",):
        raise UsageError(f"impedance must be one of {KINDS + ('all',)}")
    if cfg.correction not in CORRECTIONS:
        raise UsageError(f"correction must be one of {CORRECTIONS}")
    if cfg.replicates < 2 or cfg.k < 1 or cfg.folds < 2 or cfg.jobs < 1 or cfg.n_seeds < 1:
        raise UsageError("replicates >= 2, k >= 1, folds >= 2, jobs >= 1 and n-seeds >= 1 are required")
    if cfg.curve_step <= 0 or cfg.curve_max <= 0:
        raise UsageError("curve-max and curve-step must be positive")
    if cfg.subcommand not in ("generate", "recover") and not (cfg.subcommand == "curves" and cfg.beta):
        if cfg.data is None:
            raise UsageError(f"{cfg.subcommand} requires --data")
    if cfg.subcommand == "segment" and cfg.segment is None:
        raise UsageError("segment requires --segment")
    return cfg


# ---------------------------------------------------------------------------
# report writing


def _num(x):
    return "" if x is None else repr(float(x))


def _stat(x):
    return str(int(x)) if isinstance(x, bool) else _num(x)


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, notes=()):
    out_dir = Path(out_dir)
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {"files": {p.relative_to(out_dir).as_posix(): _sha256(p) for p in files},
                "notes": list(notes)}
    return _write_json(out_dir / "manifest.json", manifest)


@dataclass
class ModelResults:
    """Everything one impedance specification contributes to the reports."""

    kind: str
    point: object = None  # EstimationResult
    bootstrap: object = None  # BootstrapResult
    validation: object = None  # ValidationReport
    t_bar: float | None = None
    curve: list | None = None

    def coefficients(self):
        if self.bootstrap is not None:
            s = self.bootstrap.summary()["coefficients"]
            return [s[v]["mean"] for v in FEATURES]
        return [float(b) for b in self.point.beta]


def emit_reports(results: dict, out_dir, config: RunConfig | None = None, extra=None, notes=()):
    """Write the comparison tables for ``{kind: ModelResults}`` and the manifest.

    Tables have one column per specification in ``results`` order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = list(results)
    written = []
    if any(r.point is not None or r.bootstrap is not None for r in results.values()):
        rows = [[v] + [_num(results[k].coefficients()[i]) for k in kinds] for i, v in enumerate(FEATURES)]
        written.append(_write_csv(out / "coefficients.csv", ["variable"] + kinds, rows))
    if all(r.bootstrap is not None for r in results.values()):
        summ = {k: results[k].bootstrap.summary()["coefficients"] for k in kinds}
        rows = []
        for v in FEATURES:
            for stat in ("se", "z", "p_value", "significant_10"):
                rows.append([v, stat] + [_stat(summ[k][v][stat]) for k in kinds])
        written.append(_write_csv(out / "significance.csv", ["variable", "statistic"] + kinds, rows))
    if all(r.point is not None for r in results.values()):
        stats = [("rho2", "rho2"), ("adj_rho2", "adj_rho2"), ("ll", "ll"), ("ll0", "ll0"), ("n_obs", "n_obs")]
        rows = [[label] + [_num(getattr(results[k].point, attr)) for k in kinds] for label, attr in stats[:-1]]
        rows.append(["n_obs"] + [str(results[k].point.n_obs) for k in kinds])
        written.append(_write_csv(out / "fit.csv", ["statistic"] + kinds, rows))
    if all(r.validation is not None for r in results.values()):
        reps = {k: results[k].validation for k in kinds}
        rows = [["percent_correct"] + [_num(reps[k].percent_correct) for k in kinds],
                ["fitting_factor"] + [_num(reps[k].fitting_factor) for k in kinds]]
        if BASELINE in reps and len(reps) > 1:
            inc = analysis.compare_to_baseline(reps, BASELINE)
            for metric in ("percent_correct", "fitting_factor"):
                rows.append([f"{INCREASE_LABEL}: {metric}"] +
                            ["" if k == BASELINE else _num(inc[k][metric]) for k in kinds])
        written.append(_write_csv(out / "validation.csv", ["metric"] + kinds, rows))
    if all(r.bootstrap is not None for r in results.values()):
        rows = []
        summaries = {k: results[k].bootstrap.summary()["elasticities"] for k in kinds}
        for v in analysis.ELASTICITY_VARIABLES:
            for stat in ("mean", "ci_low", "ci_high", "se"):
                rows.append([v, stat] + [_num(summaries[k][v][stat]) for k in kinds])
        written.append(_write_csv(out / "elasticities.csv", ["variable", "statistic"] + kinds, rows))
    if all(r.curve is not None for r in results.values()):
        grid = [t for t, _ in results[kinds[0]].curve]
        rows = [[_num(t)] + [_num(results[k].curve[i][1]) for k in kinds] for i, t in enumerate(grid)]
        written.append(_write_csv(out / "curves.csv", ["minutes"] + kinds, rows))
        (out / "curves.svg").write_text(analysis.curves_svg({k: results[k].curve for k in kinds}),
                                        encoding="utf-8")
    detail = {k: _model_dict(r) for k, r in results.items()}
    if extra:
        detail.update(extra)
    _write_json(out / "results.json", detail)
    if config is not None:
        _write_json(out / "run_config.json", config.to_dict())
    return write_manifest(out, notes)


def _model_dict(r: ModelResults):
    d = {"t_bar": r.t_bar}
    if r.point is not None:
        d["point_estimate"] = r.point.to_dict()
    if r.bootstrap is not None:
        b = r.bootstrap
        d["bootstrap"] = {"n_requested": b.n_requested, "n_used": b.n_replicates,
                          "failed_replicates": list(b.failed), "summary": b.summary()}
    if r.validation is not None:
        d["validation"] = r.validation.to_dict()
    return d


# ---------------------------------------------------------------------------
# pipeline pieces


def _provider(cfg: RunConfig):
    return load_skim(cfg.skim, cfg.skim_cell_km) if cfg.skim else SpeedProvider()


def _dataset(cfg: RunConfig):
    ds = load_dataset(cfg.data)
    if all(p.mode is not None for s in ds.situations for p in s.participants):
        return ds, None
    if cfg.mode_model:
        clf = ModeClassifier.load(cfg.mode_model)
    else:
        clf = train_mode_classifier(ego_records(ds), rng_seed=cfg.seed)
    return resolve_modes(ds, clf), clf


def _point(prep, kind, cfg: RunConfig):
    data = sample_choice_data(prep.costs(kind), prep.chosen_index, prep.zones, cfg.sampling,
                              situation_ids=tuple(s.id for s in prep.dataset.situations))
    res = estimate(data, ModelSpec(kind))
    if not res.converged:
        raise NumericalFailure(f"{kind}: point estimate did not converge (max |gradient| {res.gradient_max:.3g})")
    return res, data.t_bar


def _bootstrap(prep, kind, cfg: RunConfig):
    boot = analysis.bootstrap_estimate(prep, ModelSpec(kind), None, cfg.bootstrap, cfg.jobs)
    share = len(boot.failed) / boot.n_requested
    if share > cfg.max_failed_share:
        raise NumericalFailure(f"{kind}: {len(boot.failed)} of {boot.n_requested} replicates failed")
    return boot


def _validate(prep, kind, cfg: RunConfig):
    return analysis.cross_validate(prep, ModelSpec(kind), None, cfg.folds, cfg.seed, cfg.sampling,
                                   cfg.by_clique, jobs=cfg.jobs)


def _grid(cfg: RunConfig):
    return tuple(np.round(np.arange(0.0, cfg.curve_max + cfg.curve_step / 2, cfg.curve_step), 10))


def _curve(beta, t_bar, cfg: RunConfig):
    return analysis.probability_curve(beta, analysis.CurveSpec(_grid(cfg), k=cfg.k, background_time=t_bar))


def _curve_note(results):
    return {"curve_background": {
        k: {"alternatives": "k zones, 300 restaurants, not major station", "minutes": r.t_bar}
        for k, r in results.items()}}


def _classifier_extra(clf):
    return {} if clf is None else {"mode_classifier": {"cv_accuracy": clf.cv_accuracy}}


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig):
    scen = synth.ScenarioConfig(n_zones=cfg.n_zones, n_cliques=cfg.n_cliques, n_situations=cfg.n_situations,
                                rng_seed=cfg.seed)
    truth = synth.TrueModel(cfg.beta or synth.AVERAGE_MODEL_BETA,
                            ImpedanceKind(cfg.impedance if cfg.impedance != "all" else "mean"))
    out = Path(cfg.out)
    write_dataset(synth.synthetic_dataset(scen, truth), out)
    _write_json(out / "run_config.json", cfg.to_dict())
    write_manifest(out)


def cmd_estimate(cfg: RunConfig):
    ds, clf = _dataset(cfg)
    prep = analysis.prepare(ds, _provider(cfg))
    results = {}
    for kind in cfg.kinds:
        point, t_bar = _point(prep, kind, cfg)
        r = ModelResults(kind, point=point, bootstrap=_bootstrap(prep, kind, cfg),
                         validation=_validate(prep, kind, cfg), t_bar=t_bar)
        r.curve = _curve(r.coefficients(), t_bar, cfg)
        results[kind] = r
    emit_reports(results, cfg.out, cfg, {**_curve_note(results), **_classifier_extra(clf)})


def cmd_validate(cfg: RunConfig):
    ds = load_dataset(cfg.data)
    report = validate_dataset(ds.zones, ds.cliques, ds.situations, strict=False)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "dataset_report.json", report.to_dict())
    if not report.ok:
        _write_json(out / "run_config.json", cfg.to_dict())
        write_manifest(out, [f"{len(report.violations)} dataset violations; validation skipped"])
        raise DataError(f"{len(report.violations)} dataset violations, see {out / 'dataset_report.json'}")
    ds, clf = _dataset(cfg)
    prep = analysis.prepare(ds, _provider(cfg))
    results = {k: ModelResults(k, validation=_validate(prep, k, cfg)) for k in cfg.kinds}
    emit_reports(results, out, cfg, _classifier_extra(clf))


def cmd_elasticity(cfg: RunConfig):
    ds, clf = _dataset(cfg)
    prep = analysis.prepare(ds, _provider(cfg))
    results = {k: ModelResults(k, bootstrap=_bootstrap(prep, k, cfg)) for k in cfg.kinds}
    emit_reports(results, cfg.out, cfg, _classifier_extra(clf))


def cmd_curves(cfg: RunConfig):
    results, clf = {}, None
    if cfg.beta is not None and cfg.data is None:
        kind = cfg.impedance if cfg.impedance != "all" else "mean"
        r = ModelResults(kind, t_bar=15.0)
        r.curve = _curve(cfg.beta, r.t_bar, cfg)
        results[kind] = r
    else:
        ds, clf = _dataset(cfg)
        prep = analysis.prepare(ds, _provider(cfg))
        for kind in cfg.kinds:
            point, t_bar = _point(prep, kind, cfg)
            r = ModelResults(kind, point=point, t_bar=t_bar)
            r.curve = _curve(cfg.beta if cfg.beta is not None else point.beta, t_bar, cfg)
            results[kind] = r
    emit_reports(results, cfg.out, cfg, {**_curve_note(results), **_classifier_extra(clf)})


def cmd_segment(cfg: RunConfig):
    ds, clf = _dataset(cfg)
    prep = analysis.prepare(ds, _provider(cfg))
    rules = analysis.segment_rules()
    names = list(rules) if cfg.segment == "all" else [cfg.segment]
    unknown = [n for n in names if n not in rules]
    if unknown:
        raise UsageError(f"unknown segment rule {unknown[0]!r}; choose from {sorted(rules)} or 'all'")
    kind = cfg.kinds[0] if cfg.impedance != "all" else "mean"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    notes, detail = [], {}
    for name in names:
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                seg = analysis.segment_and_estimate(prep, rules[name], ModelSpec(kind), None, cfg.bootstrap,
                                                    _grid(cfg), cfg.jobs)
        except analysis.EmptySegmentError as exc:
            notes.append(f"segment {name} omitted: {exc}")
            continue
        notes.extend(str(w.message) for w in caught)
        sides = list(seg.names)
        summ = {s: seg.results[s].summary() for s in sides}
        rows = [["n", *[str(seg.sizes[s]) for s in sides]]]
        for v in FEATURES:
            rows.append([v, *[_num(summ[s]["coefficients"][v]["mean"]) for s in sides]])
            rows.append([f"{v} se", *[_num(summ[s]["coefficients"][v]["se"]) for s in sides]])
        for v in analysis.ELASTICITY_VARIABLES:
            rows.append([f"elasticity {v}", *[_num(summ[s]["elasticities"][v]["mean"]) for s in sides]])
        _write_csv(out / f"segment_{name}.csv", ["statistic", *sides], rows)
        grid = [t for t, _ in seg.curves[sides[0]]]
        _write_csv(out / f"segment_{name}_curves.csv", ["minutes", *sides],
                   [[_num(t), *[_num(seg.curves[s][i][1]) for s in sides]] for i, t in enumerate(grid)])
        (out / f"segment_{name}_curves.svg").write_text(analysis.curves_svg(seg.curves), encoding="utf-8")
        detail[name] = {"sizes": seg.sizes,
                        "failed_replicates": {s: list(seg.results[s].failed) for s in sides},
                        "summary": summ}
    detail.update(_classifier_extra(clf))
    _write_json(out / "results.json", detail)
    _write_json(out / "run_config.json", cfg.to_dict())
    write_manifest(out, notes)


def cmd_mode_model(cfg: RunConfig):
    ds = load_dataset(cfg.data)
    clf = train_mode_classifier(ego_records(ds), folds=cfg.folds, rng_seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    clf.save(out / "mode_model.json")
    _write_json(out / "run_config.json", cfg.to_dict())
    write_manifest(out, [f"cv_accuracy {clf.cv_accuracy!r}"])


def cmd_recover(cfg: RunConfig):
    kind = ImpedanceKind(cfg.impedance if cfg.impedance != "all" else "mean")
    truth = synth.TrueModel(cfg.beta or synth.AVERAGE_MODEL_BETA, kind)
    rows, detail = [], {}
    for seed in range(cfg.seed, cfg.seed + cfg.n_seeds):
        scen = synth.ScenarioConfig(n_zones=cfg.n_zones, n_cliques=cfg.n_cliques,
                                    n_situations=cfg.n_situations, rng_seed=seed)
        boot = dataclasses.replace(cfg.bootstrap, rng_seed=seed,
                                   sampling=dataclasses.replace(cfg.sampling, rng_seed=seed))
        rep = synth.recovery_test(scen, truth, synth.PipelineConfig(boot, run_cv=True, folds=cfg.folds),
                                  jobs=cfg.jobs)
        rows.append([str(seed), *map(_num, rep.beta_mean), *map(_num, rep.se), *map(_num, rep.z),
                     str(int(rep.all_within)), str(rep.n_failed_replicates)])
        detail[str(seed)] = rep.to_dict()
    header = ["seed", *[f"mean {v}" for v in FEATURES], *[f"se {v}" for v in FEATURES],
              *[f"z {v}" for v in FEATURES], "all_within", "failed_replicates"]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "recovery.csv", header, rows)
    share = sum(int(r[-2]) for r in rows) / len(rows)
    _write_json(out / "results.json", {"seeds": detail, "share_all_within": share})
    _write_json(out / "run_config.json", cfg.to_dict())
    write_manifest(out)


COMMANDS = {
    "generate": cmd_generate, "estimate": cmd_estimate, "validate": cmd_validate,
    "elasticity": cmd_elasticity, "curves": cmd_curves, "segment": cmd_segment,
    "mode-model": cmd_mode_model, "recover": cmd_recover,
}

DATA_ERRORS = (DataError, OSError, MissingSkimError, InsufficientAlternativesError, analysis.FoldSizeError,
               analysis.EmptySegmentError)
NUMERICAL_ERRORS = (NumericalFailure, SingularHessianError, ConvergenceError, RuntimeError,
                    FloatingPointError, np.linalg.LinAlgError)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_args(argv)
        COMMANDS[cfg.subcommand](cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
