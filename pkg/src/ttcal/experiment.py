"""Experiment configs, end-to-end runs, method comparison and SVG plots.

A config is an INI file::

    [scenario]
    kind = SameDist
    seeds = 0, 1, 2
    n_test_classes = 24

    [train]
    steps = 3000

    [finetune]
    steps = 1000

    [methods]
    run = opengcn, platt, beta, isotonic, histogram, dbscan
    ablation = pretrain_only
    output_dir = out

    [targets]
    list = tpr=0.8, tpr=0.9, tnr=0.8, tnr=0.9

Optional ``[network]`` and ``[inference]`` sections set the architecture and
the tau/inference protocol. Relative ``output_dir`` paths resolve against the
config file's directory.
"""

from __future__ import annotations

import configparser
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import POSTHOC_METHODS, dbscan_on_test, posthoc_curve
from .curves import CalibrationTarget, PerfCurve, ThresholdGrid, exact_curves, mae_comb, \
    pointwise_ae, solve_threshold
from .errors import InvalidArgument
from .io import read_summary, rounded_curve, write_curve, write_summary
from .net import NetDims
from .synth import PerturbationSpec, ScenarioConfig, generate_scenario
from .ttc import CalibratorModel, TrainConfig, calibrate, finetune, pretrain, tau_cv_table

log = logging.getLogger(__name__)

METHODS = ("opengcn",) + POSTHOC_METHODS + ("dbscan",)
ABLATIONS = {
    "no_density_loss": "opengcn-conn",
    "avg_only": "opengcn-avg",
    "nbr_only": "opengcn-nbr",
    "pretrain_only": "opengcn-pt",
}
DEFAULT_TARGETS = ("tpr=0.8", "tpr=0.9", "tnr=0.8", "tnr=0.9")
SUMMARY_TARGETS = tuple(CalibrationTarget.parse(t) for t in DEFAULT_TARGETS)


class ConfigError(InvalidArgument):
    """Config text that does not parse or validate; message names the field."""


@dataclass(frozen=True)
class InferenceConfig:
    cv_folds: int = 10
    batch_size: int = 64
    subgraphs: int = 20
    max_rounds: int = 100
    stop_tol: float = 1e-3
    match_prior: bool = True
    prior_odds_cap: float = 10.0


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig
    train: TrainConfig
    finetune: TrainConfig
    methods: tuple[str, ...]
    targets: tuple[CalibrationTarget, ...]
    output_dir: Path
    ablation: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    network: NetDims = field(default_factory=NetDims)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if not self.methods and not self.ablation:
            raise ConfigError("[methods] run: at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"[methods] run: unknown method {bad[0]!r}")
        bad = [a for a in self.ablation if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"[methods] ablation: unknown flag {bad[0]!r}")
        if not self.seeds:
            raise ConfigError("[scenario] seeds: need at least one seed")

    @property
    def method_names(self) -> list[str]:
        return list(self.methods) + [ABLATIONS[a] for a in self.ablation]


# -- parsing -----------------------------------------------------------------------

def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def _pair(text: str, cast=float) -> tuple:
    parts = _split_list(text)
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


_SCENARIO_KEYS = {
    "kind": ("scenario_kind", str), "dim": ("dim", int),
    "n_train_classes": ("n_train_classes", int), "n_cal_classes": ("n_cal_classes", int),
    "n_test_classes": ("n_test_classes", int), "kappa_train": ("kappa_train", _pair),
    "kappa_open": ("kappa_open", _pair),
    "samples_per_class": ("samples_per_class", lambda t: _pair(t, int)),
    "longtail_counts": ("longtail_counts", lambda t: _pair(t, int)),
    "head_counts": ("head_counts", lambda t: _pair(t, int)),
    "zipf_exponent": ("zipf_exponent", float),
    "domain_kappa_scale": ("domain_kappa_scale", float),
    "domain_subspace_dim": ("domain_subspace_dim", int),
}
_TRAIN_KEYS = {
    "batch_size": ("batch_size", int), "steps": ("steps", int), "lr_max": ("lr_max", float),
    "lr_min": ("lr_min", float), "lambda": ("lam", float), "seed": ("seed", int),
    "per_class": ("per_class", int), "rotate": ("rotate", "bool"),
}
_NETWORK_KEYS = {"hidden": int, "heads": int, "layers": int, "mlp_hidden": int,
                 "negative_slope": float}
_INFERENCE_KEYS = {f.name: f.type for f in fields(InferenceConfig)}


def _section_values(cp, section, keys, where):
    out = {}
    if not cp.has_section(section):
        return out
    for key, raw in cp.items(section):
        if key not in keys:
            raise ConfigError(f"{where}: [{section}] unknown key {key!r}")
        name, cast = keys[key] if isinstance(keys[key], tuple) else (key, keys[key])
        try:
            if cast == "bool":
                out[name] = cp.getboolean(section, key)
            else:
                cast = {"int": int, "float": float}.get(cast, cast)
                out[name] = cast(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: [{section}] {key} = {raw!r}: {exc}") from exc
    return out


def _build(cls, kwargs, where, section):
    try:
        return cls(**kwargs)
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: [{section}] {exc}") from exc


def parse_config(text: str, base_dir: Path | str = ".", where: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from exc
    known = {"scenario", "train", "finetune", "methods", "targets", "network", "inference"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"{where}: unknown section [{s}]")

    scen = dict(cp.items("scenario")) if cp.has_section("scenario") else {}
    seeds_text = scen.pop("seeds", "0")
    pert_text = scen.pop("perturbation", "")
    tmp = configparser.ConfigParser(interpolation=None)
    tmp.read_dict({"scenario": scen})
    skw = _section_values(tmp, "scenario", _SCENARIO_KEYS, where)
    if pert_text:
        try:
            kind, mag = pert_text.split(":")
            skw["perturbation"] = PerturbationSpec(kind.strip(), float(mag))
        except (ValueError, InvalidArgument) as exc:
            raise ConfigError(f"{where}: [scenario] perturbation = {pert_text!r}: "
                              "expected kind:magnitude") from exc
    try:
        seeds = tuple(int(s) for s in _split_list(seeds_text))
    except ValueError as exc:
        raise ConfigError(f"{where}: [scenario] seeds = {seeds_text!r}: {exc}") from exc
    env_seed = os.environ.get("TTC_SEED")
    if env_seed not in (None, ""):
        try:
            seeds = (int(env_seed),)
        except ValueError as exc:
            raise ConfigError(f"TTC_SEED={env_seed!r} is not an integer") from exc
    scenario = _build(ScenarioConfig, skw, where, "scenario")

    train = _build(TrainConfig, _section_values(cp, "train", _TRAIN_KEYS, where), where, "train")
    fkw = _section_values(cp, "finetune", _TRAIN_KEYS, where)
    fkw.setdefault("steps", 1000)
    fine = _build(TrainConfig, {**fkw, "stage": "finetune"}, where, "finetune")
    network = _build(NetDims, {"input_dim": scenario.dim,
                               **_section_values(cp, "network", _NETWORK_KEYS, where)},
                     where, "network")
    inference = _build(InferenceConfig, _section_values(cp, "inference", _INFERENCE_KEYS, where),
                       where, "inference")

    mkw = dict(cp.items("methods")) if cp.has_section("methods") else {}
    unknown = set(mkw) - {"run", "ablation", "output_dir"}
    if unknown:
        raise ConfigError(f"{where}: [methods] unknown key {sorted(unknown)[0]!r}")
    methods = tuple(_split_list(mkw.get("run", ",".join(METHODS))))
    ablation = tuple(_split_list(mkw.get("ablation", "")))
    out = Path(mkw.get("output_dir", "ttc-out"))
    if not out.is_absolute():
        out = Path(base_dir) / out

    tkw = dict(cp.items("targets")) if cp.has_section("targets") else {}
    if set(tkw) - {"list"}:
        raise ConfigError(f"{where}: [targets] only the 'list' key is allowed")
    try:
        targets = tuple(CalibrationTarget.parse(t) for t in _split_list(tkw.get("list", ",".join(DEFAULT_TARGETS))))
    except InvalidArgument as exc:
        raise ConfigError(f"{where}: [targets] list: {exc}") from exc

    return _build(ExperimentConfig, dict(scenario=scenario, train=train, finetune=fine,
                                         methods=methods, targets=targets, output_dir=out,
                                         ablation=ablation, seeds=seeds, network=network,
                                         inference=inference), where, "methods")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent, str(path))


# -- running ------------------------------------------------------------------------

def derived_seed(base: int, run_seed: int) -> int:
    """Independent, reproducible seed for a (config seed, run seed) pair."""
    return int(np.random.SeedSequence([base, run_seed]).generate_state(1)[0])


def evaluate_curves(est: PerfCurve, true: PerfCurve, targets) -> dict:
    """Metrics computed from the CSV-rounded curves so they round-trip."""
    est, true = rounded_curve(est), rounded_curve(true)
    row = {"mae_comb": mae_comb(est, true)}
    for t in targets:
        d = solve_threshold(est, t)
        row[f"d_opt_{t.tag}"] = d
        row[f"ae_{t.tag}"] = pointwise_ae(true, d, t)
    return row


@dataclass
class MethodResult:
    name: str
    curve: PerfCurve | None
    rounds: int | None = None
    converged: bool | None = None
    error: str | None = None


def _variant_train_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant == "opengcn-conn":
        return replace(cfg, lam=0.0)
    if variant == "opengcn-avg":
        return replace(cfg, density_terms=("avg",))
    if variant == "opengcn-nbr":
        return replace(cfg, density_terms=("nbr",))
    return cfg


class _OpenGcnRunner:
    """Trains OpenGCN variants for one partition, sharing pretrained encoders."""

    def __init__(self, config: ExperimentConfig, part, run_seed: int):
        self.config, self.part, self.run_seed = config, part, run_seed
        self._pretrained: dict = {}

    def _pretrain(self, cfg: TrainConfig):
        key = (cfg.lam, cfg.density_terms)
        if key not in self._pretrained:
            self._pretrained[key] = pretrain(cfg, self.part.train, self.config.network).params
        return self._pretrained[key]

    def run(self, variant: str) -> MethodResult:
        c = self.config
        pre_cfg = replace(_variant_train_config(c.train, variant),
                          seed=derived_seed(c.train.seed, self.run_seed))
        params = self._pretrain(pre_cfg)
        prov = {"pretrain": pre_cfg.as_dict()}
        if variant != "opengcn-pt":
            fine_cfg = replace(_variant_train_config(c.finetune, variant),
                               seed=derived_seed(c.finetune.seed + 1, self.run_seed))
            params = finetune(params, fine_cfg, self.part.cal).params
            prov["finetune"] = fine_cfg.as_dict()
        inf = c.inference
        table = tau_cv_table(params, self.part.cal, inf.cv_folds, batch_size=inf.batch_size,
                             n_subgraphs=inf.subgraphs, seed=self.run_seed)
        model = CalibratorModel(params, table.select(), ThresholdGrid(), prov, table)
        report = calibrate(model, self.part.test.unlabeled(), [], match_prior=inf.match_prior,
                           prior_odds_cap=inf.prior_odds_cap,
                           batch_size=min(inf.batch_size, len(self.part.test)),
                           max_rounds=inf.max_rounds, stop_tol=inf.stop_tol,
                           n_subgraphs=inf.subgraphs, seed=self.run_seed)
        return MethodResult(variant, report.estimated, report.rounds, report.converged)


_RECOVERABLE = (ValueError, ArithmeticError, RuntimeError)


def run_experiment(config: ExperimentConfig) -> tuple[list[dict], list[str]]:
    """Run every method for every seed; returns summary rows and failure messages.

    Writes per-method curve CSVs and SVG plots, the true curve, and
    ``summary.csv`` into ``config.output_dir``.
    """
    out = config.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InvalidArgument(f"output directory {out} is not writable: {exc}") from exc

    scen_name = config.scenario.scenario_kind
    rows, failures = [], []
    for seed in config.seeds:
        part = generate_scenario(replace(config.scenario, seed=seed))
        grid = ThresholdGrid()
        truth = {k: exact_curves(getattr(part, k), grid) for k in ("train", "cal", "test")}
        stem = f"{scen_name}_s{seed}"
        write_curve(out / f"{stem}_true.csv", truth["test"])
        runner = _OpenGcnRunner(config, part, seed)
        for name in config.method_names:
            log.info("seed %d: %s", seed, name)
            try:
                if name in POSTHOC_METHODS:
                    res = MethodResult(name, posthoc_curve(name, truth["train"], truth["cal"]))
                elif name == "dbscan":
                    res = MethodResult(name, dbscan_on_test(part.cal, part.test.unlabeled(), grid))
                else:
                    res = runner.run(name)
            except _RECOVERABLE as exc:
                res = MethodResult(name, None, error=f"{type(exc).__name__}: {exc}")
            row = {"method": name, "scenario": scen_name, "seed": seed,
                   "rounds": res.rounds, "converged": res.converged}
            if res.curve is None:
                failures.append(f"{scen_name} seed {seed} {name}: {res.error}")
                row.update(mae_comb=float("nan"), converged="failed")
            else:
                write_curve(out / f"{stem}_{name}.csv", res.curve)
                write_svg(out / f"{stem}_{name}.svg", rounded_curve(res.curve),
                          rounded_curve(truth["test"]), f"{name} on {scen_name}, seed {seed}")
                row.update(evaluate_curves(res.curve, truth["test"], config.targets))
            rows.append(row)
    write_summary(out / "summary.csv", rows)
    return rows, failures


# -- comparison ------------------------------------------------------------------------

def _rank_with_ties(values: list[float]) -> list[float]:
    """Rank 1 = smallest; ties share the mean rank; NaN ranks last."""
    keyed = [(math.inf if math.isnan(v) else v) for v in values]
    order = sorted(range(len(keyed)), key=lambda i: keyed[i])
    ranks = [0.0] * len(keyed)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and keyed[order[j + 1]] == keyed[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


COMPARE_HEADER = ["scenario", "method", "mean_mae_comb", "mean_rank", "best", "improvement"]


def _family(method: str) -> str:
    return "opengcn" if method.startswith("opengcn") else method


def compare(paths) -> list[dict]:
    """Rank methods per scenario (and overall) from summary CSVs.

    Within each (scenario, seed) group methods are ranked by ``mae_comb``.
    ``improvement`` on the best method's row is ``(baseline - best) /
    baseline`` where ``baseline`` is the best mean error among methods of a
    different family (all OpenGCN variants form one family).
    """
    paths = list(paths)
    if len(paths) < 2:
        raise InvalidArgument("compare needs at least two summary files")
    records = []
    for p in paths:
        try:
            rows = read_summary(p)
        except InvalidArgument as exc:
            raise InvalidArgument(f"{p}: summary schema mismatch") from exc
        for r in rows:
            try:
                mae = float(r["mae_comb"]) if r["mae_comb"] else math.nan
            except ValueError as exc:
                raise InvalidArgument(f"{p}: bad mae_comb {r['mae_comb']!r}") from exc
            records.append((r["scenario"], r["seed"], r["method"], mae))

    out = []
    for scen in sorted({r[0] for r in records}) + ["ALL"]:
        sub = [r for r in records if scen == "ALL" or r[0] == scen]
        ranks: dict[str, list[float]] = {}
        maes: dict[str, list[float]] = {}
        for group in sorted({(r[0], r[1]) for r in sub}):
            members = [r for r in sub if (r[0], r[1]) == group]
            for r, rk in zip(members, _rank_with_ties([m[3] for m in members])):
                ranks.setdefault(r[2], []).append(rk)
                maes.setdefault(r[2], []).append(r[3])
        mean_mae = {m: float(np.mean(v)) for m, v in maes.items()}
        finite = {m: v for m, v in mean_mae.items() if not math.isnan(v)}
        best = min(finite, key=lambda m: (finite[m], m)) if finite else None
        rivals = {m: v for m, v in finite.items() if best and _family(m) != _family(best)}
        improvement = None
        if best is not None and rivals:
            base = min(rivals.values())
            improvement = (base - finite[best]) / base if base > 0 else 0.0
        for m in sorted(mean_mae, key=lambda m: (float(np.mean(ranks[m])), m)):
            out.append({"scenario": scen, "method": m, "mean_mae_comb": mean_mae[m],
                        "mean_rank": float(np.mean(ranks[m])), "best": m == best,
                        "improvement": improvement if m == best else None})
    return out


def write_compare(path, table: list[dict]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in table:
            w.writerow([r["scenario"], r["method"], f"{r['mean_mae_comb']:.10g}",
                        f"{r['mean_rank']:.10g}", "1" if r["best"] else "0",
                        "" if r["improvement"] is None else f"{r['improvement']:.10g}"])


# -- plots ------------------------------------------------------------------------------

def _polyline(xs, ys, color, dashed, x0, y0, w, h):
    pts = " ".join(f"{x0 + x / 2.0 * w:.2f},{y0 + h - y * h:.2f}" for x, y in zip(xs, ys))
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>'


def write_svg(path, est: PerfCurve, true: PerfCurve, title: str) -> None:
    """Threshold on x, rate on y; true curves solid, estimates dashed."""
    W, H, x0, y0, w, h = 520, 360, 50, 30, 440, 280
    d = true.thresholds
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
        f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>',
    ]
    for k in range(5):
        tx, ty = k * 0.5, k * 0.25
        parts.append(f'<text x="{x0 + tx / 2 * w:.1f}" y="{y0 + h + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{tx:g}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{y0 + h - ty * h + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{ty:g}</text>')
    parts += [
        _polyline(d, true.tpr, "#1f77b4", False, x0, y0, w, h),
        _polyline(d, true.tnr, "#d62728", False, x0, y0, w, h),
        _polyline(d, est.tpr, "#1f77b4", True, x0, y0, w, h),
        _polyline(d, est.tnr, "#d62728", True, x0, y0, w, h),
        f'<text x="{x0 + w / 2}" y="{H - 8}" text-anchor="middle" font-family="sans-serif" '
        'font-size="12">distance threshold (TPR blue, TNR red; dashed = estimate)</text>',
        "</svg>",
    ]
    Path(path).write_text("\n".join(parts) + "\n")
