"""Benchmark orchestration: sweeps, bridge runs, the counterexample demo and the sampler demo.

Every command writes ``records.csv``, ``report.md``, ``manifest.json`` and
``figures/*.svg`` into its output directory.  Records and manifests contain
no timing or host-specific data, so reruns with the same configuration are
byte-identical.  Wall times are returned to the caller (the CLI logs them).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy

from . import stats
from .baselines import (
    cf_mse,
    direction_accuracy_of,
    fit_anm,
    fit_contextual_flow,
    fit_tmscm,
    latent_recovery_error,
)
from .inverter import TrainConfig, TrainingDivergence, fit_inverter
from .sampler import balanced_queries, query_stats, save_queries, save_stats
from .scm import Bijection, CounterfactualQuery, Intervention, exogenous_isomorph
from .scm import observational_equivalence_check, transport_variation
from .svg import Chart
from .zoo import (
    MechanismFamily,
    SweepConfig,
    make_counterexample_pair,
    make_hidden_phase_scm,
    make_scm,
    sample_dataset,
)

FORMAT_VERSION = 1
MODELS = ("anm", "tmscm", "contextual_flow", "ours")
MODEL_LABELS = {"anm": "ANM", "tmscm": "TM-SCM", "contextual_flow": "ContextualFlow", "ours": "Ours"}
FLIP_FAMILIES = ("threshold_flip", "smooth_flip")
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """32-bit seed for run ``index``; depends only on (base_seed, index)."""
    return splitmix64(splitmix64(base_seed) ^ index) & 0xFFFFFFFF


# --------------------------------------------------------------------------
# configuration


def _family(item) -> MechanismFamily:
    if isinstance(item, MechanismFamily):
        return item
    if isinstance(item, str):
        return MechanismFamily(item)
    return MechanismFamily(item["tag"], item.get("strength"))


@dataclass
class GridConfig:
    families: list = field(default_factory=lambda: ["global_monotone", "threshold_flip", "smooth_flip"])
    noises: list = field(default_factory=lambda: ["gaussian", "mixture"])
    d: list = field(default_factory=lambda: [3])
    n_train: list = field(default_factory=lambda: [2000, 10000])
    seeds: int = 3
    base_seed: int = 7
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.families = [_family(f) for f in self.families]
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        TrainConfig(**self.train)  # validate early

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def configs(self) -> list[SweepConfig]:
        out = []
        for fam in self.families:
            for noise in self.noises:
                for d in self.d:
                    for n in self.n_train:
                        for _ in range(self.seeds):
                            out.append((fam, noise, int(d), int(n)))
        return [SweepConfig(f, nz, d, n, derive_seed(self.base_seed, k)) for k, (f, nz, d, n) in enumerate(out)]

    def to_dict(self) -> dict:
        return {
            "families": [{"tag": f.tag, "strength": f.strength} for f in self.families],
            "noises": list(self.noises),
            "d": list(self.d),
            "n_train": list(self.n_train),
            "seeds": self.seeds,
            "base_seed": self.base_seed,
            "train": dict(self.train),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GridConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "GridConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# records


@dataclass
class SweepRecord:
    config_index: int
    family: str
    strength: Optional[float]
    noise: str
    d: int
    n_train: int
    seed: int
    model: str
    cf_mse: float
    latent_error: float
    direction_accuracy: float
    nms_synth: float
    status: str = "ok"
    wall_time: float = 0.0  # not written to records.csv


SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRecord) if f.name != "wall_time")


@dataclass
class BridgeRecord:
    run_index: int
    strength: float
    noise: str
    seed: int
    nms_synth: float
    tmscm_cf_mse: float
    ours_cf_mse: float
    gain: float
    ours_candidate: str
    status: str = "ok"


BRIDGE_COLUMNS = tuple(f.name for f in fields(BridgeRecord))


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def records_to_csv(records: Sequence, columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([_cell(getattr(r, c)) for c in columns])
    return buf.getvalue()


def read_records(path: str | Path, cls=SweepRecord) -> list:
    types = {f.name: f.type for f in fields(cls)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = str(types[k])
                if v == "":
                    kw[k] = None
                elif "float" in t:
                    kw[k] = float(v)
                elif t in ("int", "<class 'int'>"):
                    kw[k] = int(v)
                else:
                    kw[k] = v
            out.append(cls(**kw))
    return out


# --------------------------------------------------------------------------
# fitting and evaluation


def fit_models(bundle, cfg: TrainConfig, models: Sequence[str] = MODELS) -> dict:
    fitted = {}
    for name in models:
        if name == "anm":
            fitted[name] = fit_anm(bundle)
        elif name == "tmscm":
            fitted[name] = fit_tmscm(bundle, cfg)[0]
        elif name == "contextual_flow":
            fitted[name] = fit_contextual_flow(bundle, cfg)[0]
        elif name == "ours":
            fitted[name] = fit_inverter(bundle.v_train, cfg)
        else:
            raise ValueError(f"unknown model {name!r}")
    return fitted


def evaluate(model, bundle) -> dict:
    return {
        "cf_mse": cf_mse(model, bundle),
        "latent_error": latent_recovery_error(model, bundle),
        "direction_accuracy": direction_accuracy_of(model, bundle),
    }


def run_config(index: int, config: SweepConfig, cfg: TrainConfig,
               models: Sequence[str] = MODELS) -> list[SweepRecord]:
    """All models on one configuration; a failure yields ``status`` rows instead of raising."""
    base = dict(config_index=index, family=config.family.tag, strength=config.family.strength,
                noise=config.noise, d=config.d, n_train=config.n_train, seed=config.seed)
    try:
        scm, truth = make_scm(config)
        bundle = sample_dataset(scm, truth, config)
        nms = float(bundle.metadata["nms_synth"])
    except Exception as exc:  # noqa: BLE001 - isolate a failed configuration
        return [SweepRecord(**base, model=m, cf_mse=math.nan, latent_error=math.nan,
                            direction_accuracy=math.nan, nms_synth=math.nan,
                            status=f"failed: {type(exc).__name__}") for m in models]
    out = []
    for name in models:
        start = time.perf_counter()
        try:
            model = fit_models(bundle, cfg, (name,))[name]
            if name == "ours":
                model = model.model
            metrics = evaluate(model, bundle)
            if not all(math.isfinite(v) for v in metrics.values()):
                raise TrainingDivergence("non-finite metric")
            status = "ok"
        except Exception as exc:  # noqa: BLE001
            metrics = dict(cf_mse=math.nan, latent_error=math.nan, direction_accuracy=math.nan)
            status = f"failed: {type(exc).__name__}"
        out.append(SweepRecord(**base, model=name, nms_synth=nms, status=status,
                               wall_time=time.perf_counter() - start, **metrics))
    return out


def _parallel_map(fn: Callable, jobs: Sequence[tuple], n_workers: int) -> list:
    """Apply ``fn`` to every argument tuple; results come back in input order."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(*a) for a in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(fn, *a) for a in jobs]
        return [f.result() for f in futures]


# --------------------------------------------------------------------------
# manifest and file emission


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "machine": platform.machine(),
    }


def write_manifest(out: Path, command: str, config: dict, seeds: list, failures: list) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    doc = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "output_dir": out.name,
        "config": config,
        "seeds": seeds,
        "failures": failures,
        "environment": environment_fingerprint(),
        "files": {p.relative_to(out).as_posix(): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def verify_manifest(out: str | Path) -> list[str]:
    """Paths whose content hash no longer matches the manifest."""
    out = Path(out)
    doc = json.loads((out / "manifest.json").read_text())
    return [p for p, h in doc["files"].items() if not (out / p).is_file() or _sha256(out / p) != h]


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def _f(x: float, digits: int = 4) -> str:
    return "n/a" if x is None or not math.isfinite(x) else f"{x:.{digits}f}"


def _p(x: float) -> str:
    return "n/a" if x is None or not math.isfinite(x) else f"{x:.3g}"


# --------------------------------------------------------------------------
# sweep


@dataclass
class SweepResult:
    records: list
    summary: dict
    wall_time: float


def aggregate(records: Sequence[SweepRecord]) -> dict:
    """Per family and model: mean metrics over successful runs."""
    out: dict = {}
    for r in records:
        if r.status != "ok":
            continue
        key = (r.family if r.strength is None else f"bridge@{r.strength:.2f}")
        slot = out.setdefault(key, {}).setdefault(r.model, {"cf_mse": [], "latent_error": [], "direction_accuracy": []})
        for m in slot:
            slot[m].append(getattr(r, m))
    return {fam: {mdl: {m: float(np.mean(v)) for m, v in d.items()} for mdl, d in per.items()}
            for fam, per in out.items()}


def paired_diffs(records: Sequence[SweepRecord], family: str, other: str, metric: str = "cf_mse") -> np.ndarray:
    """ours - other over configurations where both succeeded, in config order."""
    by = {}
    for r in records:
        if r.family == family and r.status == "ok":
            by.setdefault(r.config_index, {})[r.model] = getattr(r, metric)
    return np.array([v["ours"] - v[other] for _, v in sorted(by.items()) if "ours" in v and other in v])


def significance(records: Sequence[SweepRecord], family: str, other: str, seed: int = 0) -> dict:
    d = paired_diffs(records, family, other)
    res = {"family": family, "versus": other, "n": int(d.size), "mean_diff": float(d.mean()) if d.size else math.nan}
    try:
        w = stats.wilcoxon_signed_rank(d)
        res.update(wilcoxon_stat=w.statistic, wilcoxon_p=w.p_two_sided, wilcoxon_method=w.method)
    except stats.InsufficientDataError:
        res.update(wilcoxon_stat=math.nan, wilcoxon_p=math.nan, wilcoxon_method="insufficient")
    if d.size >= 2:
        lo, hi = stats.bootstrap_mean_ci(d, seed=seed)
    else:
        lo = hi = math.nan
    res.update(ci_lo=lo, ci_hi=hi)
    return res


def sweep_summary(records: Sequence[SweepRecord]) -> dict:
    agg = aggregate(records)
    tests = [significance(records, fam, other) for fam in FLIP_FAMILIES if fam in agg
             for other in ("tmscm", "contextual_flow")]
    return {"aggregate": agg, "significance": tests}


def render_sweep_report(grid: GridConfig, records: Sequence[SweepRecord], summary: dict) -> str:
    agg = summary["aggregate"]
    lines = ["# Synthetic sweep", ""]
    lines.append(f"{len({r.config_index for r in records})} configurations; "
                 f"noises {', '.join(grid.noises)}; d in {grid.d}; n_train in {grid.n_train}; "
                 f"{grid.seeds} seeds per cell (base seed {grid.base_seed}).")
    lines += ["", "## Counterfactual MSE (mean over runs)", ""]
    header = ["Family"] + [MODEL_LABELS[m] for m in MODELS] + ["Ours dir. acc."]
    rows = []
    for fam, per in agg.items():
        rows.append([fam] + [_f(per.get(m, {}).get("cf_mse", math.nan)) for m in MODELS]
                    + [_f(per.get("ours", {}).get("direction_accuracy", math.nan))])
    lines.append(_table(header, rows))
    lines += ["", "## Latent recovery error (mean over runs)", ""]
    rows = [[fam] + [_f(per.get(m, {}).get("latent_error", math.nan)) for m in MODELS] for fam, per in agg.items()]
    lines.append(_table(["Family"] + [MODEL_LABELS[m] for m in MODELS], rows))
    if summary["significance"]:
        lines += ["", "## Paired comparisons of counterfactual MSE (ours minus baseline)", "",
                  "Wilcoxon signed-rank (zeros dropped, exact up to n=20) and 95% percentile "
                  "bootstrap interval of the mean difference.", ""]
        rows = [[t["family"], MODEL_LABELS[t["versus"]], t["n"], _f(t["mean_diff"]),
                 f"[{_f(t['ci_lo'])}, {_f(t['ci_hi'])}]", _p(t["wilcoxon_p"]), t["wilcoxon_method"]]
                for t in summary["significance"]]
        lines.append(_table(["Family", "Versus", "n", "Mean diff", "95% CI", "Wilcoxon p", "Method"], rows))
    failed = sorted({(r.config_index, r.model, r.status) for r in records if r.status != "ok"})
    lines += ["", "## Failures", ""]
    lines += [f"- config {i} / {m}: {s}" for i, m, s in failed] or ["none"]
    return "\n".join(lines) + "\n"


def sweep_figure(summary: dict) -> Chart:
    fams = list(summary["aggregate"])
    chart = Chart("Counterfactual MSE by family", "mechanism family", "mean CF-MSE",
                  xticklabels={k: f for k, f in enumerate(fams)})
    for m in MODELS:
        ys = [summary["aggregate"][f].get(m, {}).get("cf_mse", math.nan) for f in fams]
        chart.add(MODEL_LABELS[m], range(len(fams)), ys, mode="both")
    return chart


def run_sweep(grid: GridConfig, out: str | Path, jobs: int = 1,
              models: Sequence[str] = MODELS, log: Callable[[str], None] = lambda s: None) -> SweepResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    cfg = grid.train_config()
    configs = grid.configs()
    batches = _parallel_map(run_config, [(k, c, cfg, tuple(models)) for k, c in enumerate(configs)], jobs)
    records = [r for batch in batches for r in batch]
    for r in records:
        log(f"config {r.config_index} {r.family}/{r.noise}/n{r.n_train} {r.model}: "
            f"cf_mse={_f(r.cf_mse)} ({r.wall_time:.1f}s) {r.status}")
    summary = sweep_summary(records)
    (out / "records.csv").write_text(records_to_csv(records, SWEEP_COLUMNS))
    (out / "report.md").write_text(render_sweep_report(grid, records, summary))
    sweep_figure(summary).save(out / "figures" / "cf_mse_by_family.svg")
    failures = sorted({f"config {r.config_index} {r.model}: {r.status}" for r in records if r.status != "ok"})
    write_manifest(out, "sweep", grid.to_dict(), [c.seed for c in configs], failures)
    return SweepResult(records, summary, time.perf_counter() - start)


# --------------------------------------------------------------------------
# bridge


@dataclass
class BridgeResult:
    records: list
    slope: float
    intercept: float
    spearman_rho: float
    spearman_p: float
    wall_time: float


def run_bridge_one(index: int, strength: float, noise: str, seed: int, d: int, n_train: int,
                   cfg: TrainConfig) -> BridgeRecord:
    try:
        config = SweepConfig(MechanismFamily("bridge", float(strength)), noise, d, n_train, seed)
        scm, truth = make_scm(config)
        bundle = sample_dataset(scm, truth, config)
        tm = cf_mse(fit_tmscm(bundle, cfg)[0], bundle)
        fit = fit_inverter(bundle.v_train, cfg)
        ours = cf_mse(fit.model, bundle)
        return BridgeRecord(index, float(strength), noise, seed, float(bundle.metadata["nms_synth"]),
                            tm, ours, tm - ours, fit.chosen)
    except Exception as exc:  # noqa: BLE001
        return BridgeRecord(index, float(strength), noise, seed, math.nan, math.nan, math.nan, math.nan,
                            "", f"failed: {type(exc).__name__}")


def bridge_runs(strengths: Sequence[float], noises: Sequence[str], seeds: int, base_seed: int) -> list[tuple]:
    """(strength, noise, seed); replicate k uses the same seed at every strength and noise."""
    rep_seeds = [derive_seed(base_seed, k) for k in range(seeds)]
    return [(float(s), nz, rep_seeds[k]) for s in strengths for nz in noises for k in range(seeds)]


def render_bridge_report(records: Sequence[BridgeRecord], res: BridgeResult, meta: dict) -> str:
    lines = ["# Non-monotonicity bridge", "",
             f"d={meta['d']}, n_train={meta['n_train']}, noises {', '.join(meta['noises'])}, "
             f"{meta['seeds']} replicate seeds (base seed {meta['base_seed']}).", "",
             "Gain is TM-SCM CF-MSE minus ours.", ""]
    rows = []
    for s in sorted({r.strength for r in records}):
        sel = [r for r in records if r.strength == s and r.status == "ok"]
        if not sel:
            continue
        rows.append([f"{s:.2f}", _f(np.mean([r.nms_synth for r in sel]), 3),
                     _f(np.mean([r.tmscm_cf_mse for r in sel])), _f(np.mean([r.ours_cf_mse for r in sel])),
                     _f(np.mean([r.gain for r in sel])), len(sel)])
    lines.append(_table(["Strength", "Realized NMS", "TM-SCM CF-MSE", "Ours CF-MSE", "Gain", "Runs"], rows))
    lines += ["", "## Per noise family", ""]
    rows = []
    for nz in meta["noises"]:
        for s in sorted({r.strength for r in records}):
            sel = [r for r in records if r.strength == s and r.noise == nz and r.status == "ok"]
            if sel:
                rows.append([nz, f"{s:.2f}", _f(np.mean([r.nms_synth for r in sel]), 3),
                             _f(np.mean([r.gain for r in sel]))])
    lines.append(_table(["Noise", "Strength", "Realized NMS", "Gain"], rows))
    lines += ["", "## Gain versus realized NMS across runs", "",
              f"- least-squares slope {_f(res.slope, 3)} (intercept {_f(res.intercept, 3)})",
              f"- Spearman rho {_f(res.spearman_rho, 3)}, p {_p(res.spearman_p)}"]
    failed = [r for r in records if r.status != "ok"]
    lines += ["", "## Failures", ""] + ([f"- run {r.run_index}: {r.status}" for r in failed] or ["none"])
    return "\n".join(lines) + "\n"


def run_bridge(strengths: Sequence[float], noises: Sequence[str], seeds: int, out: str | Path,
               base_seed: int = 7, d: int = 3, n_train: int = 10000, train: Optional[dict] = None,
               jobs: int = 1, log: Callable[[str], None] = lambda s: None) -> BridgeResult:
    if len(strengths) < 3:
        raise ValueError("need at least 3 strengths")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    cfg = TrainConfig(**(train or {}))
    runs = bridge_runs(strengths, noises, seeds, base_seed)
    records = _parallel_map(run_bridge_one, [(k, s, nz, sd, d, n_train, cfg) for k, (s, nz, sd) in enumerate(runs)], jobs)
    for r in records:
        log(f"bridge {r.strength:.2f}/{r.noise}/seed {r.seed}: nms={_f(r.nms_synth, 3)} gain={_f(r.gain)} {r.status}")
    ok = [r for r in records if r.status == "ok"]
    x = np.array([r.nms_synth for r in ok])
    y = np.array([r.gain for r in ok])
    slope, intercept = (np.polyfit(x, y, 1) if len(ok) >= 2 and np.ptp(x) > 0 else (math.nan, math.nan))
    try:
        rho, p = stats.spearman(x, y)
    except (stats.InsufficientDataError, ValueError):
        rho, p = math.nan, math.nan
    res = BridgeResult(records, float(slope), float(intercept), rho, p, 0.0)
    meta = {"strengths": [float(s) for s in strengths], "noises": list(noises), "seeds": seeds,
            "base_seed": base_seed, "d": d, "n_train": n_train, "train": asdict(cfg)}
    (out / "records.csv").write_text(records_to_csv(records, BRIDGE_COLUMNS))
    (out / "report.md").write_text(render_bridge_report(records, res, meta))
    levels = sorted({r.strength for r in ok})
    Chart("Calibration of the bridge", "target strength", "realized NMS") \
        .add("realized", levels, [np.mean([r.nms_synth for r in ok if r.strength == s]) for s in levels], "both") \
        .add("target", levels, levels) \
        .save(out / "figures" / "calibration.svg")
    chart = Chart("CF-MSE gain over TM-SCM", "realized NMS", "gain (TM-SCM minus ours)")
    for nz in noises:
        sel = [r for r in ok if r.noise == nz]
        if sel:
            chart.add(nz, [r.nms_synth for r in sel], [r.gain for r in sel], "points")
    if math.isfinite(slope) and len(x):
        grid = [float(x.min()), float(x.max())]
        chart.add("least-squares fit", grid, [intercept + slope * g for g in grid])
    chart.save(out / "figures" / "gain_vs_nms.svg")
    failures = [f"run {r.run_index}: {r.status}" for r in records if r.status != "ok"]
    write_manifest(out, "bridge", meta, sorted({r.seed for r in records}), failures)
    res.wall_time = time.perf_counter() - start
    return res


# --------------------------------------------------------------------------
# counterexample


@dataclass
class CounterexampleRow:
    table: str
    key: str
    model: str
    value: float


COUNTEREXAMPLE_COLUMNS = ("table", "key", "model", "value")


def _ei_control():
    from .zoo import SweepConfig as _C

    scm, _ = make_scm(_C(MechanismFamily("threshold_flip"), "gaussian", 2, 2000, 11))
    psis = [Bijection(lambda u: 2 * u, lambda u: u / 2, lambda u: 2 * np.ones_like(u), "2u"),
            Bijection(lambda u: u + u**3, lambda y: _cubic_inverse(y), lambda u: 1 + 3 * u * u, "u+u^3")]
    return scm, exogenous_isomorph(scm, psis)


def _cubic_inverse(y):
    y = np.asarray(y, dtype=float)
    # real root of u^3 + u - y = 0 (Cardano; the discriminant is always positive)
    s = np.sqrt(y * y / 4.0 + 1.0 / 27.0)
    return np.cbrt(y / 2.0 + s) + np.cbrt(y / 2.0 - s)


def counterexample_rows(n_ks: int = 10_000, seed: int = 0) -> list[CounterexampleRow]:
    m, mp = make_counterexample_pair()
    rows = []
    factuals = [(1.0, 0.7), (-1.0, 0.7), (0.5, -1.2), (2.0, 0.3)]
    for fx, fy in factuals:
        for xnew in (-1.0, 1.0):
            q = CounterfactualQuery(np.array([fx, fy]), Intervention((0,), (xnew,)))
            for name, model in (("M", m), ("M'", mp)):
                cf = model.counterfactual(q)
                rows.append(CounterexampleRow("counterfactual_y", f"({fx}, {fy}) do(X={xnew})", name, float(cf[1])))
    rep = observational_equivalence_check(m, mp, n_ks, seed)
    for j, s in enumerate(rep.ks_marginals):
        rows.append(CounterexampleRow("ks", f"V{j + 1}", "M vs M'", s))
    rows.append(CounterexampleRow("ks", "critical value (alpha 0.01)", "M vs M'", rep.critical))
    rows.append(CounterexampleRow("ks", "pass", "M vs M'", float(rep.passed)))
    rows.append(CounterexampleRow("transport_variation", "mechanism 2, contexts {-1, 1}, grid {-1, 0, 1}",
                                  "M vs M'", transport_variation(m, mp, 1, [[-1.0], [1.0]], [-1.0, 0.0, 1.0])))

    a, b = _ei_control()
    rng = np.random.default_rng(seed)
    ctx = [[float(c)] for c in rng.normal(size=5)]
    grid = np.linspace(-2, 2, 9)
    rows.append(CounterexampleRow("transport_variation", "EI control, mechanism 1", "A vs EI(A)",
                                  transport_variation(a, b, 0, [[], []], grid)))
    rows.append(CounterexampleRow("transport_variation", "EI control, mechanism 2", "A vs EI(A)",
                                  transport_variation(a, b, 1, ctx, grid)))
    v, _ = a.sample(rng, 200)
    worst = 0.0
    for k in range(v.shape[0]):
        q = CounterfactualQuery(v[k], Intervention((0,), (float(rng.normal()),)))
        worst = max(worst, float(np.max(np.abs(a.counterfactual(q) - b.counterfactual(q)))))
    rows.append(CounterexampleRow("cf_disagreement", "EI control, 200 queries (max abs)", "A vs EI(A)", worst))

    demo = make_hidden_phase_scm(2.0, seed=seed)
    u_s = demo.scm.posterior_grid(1.0, 0.7, 101)
    true_cf = demo.scm.counterfactual(1.0, 0.7, -3.0, u_s)
    sur = demo.surrogate.counterfactual(1.0, 0.7, -3.0)
    rows.append(CounterexampleRow("hidden_phase", "true CF share with Y > 0 after do(X=-3)", "stick-slip",
                                  float(np.mean(true_cf > 0))))
    rows.append(CounterexampleRow("hidden_phase", "surrogate CF after do(X=-3)", "segmented monotone", sur))
    rows.append(CounterexampleRow("hidden_phase", "share of phase draws where CFs differ", "stick-slip vs surrogate",
                                  float(np.mean(np.abs(true_cf - sur) > 1e-9))))
    sample = demo.scm.sample(np.random.default_rng(seed + 1), 10_000)
    fake = demo.surrogate.sample(np.random.default_rng(seed + 2), 10_000)
    from scipy import stats as sps

    rows.append(CounterexampleRow("hidden_phase", "KS statistic on Y (true vs surrogate)", "stick-slip vs surrogate",
                                  float(sps.ks_2samp(sample["y"], fake["y"]).statistic)))
    return rows


def render_counterexample_report(rows: Sequence[CounterexampleRow]) -> str:
    lines = ["# Observationally equivalent models with different counterfactuals", "",
             "M: X = U_X, Y = sgn(X) U_Y.  M': X = U_X, Y = U_Y.  Both with standard gaussian noise.", ""]
    cf = [r for r in rows if r.table == "counterfactual_y"]
    keys = list(dict.fromkeys(r.key for r in cf))
    table = [[k, _f(next(r.value for r in cf if r.key == k and r.model == "M")),
              _f(next(r.value for r in cf if r.key == k and r.model == "M'"))] for k in keys]
    lines += ["## Counterfactual Y", "", _table(["Factual and intervention", "M", "M'"], table)]
    for name, title in (("ks", "Observational equivalence (two-sample KS, n = 10000 per model)"),
                        ("transport_variation", "Inverse transport variation across contexts"),
                        ("cf_disagreement", "Exogenous-isomorphism control"),
                        ("hidden_phase", "Hidden phase (stick-slip) demo")):
        sel = [r for r in rows if r.table == name]
        lines += ["", f"## {title}", "", _table(["Quantity", "Models", "Value"],
                                                [[r.key, r.model, f"{r.value:.6g}"] for r in sel])]
    return "\n".join(lines) + "\n"


def run_counterexample(out: str | Path, seed: int = 0) -> list[CounterexampleRow]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = counterexample_rows(seed=seed)
    (out / "records.csv").write_text(records_to_csv(rows, COUNTEREXAMPLE_COLUMNS))
    (out / "report.md").write_text(render_counterexample_report(rows))
    u = np.linspace(-2, 2, 41)
    m, mp = make_counterexample_pair()
    from .scm import inverse_transport

    Chart("Inverse transport from M to M' on mechanism 2", "u", "transported u") \
        .add("context x = +1", u, inverse_transport(m, mp, 1, [1.0], u)) \
        .add("context x = -1", u, inverse_transport(m, mp, 1, [-1.0], u)) \
        .save(out / "figures" / "transport.svg")
    write_manifest(out, "counterexample", {"n_ks": 10_000, "seed": seed}, [seed], [])
    return rows


# --------------------------------------------------------------------------
# sampler demo


@dataclass
class SamplerRow:
    factual_id: int
    window_start: int
    window_length: int
    transition: str
    success_change: bool
    endpoint_delta: float


SAMPLER_COLUMNS = tuple(f.name for f in fields(SamplerRow))


def run_sampler_demo(n_rollouts: int, budget: int, seed: int, out: str | Path, per_rollout: int = 8):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sel, pool, rollouts = balanced_queries(n_rollouts, per_rollout, budget, seed)
    st = query_stats(sel.queries)
    save_queries(sel.queries, out / "queries.json")
    save_stats(st, out / "sampler_stats.json")
    rows = [SamplerRow(q.factual_id, q.window[0], q.window[1], q.transition, q.success_change, q.endpoint_delta)
            for q in sel.queries]
    (out / "records.csv").write_text(records_to_csv(rows, SAMPLER_COLUMNS))
    lines = ["# Balanced counterfactual query selection on the toy latch", "",
             f"{n_rollouts} rollouts x {per_rollout} candidates, budget {budget}, seed {seed}.",
             f"Factual success rate over all rollouts: {np.mean([r.success for r in rollouts]):.4f}.", "",
             _table(["Queries", "Fact. succ.", "CF succ.", "Change rate", "Transitions (SS/SF/FS/FF)", "Window mean"],
                    [[st.queries, f"{st.factual_success:.4f}", f"{st.cf_success:.4f}", f"{st.change_rate:.4f}",
                      st.transition_string(), f"{st.window_mean:.2f}"]]), "",
             f"Picked {sel.from_change} from the change subset, {sel.from_no_change} from the no-change "
             f"subset and {sel.backfilled} by back-fill" + (" (budget not reached)." if sel.short else ".")]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    labels = ("SS", "SF", "FS", "FF")
    pool_counts = [sum(c.transition == t for c in pool) for t in labels]
    Chart("Transition counts", "transition", "count", xticklabels=dict(enumerate(labels))) \
        .add("selected", range(4), [st.transitions[t] for t in labels], "both") \
        .add("candidate pool / 10", range(4), [c / 10 for c in pool_counts], "both") \
        .save(out / "figures" / "transitions.svg")
    write_manifest(out, "sampler-demo", {"rollouts": n_rollouts, "per_rollout": per_rollout, "budget": budget,
                                         "seed": seed}, [seed], ["budget not reached"] if sel.short else [])
    return sel, st
