"""Calibration, coverage, storage and timing metrics, and the run report."""

from __future__ import annotations

import csv
import glob
import io
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .buffer import ReplayBuffer
from .dyn_model import TrainConfig, train_map
from .infogain import UtilitySpec, utility_batch
from .numkit import RngStream, ShapeError
from .posterior import BackendConfig, Posterior, fit_backend

AUSE_BINS = 20


def fmt(x) -> str:
    """Six significant digits; empty string for missing values."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.6g}"


# ---------------------------------------------------------------------------
# AUSE


@dataclass
class AuseResult:
    value: float
    fractions: np.ndarray
    curve: np.ndarray
    oracle: np.ndarray


def sparsification_curve(errors: np.ndarray, order: np.ndarray, T: int) -> np.ndarray:
    """RMSE of the points kept after removing ``floor(k n / T)`` points in
    ``order`` (k = 0..T-1), normalized by the full-set RMSE."""
    n = len(errors)
    sq = errors[order] ** 2
    full = np.sqrt(np.mean(sq))
    out = np.empty(T)
    for k in range(T):
        kept = sq[(k * n) // T:]
        out[k] = np.sqrt(np.mean(kept)) / full if full > 0 else 0.0
    return out


def ause(errors, uncertainties, T: int = AUSE_BINS) -> AuseResult:
    """Area between the uncertainty-ordered and error-ordered sparsification curves."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    if e.shape != u.shape:
        raise ShapeError(f"errors {e.shape} and uncertainties {u.shape} differ in length")
    if not 2 <= T <= len(e):
        raise ValueError(f"T must satisfy 2 <= T <= n = {len(e)}, got {T}")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(u))):
        raise ValueError("errors and uncertainties must be finite")
    e = np.abs(e)
    if e.max() > 0:
        e = e / e.max()     # the ratio is scale free; avoids underflow in e²
    curve = sparsification_curve(e, np.argsort(-u, kind="stable"), T)
    oracle = sparsification_curve(e, np.argsort(-e, kind="stable"), T)
    return AuseResult(float(np.mean(curve - oracle)), np.arange(T) / T, curve, oracle)


def prediction_errors(post: Posterior, S, A, SP) -> np.ndarray:
    """Euclidean error of the predictive mean."""
    mean = post.predict_mean(S, A)[0]
    return np.linalg.norm(mean - SP, axis=1)


def calibration_run(buffer: ReplayBuffer, split: float | int, backend: BackendConfig,
                    utility: UtilitySpec, train: TrainConfig | None = None,
                    T: int = AUSE_BINS) -> dict:
    """Fit on the chronological prefix, score the suffix.

    ``split`` is either a fraction of the buffer or a prefix length.
    """
    train = train or TrainConfig()
    n = len(buffer)
    n_fit = int(round(split * n)) if isinstance(split, float) else int(split)
    if not 1 <= n_fit < n or n - n_fit < T:
        raise ValueError(f"split {split!r} leaves {n_fit} fit / {n - n_fit} test points "
                         f"(need >= 1 and >= T = {T})")
    post = fit_backend(buffer.prefix(n_fit), backend, train)
    S, A, SP = buffer.states[n_fit:], buffer.actions[n_fit:], buffer.next_states[n_fit:]
    err = prediction_errors(post, S, A, SP)
    unc = utility_batch(post, S, A, utility, rng=RngStream(train.seed).child("calibration"))
    res = ause(err, unc, T)
    return {"backend": backend.kind, "utility": utility.kind, "n_fit": n_fit,
            "n_test": n - n_fit, "ause": res.value, "rmse": float(np.sqrt(np.mean(err ** 2))),
            "curve": res.curve.tolist(), "oracle": res.oracle.tolist(),
            "errors": err.tolist(), "uncertainties": unc.tolist()}


# ---------------------------------------------------------------------------
# coverage and storage


def coverage_entropy(states, bins: int = 20, bounds=None) -> float:
    """Shannon entropy (nats) of the 2-D histogram of the first two state dims."""
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("coverage needs at least one state")
    xy = X[:, :2] if X.shape[1] >= 2 else np.column_stack([X[:, 0], np.zeros(len(X))])
    if bounds is None:
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        bounds = list(zip(lo, hi))
    H, _, _ = np.histogram2d(np.clip(xy[:, 0], *bounds[0]), np.clip(xy[:, 1], *bounds[1]),
                             bins=bins, range=bounds)
    p = H.ravel() / H.sum()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)) + 0.0)


def storage_cost(n_ens: int, n_weights: int, n_subnet: int) -> int:
    """Stored parameter count: ``n_ens * n_weights + n_subnet**2``."""
    vals = [n_ens, n_weights, n_subnet]
    if any(float(v) < 0 or float(v) != int(v) for v in vals):
        raise ValueError("storage_cost arguments must be non-negative integers")
    n_ens, n_weights, n_subnet = (int(v) for v in vals)
    return n_ens * n_weights + n_subnet ** 2


# ---------------------------------------------------------------------------
# timing


def timed(fn, *args, clock=time.perf_counter, **kwargs):
    t0 = clock()
    out = fn(*args, **kwargs)
    return out, clock() - t0


def inference_time(post: Posterior, S, A, utility: UtilitySpec, rng: RngStream,
                   repeats: int = 3) -> float:
    """Best-of-``repeats`` latency of one batched utility evaluation."""
    best = math.inf
    for r in range(repeats):
        _, dt = timed(utility_batch, post, S, A, utility, None, rng.child(r))
        best = min(best, dt)
    return best


def bench(buffer: ReplayBuffer, backend: BackendConfig, train: TrainConfig,
          batch: int = 256, repeats: int = 1) -> dict:
    """Fit and inference times of the three backends plus a single MAP model.

    Fit times are process CPU seconds, minimized over ``repeats`` identical
    fits; wall clock on a shared machine is dominated by scheduler noise.
    """
    rows = []
    S, A = buffer.states[-batch:], buffer.actions[-batch:]
    rng = RngStream(train.seed).child("bench")
    # same effective settings as fit_backend uses for each member
    single_cfg = replace(train, gamma2=backend.gamma2,
                         batch_size=max(1, min(train.batch_size, len(buffer))))
    cpu = time.process_time
    t_single = min(timed(train_map, buffer, single_cfg, clock=cpu)[1] for _ in range(repeats))
    rows.append({"backend": "single", "fit_s": t_single, "infer_s": None})
    for kind, util in (("ensemble", "jensen_renyi2"), ("mc_dropout", "jensen_renyi2"),
                       ("laplace", "entropy_laplace")):
        b = BackendConfig(kind=kind, n_samples=backend.n_samples, p=backend.p or 0.25,
                          n_sub=backend.n_sub, gamma2=backend.gamma2)
        post, t_fit = timed(fit_backend, buffer, b, train, clock=cpu)
        for _ in range(repeats - 1):
            t_fit = min(t_fit, timed(fit_backend, buffer, b, train, clock=cpu)[1])
        t_inf = inference_time(post, S, A, UtilitySpec(util), rng.child(kind))
        rows.append({"backend": kind, "fit_s": t_fit, "infer_s": t_inf})
    for r in rows:
        r["fit_ratio_vs_single"] = r["fit_s"] / t_single
    return {"N": backend.n_samples, "batch": len(S), "rows": rows,
            "note": "fit_s is process CPU time, infer_s wall clock; compare backends relatively only"}


# ---------------------------------------------------------------------------
# report


class MissingArtifacts(FileNotFoundError):
    def __init__(self, names: list[str]):
        super().__init__("missing run artifacts: " + ", ".join(names))
        self.names = names


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    _write_if_changed(path, buf.getvalue())


def _write_if_changed(path: Path, text: str) -> None:
    if path.exists() and path.read_text() == text:
        return
    path.write_text(text)


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_svg(title: str, xlabel: str, ylabel: str, series: dict[str, list[tuple]],
             width: int = 480, height: int = 320) -> str:
    """Minimal deterministic line plot."""
    ml, mr, mt, mb = 60, 110, 30, 45
    pts = [(x, y) for s in series.values() for x, y in s if y is not None]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for v, lab in ((x0, fmt(x0)), (x1, fmt(x1))):
        out.append(f'<text x="{px(v):.2f}" y="{mt + ph + 15}" text-anchor="middle" '
                   f'font-size="10">{lab}</text>')
    for v, lab in ((y0, fmt(y0)), (y1, fmt(y1))):
        out.append(f'<text x="{ml - 4}" y="{py(v):.2f}" text-anchor="end" '
                   f'font-size="10">{lab}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        seg = [(px(x), py(y)) for x, y in s if y is not None]
        if seg:
            d = " ".join(f"{a:.2f},{b:.2f}" for a, b in seg)
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{d}"/>')
        out.append(f'<text x="{ml + pw + 8}" y="{mt + 14 * (i + 1)}" font-size="11" '
                   f'fill="{c}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _load_json(path: Path):
    return json.loads(path.read_text())


def report(run_dir: str | Path) -> list[Path]:
    """Render CSV tables and SVG plots into ``run_dir/reports``.

    Needs ``config.json`` and ``buffer.csv``; evaluation, calibration and
    timing results are read from ``reports/raw`` when present. Files whose
    content would not change are not rewritten.
    """
    from .config import ExperimentConfig, from_dict

    run = Path(run_dir)
    missing = [n for n in ("config.json", "buffer.csv") if not (run / n).exists()]
    if missing:
        raise MissingArtifacts(missing)
    cfg: ExperimentConfig = from_dict(_load_json(run / "config.json"))
    buffer = ReplayBuffer.from_csv(run / "buffer.csv")
    out = run / "reports"
    raw = out / "raw"
    out.mkdir(exist_ok=True)
    written = []

    # rewards vs exploration steps
    evals = sorted((_load_json(Path(p)) for p in glob.glob(str(raw / "eval_*.json"))),
                   key=lambda e: e["snapshot"])
    tasks = sorted({t for e in evals for t in e["rewards"]}) or list(cfg.tasks)

    def mean_or_none(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    rows = [[e["snapshot"]] + [mean_or_none(e["rewards"].get(t, [])) for t in tasks]
            for e in evals]
    _write_csv(out / "rewards.csv", ["step"] + tasks, rows)
    written.append(out / "rewards.csv")
    for j, t in enumerate(tasks):
        trows = []
        for e in evals:
            vals = [v for v in e["rewards"].get(t, []) if v is not None]
            trows.append([e["snapshot"], mean_or_none(vals), min(vals) if vals else None,
                          max(vals) if vals else None, len(vals),
                          len(e["rewards"].get(t, [])) - len(vals)])
        p = out / f"rewards_{t}.csv"
        _write_csv(p, ["step", "mean", "min", "max", "n", "n_missing"], trows)
        written.append(p)
    p = out / "rewards.svg"
    _write_if_changed(p, line_svg("Task reward vs exploration steps", "exploration steps",
                                  "reward", {t: [(r[0], r[j + 1]) for r in rows]
                                             for j, t in enumerate(tasks)}))
    written.append(p)

    # coverage
    try:
        bounds = cfg.make_env().bounds
    except AttributeError:
        bounds = None
    step = cfg.counters.n_eval
    crow = [[n, coverage_entropy(buffer.next_states[:n], bounds=bounds)]
            for n in list(range(step, len(buffer) + 1, step)) or [len(buffer)] if n > 0]
    _write_csv(out / "coverage.csv", ["step", "coverage_entropy"], crow)
    p = out / "coverage.svg"
    _write_if_changed(p, line_svg("State coverage", "exploration steps", "entropy (nats)",
                                  {"coverage": [(r[0], r[1]) for r in crow]}))
    written += [out / "coverage.csv", p]

    # calibration
    cal = sorted((_load_json(Path(p)) for p in glob.glob(str(raw / "calibration*.json"))),
                 key=lambda c: (c["backend"], c["utility"]))
    _write_csv(out / "calibration.csv", ["backend", "utility", "n_fit", "n_test", "ause", "rmse"],
               [[c["backend"], c["utility"], c["n_fit"], c["n_test"], c["ause"], c["rmse"]]
                for c in cal])
    written.append(out / "calibration.csv")
    if cal:
        p = out / "sparsification.svg"
        series = {}
        for c in cal:
            fr = np.arange(len(c["curve"])) / len(c["curve"])
            series[f"{c['backend']}"] = list(zip(fr.tolist(), c["curve"]))
            series[f"{c['backend']} oracle"] = list(zip(fr.tolist(), c["oracle"]))
        _write_if_changed(p, line_svg("Sparsification curves", "fraction removed",
                                      "normalized RMSE", series))
        written.append(p)

    # timing
    timing = raw / "timing.json"
    trows = []
    if timing.exists():
        tj = _load_json(timing)
        trows = [[r["backend"], r["fit_s"], r["infer_s"], r["fit_ratio_vs_single"]]
                 for r in tj["rows"]]
    _write_csv(out / "timing.csv", ["backend", "fit_s", "infer_s", "fit_ratio_vs_single"], trows)
    written.append(out / "timing.csv")
    return written
