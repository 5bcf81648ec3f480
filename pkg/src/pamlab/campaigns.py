"""Seeded Monte-Carlo campaigns over (seed, t) with CSV records and JSON summaries.

Every summary is computed from the records as read back from the CSV file, so
it can always be recomputed from the published table alone.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import CertificationError, ConvergenceError, DomainError, NotApplicable
from .evolution import decompose
from .lattice import PotentialField, box_order_stats
from .laws import LawsContext, cdf_Y, joint_cdf_Y1Y2, radial_cdf_X_many
from .spectral import decay_bound_check, principal_pair, u3_domination_check
from .variational import argmax_top2, radius_policy, scaling

log = logging.getLogger(__name__)

KINDS = ("laws", "localisation", "events")
MODES = ("field", "exceedance")
WORKERS_ENV = "PAMLAB_WORKERS"
QUANTILE_LEVELS = tuple((i + 0.5) / 10 for i in range(10))


@dataclass
class CampaignConfig:
    kind: str
    d: int
    alpha: float
    seed_start: int
    seed_count: int
    t_grid: list
    delta: float = 1e-3
    mode: str = "field"
    outer_factor: float = 2.0
    min_margin: int = 16
    spectral_tol: float = 1e-10
    gap_thresholds: list = dc_field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    output: str | None = None

    def __post_init__(self):
        self.t_grid = [float(t) for t in self.t_grid]
        self.gap_thresholds = [float(g) for g in self.gap_thresholds]
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"unknown campaign kind {self.kind!r}")
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.alpha <= self.d:
            raise DomainError(f"need alpha > d, got alpha={self.alpha}, d={self.d}")
        if self.seed_count < 1:
            raise DomainError("seed_count must be positive")
        if not self.t_grid or any(b <= a for a, b in zip(self.t_grid, self.t_grid[1:])):
            raise DomainError("t grid must be nonempty and strictly increasing")
        if self.kind != "laws" and self.mode != "field":
            raise DomainError(f"{self.kind} campaigns need mode=field")

    @property
    def seeds(self) -> range:
        return range(self.seed_start, self.seed_start + self.seed_count)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise DomainError(f"unknown config fields: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def stream_rng(seed: int, t: float, stream: str) -> np.random.Generator:
    """Independent generator for one (seed, t, stream) triple."""
    t_bits = struct.unpack("<Q", struct.pack("<d", float(t)))[0]
    tag = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([seed % (1 << 64), t_bits, tag]))


def ks_statistic(samples: Sequence[float], cdf: Callable) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``samples`` and ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n == 0:
        raise DomainError("ks_statistic needs at least one sample")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def joint_grid_error(y1: np.ndarray, y2: np.ndarray, ctx: LawsContext) -> float:
    """Sup over a 10x10 grid of empirical quantiles of |F_emp - F| for the joint law of (Y1, Y2)."""
    g1 = np.quantile(y1, QUANTILE_LEVELS)
    g2 = np.quantile(y2, QUANTILE_LEVELS)
    A, B = np.meshgrid(g1, g2, indexing="ij")
    emp = ((y1[None, None, :] <= A[..., None]) & (y2[None, None, :] <= B[..., None])).mean(axis=2)
    return float(np.abs(emp - joint_cdf_Y1Y2(A, B, ctx)).max())


# ----------------------------------------------------------------------------
# per-replica work


def _coord_cols(prefix: str, d: int) -> list[str]:
    return [f"{prefix}_{i}" for i in range(d)]


def laws_columns(d: int) -> list[str]:
    return (["seed", "t", "mode", "ok", "error"] + _coord_cols("Z1", d) + _coord_cols("Z2", d)
            + ["psi1", "psi2", "xi1", "xi2", "y1", "y2", "x_norm", "searched_radius", "tail_probability"])


def localisation_columns(d: int) -> list[str]:
    return (["seed", "t", "ok", "error"] + _coord_cols("Z1", d)
            + ["psi1", "psi2", "xi1", "y1", "x_norm", "h_t", "R_t", "R_out", "ratio", "m1", "m2", "m3",
               "identity_error", "log_U", "lower_bound_diag", "lambda", "xi_top1", "xi_top2", "gap",
               "decay_applicable", "decay_violation", "domination_max", "spectral_residual", "spectral_error",
               "peak_ratio", "peak_distance", "event_i", "event_ii", "event_iii"])


def events_columns(d: int) -> list[str]:
    return (["seed", "t", "ok", "error"] + _coord_cols("Z1", d)
            + ["xi1", "R_t", "xi_top1", "xi_top2", "gap", "event_i", "event_ii", "event_iii"])


def _blank(columns: list[str], seed: int, t: float, err: str, **extra) -> dict:
    row = {c: "" for c in columns}
    row.update(seed=seed, t=t, ok=0, error=err, **extra)
    return row


def _laws_record(cfg: CampaignConfig, seed: int, t: float) -> dict:
    cols = laws_columns(cfg.d)
    sc = scaling(t, cfg.d, cfg.alpha)
    try:
        if cfg.mode == "field":
            res = argmax_top2(PotentialField(seed, cfg.alpha, cfg.d), t, cfg.delta)
        else:
            res = argmax_top2(None, t, cfg.delta, mode="exceedance", rng=stream_rng(seed, t, "laws"),
                              d=cfg.d, alpha=cfg.alpha)
    except (CertificationError, ConvergenceError) as exc:
        return _blank(cols, seed, t, type(exc).__name__, mode=cfg.mode)
    row = dict(seed=seed, t=t, mode=cfg.mode, ok=1, error="")
    row.update(zip(_coord_cols("Z1", cfg.d), res.Z1))
    row.update(zip(_coord_cols("Z2", cfg.d), res.Z2))
    row.update(psi1=res.psi1, psi2=res.psi2, xi1=res.xi1, xi2=res.xi2, y1=res.psi1 / sc.a_t,
               y2=res.psi2 / sc.a_t, x_norm=sum(abs(c) for c in res.Z1) / sc.r_t,
               searched_radius=res.searched_radius, tail_probability=res.tail_probability)
    return row


def _events_core(cfg: CampaignConfig, field, t: float):
    res = argmax_top2(field, t, cfg.delta)
    pol = radius_policy(res.Z1, t)
    r1 = sum(abs(c) for c in res.Z1)
    R_in = math.floor(pol.R_t)
    inner = box_order_stats(field, R_in)
    near = box_order_stats(field, r1)
    flags = dict(event_i=int(near.max1 == res.xi1), event_ii=int(inner.max1 == res.xi1),
                 event_iii=int(t * res.xi1 > r1))
    return res, pol, inner, flags


def _events_record(cfg: CampaignConfig, seed: int, t: float) -> dict:
    cols = events_columns(cfg.d)
    field = PotentialField(seed, cfg.alpha, cfg.d)
    try:
        res, pol, inner, flags = _events_core(cfg, field, t)
    except (CertificationError, ConvergenceError) as exc:
        return _blank(cols, seed, t, type(exc).__name__)
    row = dict(seed=seed, t=t, ok=1, error="")
    row.update(zip(_coord_cols("Z1", cfg.d), res.Z1))
    row.update(xi1=res.xi1, R_t=pol.R_t, xi_top1=inner.max1, xi_top2=inner.max2,
               gap=inner.max1 - inner.max2, **flags)
    return row


def _unit(x: float) -> float:
    # mass fractions can overshoot [0, 1] by rounding; identity_error keeps the raw discrepancy
    return min(1.0, max(0.0, float(x)))


def localisation_record(cfg: CampaignConfig, seed: int, t: float) -> dict:
    """Full pipeline for one (seed, t): argmax, radius, decomposition, spectral checks.

    A failed spectral solve blanks only the spectral columns; the mass
    columns do not depend on it.
    """
    cols = localisation_columns(cfg.d)
    sc = scaling(t, cfg.d, cfg.alpha)
    field = PotentialField(seed, cfg.alpha, cfg.d)
    try:
        res, pol, inner, flags = _events_core(cfg, field, t)
        dec = decompose(field, t, res.Z1, pol.R_t, cfg.outer_factor, cfg.min_margin)
    except (CertificationError, ConvergenceError) as exc:
        return _blank(cols, seed, t, type(exc).__name__)
    gap = inner.max1 - inner.max2
    r1 = sum(abs(c) for c in res.Z1)
    lower = (dec.log_U - t * res.xi1 + r1 * math.log(res.xi1)) / t
    ip = int(np.argmax(dec.u_total_inner))
    row = dict(seed=seed, t=t, ok=1, error="")
    row.update(zip(_coord_cols("Z1", cfg.d), res.Z1))
    row.update(psi1=res.psi1, psi2=res.psi2, xi1=res.xi1, y1=res.psi1 / sc.a_t, x_norm=r1 / sc.r_t,
               h_t=pol.h_t, R_t=pol.R_t, R_out=dec.R_out, ratio=_unit(dec.ratio), m1=_unit(dec.m1),
               m2=_unit(dec.m2), m3=_unit(dec.m3),
               identity_error=dec.identity_error, log_U=dec.log_U, lower_bound_diag=lower,
               xi_top1=inner.max1, xi_top2=inner.max2, gap=gap,
               peak_ratio=_unit(float(dec.u_total_inner[ip])),
               peak_distance=int(np.abs(dec.sites_inner[ip] - np.array(res.Z1)).sum()), **flags)
    row.update({"lambda": "", "decay_applicable": 0, "decay_violation": "", "domination_max": "",
                "spectral_residual": "", "spectral_error": ""})
    try:
        pair = principal_pair(field, dec.R_in, norm_site=res.Z1, tol=cfg.spectral_tol)
    except ConvergenceError as exc:
        row["spectral_error"] = str(exc)
        return row
    row.update({"lambda": pair.lam, "spectral_residual": pair.residual})
    try:
        row["decay_violation"] = decay_bound_check(pair, res.Z1, gap)
        row["decay_applicable"] = 1
    except NotApplicable:
        pass
    try:
        row["domination_max"] = u3_domination_check(dec, pair, res.Z1)
    except DomainError:
        pass
    return row


_RECORDERS = {"laws": (_laws_record, laws_columns), "localisation": (localisation_record, localisation_columns),
              "events": (_events_record, events_columns)}


def _run_task(args):
    cfg_dict, seed, t = args
    cfg = CampaignConfig.from_dict(cfg_dict)
    return _RECORDERS[cfg.kind][0](cfg, seed, t)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise DomainError(f"{WORKERS_ENV} must be an integer")


def run_records(cfg: CampaignConfig) -> list[dict]:
    """All records for the campaign, sorted by (seed, t)."""
    tasks = [(asdict(cfg), s, t) for s in cfg.seeds for t in cfg.t_grid]
    n = _workers()
    if n == 1:
        rows = [_run_task(a) for a in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * n))))
    rows.sort(key=lambda r: (int(r["seed"]), float(r["t"])))
    return rows


# ----------------------------------------------------------------------------
# CSV and summaries


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def records_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


TEXT_COLUMNS = ("mode", "error", "spectral_error")


def read_records(text: str) -> list[dict]:
    """Parse a campaign CSV; numeric fields become floats, empty fields None."""
    out = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in raw.items():
            if v == "":
                row[k] = None
            elif k in TEXT_COLUMNS:
                row[k] = v
            else:
                row[k] = float(v)
        out.append(row)
    return out


def _col(rows, key) -> np.ndarray:
    return np.array([r[key] for r in rows if r[key] is not None], dtype=float)


def _by_t(rows: list[dict], t_grid) -> dict:
    return {t: [r for r in rows if r["t"] == t] for t in t_grid}


def summarize_laws(rows: list[dict], cfg: CampaignConfig) -> dict:
    ctx = LawsContext.make(cfg.d, cfg.alpha)
    per_t = []
    for t, group in _by_t(rows, cfg.t_grid).items():
        ok = [r for r in group if r["ok"] == 1]
        entry = dict(t=t, n=len(ok), failures=len(group) - len(ok))
        if ok:
            y1, y2, xn = _col(ok, "y1"), _col(ok, "y2"), _col(ok, "x_norm")
            entry.update(
                ks_Y=ks_statistic(y1, lambda y: cdf_Y(y, ctx)),
                ks_X=ks_statistic(xn, lambda s: radial_cdf_X_many(s, ctx)),
                joint_grid_error=joint_grid_error(y1, y2, ctx),
                psi_order_ok=bool(np.all(y1 >= y2)),
                max_tail_probability=float(_col(ok, "tail_probability").max()),
            )
        per_t.append(entry)
    return dict(kind="laws", per_t=per_t)


def _quartiles(x: np.ndarray) -> list[float]:
    return [float(v) for v in np.quantile(x, [0.25, 0.5, 0.75])] if len(x) else []


def summarize_localisation(rows: list[dict], cfg: CampaignConfig) -> dict:
    per_t = []
    for t, group in _by_t(rows, cfg.t_grid).items():
        ok = [r for r in group if r["ok"] == 1]
        entry = dict(t=t, n=len(ok), failures=len(group) - len(ok))
        if ok:
            ratio = _col(ok, "ratio")
            app = [r for r in ok if r["decay_applicable"] == 1]
            entry.update(
                ratio_quartiles=_quartiles(ratio),
                ratio_median=float(np.median(ratio)),
                frac_ratio_ge_0_9=float(np.mean(ratio >= 0.9)),
                m1_median=float(np.median(_col(ok, "m1"))),
                m2_median=float(np.median(_col(ok, "m2"))),
                m3_median=float(np.median(_col(ok, "m3"))),
                max_identity_error=float(_col(ok, "identity_error").max()),
                peak_ratio_median=float(np.median(_col(ok, "peak_ratio"))),
                frac_peak_at_Z1=float(np.mean(_col(ok, "peak_distance") == 0)),
                spectral_failures=sum(1 for r in ok if r["spectral_error"]),
                decay_applicable=len(app),
                max_decay_violation=float(_col(app, "decay_violation").max()) if app else None,
                max_domination=float(_col(ok, "domination_max").max()) if len(_col(ok, "domination_max")) else None,
                min_lower_bound_diag=float(_col(ok, "lower_bound_diag").min()),
                **_event_freqs(ok, cfg),
            )
        per_t.append(entry)
    return dict(kind="localisation", per_t=per_t)


def _event_freqs(ok: list[dict], cfg: CampaignConfig) -> dict:
    gap = _col(ok, "gap")
    return dict(
        freq_i=float(np.mean(_col(ok, "event_i"))),
        freq_ii=float(np.mean(_col(ok, "event_ii"))),
        freq_iii=float(np.mean(_col(ok, "event_iii"))),
        freq_gap_ge={format(g, "g"): float(np.mean(gap >= g)) for g in cfg.gap_thresholds},
        gap_median=float(np.median(gap)),
    )


def summarize_events(rows: list[dict], cfg: CampaignConfig) -> dict:
    per_t = []
    for t, group in _by_t(rows, cfg.t_grid).items():
        ok = [r for r in group if r["ok"] == 1]
        entry = dict(t=t, n=len(ok), failures=len(group) - len(ok))
        if ok:
            entry.update(_event_freqs(ok, cfg))
        per_t.append(entry)
    return dict(kind="events", per_t=per_t)


_SUMMARIES = {"laws": summarize_laws, "localisation": summarize_localisation, "events": summarize_events}


def summarize(csv_text: str, cfg: CampaignConfig) -> dict:
    summary = _SUMMARIES[cfg.kind](read_records(csv_text), cfg)
    summary["config"] = asdict(cfg)
    return summary


@dataclass
class CampaignResult:
    config: CampaignConfig
    csv_text: str
    summary: dict

    @property
    def records(self) -> list[dict]:
        return read_records(self.csv_text)


def run_campaign(cfg: CampaignConfig) -> CampaignResult:
    """Run every (seed, t) replica, write ``<output>.csv`` and ``<output>.json`` when ``output`` is set."""
    rows = run_records(cfg)
    text = records_to_csv(rows, _RECORDERS[cfg.kind][1](cfg.d))
    summary = summarize(text, cfg)
    if cfg.output:
        base = Path(cfg.output)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".csv").write_text(text)
        base.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return CampaignResult(cfg, text, summary)


def campaign_laws(cfg: CampaignConfig) -> CampaignResult:
    if cfg.kind != "laws":
        cfg = CampaignConfig.from_dict({**asdict(cfg), "kind": "laws"})
    return run_campaign(cfg)


def campaign_localisation(cfg: CampaignConfig) -> CampaignResult:
    if cfg.kind != "localisation":
        cfg = CampaignConfig.from_dict({**asdict(cfg), "kind": "localisation"})
    return run_campaign(cfg)


def campaign_events(cfg: CampaignConfig) -> CampaignResult:
    if cfg.kind != "events":
        cfg = CampaignConfig.from_dict({**asdict(cfg), "kind": "events"})
    return run_campaign(cfg)


def two_sample_ks(a: Sequence[float], b: Sequence[float]):
    """Two-sample KS test; returns (statistic, p-value)."""
    res = stats.ks_2samp(np.asarray(a, float), np.asarray(b, float))
    return float(res.statistic), float(res.pvalue)
