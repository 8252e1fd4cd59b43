"""Batch attack experiments, metrics, transfer evaluation and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .. import nn
from ..attacks.core import AttackConfig, AttackTrace, CPIConfig, InitStrategy, run_attack
from ..imgcore import INF, quality
from ..oracles import Decision, OracleHandle
from .dataset import SyntheticDatasetSpec, fake_pairs, gen_dataset

logger = logging.getLogger(__name__)

ROW_FIELDS = (
    "trial",
    "strength",
    "identity_id",
    "success",
    "reason",
    "queries",
    "eps_prime",
    "mse",
    "psnr_db",
    "ssim",
    "recognized",
    "degenerate_init",
)


def trial_seed(seed, index):
    """Attack RNG seed for one trial, derived from the experiment seed and trial index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


@dataclass(frozen=True)
class PairSetSpec:
    """A family of paired datasets, one per artifact strength.

    ``split`` selects fresh per-image draws for the same identities, so
    models trained on split 0 are evaluated on unseen images.
    """

    strengths: tuple = (0.03, 0.05, 0.07, 0.09)
    pairs_per_strength: int = 50
    forgery_kind: str = "mixed"
    reenact_jitter: float = 0.0
    size: tuple = (64, 64, 3)
    seed: int = 0
    split: int = 1

    def __post_init__(self):
        if not self.strengths:
            raise ValueError("need at least one artifact strength")
        if self.pairs_per_strength < 1:
            raise ValueError("pairs_per_strength must be positive")

    def dataset_specs(self, images_per_identity=1, num_identities=None, split=None):
        n_id = num_identities or self.pairs_per_strength // images_per_identity
        return [
            SyntheticDatasetSpec(
                num_identities=n_id,
                images_per_identity=images_per_identity,
                size=tuple(self.size),
                forgery_kind=self.forgery_kind,
                artifact_strength=float(s),
                seed=self.seed,
                split=self.split if split is None else split,
                reenact_jitter=self.reenact_jitter,
            )
            for s in self.strengths
        ]


@dataclass
class Pair:
    fake: np.ndarray
    real: np.ndarray
    identity_id: int
    strength: float


def make_pairs(spec):
    """``(fake, paired real)`` trials, pairing inside each strength's dataset."""
    pairs = []
    for ds in spec.dataset_specs():
        samples = gen_dataset(ds)
        for fake, real in fake_pairs(samples)[: spec.pairs_per_strength]:
            pairs.append(Pair(fake.image, real.image, fake.identity_id, ds.artifact_strength))
    return pairs


@dataclass(frozen=True)
class ExperimentConfig:
    init: str = "cpi"
    domain: str = "freq"
    attack: AttackConfig = field(default_factory=AttackConfig)
    cpi: CPIConfig = field(default_factory=CPIConfig)
    random_magnitude: float | None = None
    seed: int = 0
    rsr_threshold: float = 0.6
    workers: int = 1

    def __post_init__(self):
        if self.domain not in ("freq", "spatial"):
            raise ValueError("domain must be 'freq' or 'spatial'")
        InitStrategy(self.init, self.random_magnitude)

    def init_strategy(self):
        if self.init == "cpi":
            return InitStrategy.cross_task(self.cpi)
        if self.init == "random":
            return InitStrategy.random(self.random_magnitude)
        return InitStrategy.real_face()


@dataclass
class TrialOutcome:
    row: dict
    trace: AttackTrace
    adversarial: np.ndarray | None


@dataclass
class MetricsReport:
    asr: float
    aq: float | None
    mq: float | None
    quality: dict | None
    rsr: float | None
    rows: list
    traces: list = field(default_factory=list, repr=False)
    adversarial: list = field(default_factory=list, repr=False)

    @property
    def num_trials(self):
        return len(self.rows)

    def aggregate(self):
        return {
            "num_trials": self.num_trials,
            "successes": sum(1 for r in self.rows if r["success"]),
            "asr": self.asr,
            "aq": self.aq,
            "mq": self.mq,
            "quality": self.quality,
            "rsr": self.rsr,
        }

    def queries(self, censor=None):
        """Per-trial query counts; failures become ``censor`` (default: +inf)."""
        fill = math.inf if censor is None else censor
        return np.array([r["queries"] if r["success"] else fill for r in self.rows], dtype=np.float64)


def rsr_eval(adversarial, paired_real, embedder, threshold=0.6, return_degenerate=False):
    """Whether the embedder still matches ``adversarial`` to ``paired_real``.

    Uses the cosine of final-layer embeddings; a zero embedding is never
    recognized.
    """
    za = nn.embed(embedder, adversarial)
    zr = nn.embed(embedder, paired_real)
    cos, degenerate = nn.cosine_similarity(za, zr, return_degenerate=True)
    ok = (not degenerate) and cos >= threshold
    return (ok, degenerate) if return_degenerate else ok


def _one_trial(index, pair, detector, embedder, cfg):
    attack_cfg = replace(cfg.attack, seed=trial_seed(cfg.seed, index))
    oracle = OracleHandle(detector, budget=attack_cfg.max_queries)
    result = run_attack(pair.fake, pair.real, cfg.init_strategy(), oracle, embedder, attack_cfg, cfg.domain)
    row = {
        "trial": index,
        "strength": pair.strength,
        "identity_id": pair.identity_id,
        "success": bool(result.success),
        "reason": result.reason,
        "queries": int(result.queries_used),
        "eps_prime": float(result.eps_prime) if result.success else None,
        "mse": None,
        "psnr_db": None,
        "ssim": None,
        "recognized": None,
        "degenerate_init": bool(result.degenerate_init),
    }
    adv = None
    if result.success:
        adv = result.adversarial(pair.fake)
        q = quality(pair.real, adv)
        row.update(mse=q.mse, psnr_db=q.psnr_db, ssim=q.ssim)
        if embedder is not None:
            row["recognized"] = bool(rsr_eval(adv, pair.real, embedder, cfg.rsr_threshold))
    return TrialOutcome(row, result.trace, adv)


def _trial_star(args):
    return _one_trial(*args)


def summarize(rows):
    """ASR over all trials; AQ, MQ, quality and RSR over successes only."""
    n = len(rows)
    wins = [r for r in rows if r["success"]]
    asr = len(wins) / n if n else 0.0
    if not wins:
        return asr, None, None, None, None
    q = np.array([r["queries"] for r in wins], dtype=np.float64)
    measured = [r for r in wins if r.get("mse") is not None]
    qual = None
    if measured:
        finite = [r["psnr_db"] for r in measured if r["psnr_db"] != INF]
        qual = {
            "mse": float(np.mean([r["mse"] for r in measured])),
            # identical images have infinite PSNR; average the finite ones
            "psnr_db": float(np.mean(finite)) if finite else INF,
            "ssim": float(np.mean([r["ssim"] for r in measured])),
        }
    rec = [r["recognized"] for r in wins if r["recognized"] is not None]
    rsr = float(np.mean(rec)) if rec else None
    return asr, float(q.mean()), float(np.median(q)), qual, rsr


def run_experiment(pairs, detector, embedder=None, cfg=ExperimentConfig()):
    """Attack every pair once and aggregate the results.

    ``detector`` is a label-only decision function; each trial gets its own
    counting handle with budget ``cfg.attack.max_queries``.
    """
    jobs = [(i, p, detector, embedder, cfg) for i, p in enumerate(pairs)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(_trial_star, jobs, chunksize=4))
    else:
        outcomes = [_trial_star(j) for j in jobs]
    rows = [o.row for o in outcomes]
    asr, aq, mq, qual, rsr = summarize(rows)
    logger.info("experiment: %d trials, ASR %.3f, AQ %s", len(rows), asr, aq)
    return MetricsReport(
        asr, aq, mq, qual, rsr, rows, [o.trace for o in outcomes], [o.adversarial for o in outcomes]
    )


def metrics_from_outcomes(outcomes):
    """Metrics for hand-built ``(success, queries)`` outcomes."""
    rows = [
        dict.fromkeys(ROW_FIELDS) | {"trial": i, "success": bool(s), "queries": int(q)}
        for i, (s, q) in enumerate(outcomes)
    ]
    asr, aq, mq, qual, rsr = summarize(rows)
    return MetricsReport(asr, aq, mq, qual, rsr, rows)


@dataclass(frozen=True)
class SignTestResult:
    less: int
    greater: int
    ties: int
    p_value: float

    def significant(self, alpha=0.05):
        return self.p_value < alpha


def paired_sign_test(a, b):
    """One-sided sign test of ``a < b`` over paired values; ties are dropped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    less = int(np.sum(a < b))
    greater = int(np.sum(a > b))
    ties = len(a) - less - greater
    n = less + greater
    p = 1.0 if n == 0 else float(binomtest(less, n, 0.5, alternative="greater").pvalue)
    return SignTestResult(less, greater, ties, p)


@dataclass(frozen=True)
class TransferReport:
    transfer_rate: float | None
    clean_real_rate: float | None
    num_adversarial: int
    num_clean: int


def transfer_eval(adversarial, target, clean_fakes=None):
    """Fraction of adversarial images that ``target`` labels REAL.

    ``adversarial`` should hold only the successes from the source oracle
    (``None`` entries are skipped). ``clean_fakes``, if given, gives the
    baseline REAL rate of unattacked fakes. ``target`` is called directly,
    outside any budget.
    """
    adv = [a for a in adversarial if a is not None]
    rate = float(np.mean([target(a) == Decision.REAL for a in adv])) if adv else None
    clean = None
    n_clean = 0
    if clean_fakes is not None:
        n_clean = len(clean_fakes)
        clean = float(np.mean([target(x) == Decision.REAL for x in clean_fakes])) if n_clean else None
    return TransferReport(rate, clean, len(adv), n_clean)


# -- report files -----------------------------------------------------------


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def curve_rows(report):
    """``(trial, query_count, eps_prime)`` after every query past the setup check."""
    out = []
    for row, trace in zip(report.rows, report.traces):
        for rec in trace.records:
            if rec.kind != "setup":
                out.append((row["trial"], rec.query_count, rec.eps_prime))
    return out


def emit_report(report, fmt, path):
    """Write ``report`` as JSON or CSV; curves go to ``<stem>_curves.csv`` alongside.

    Returns the list of written paths.
    """
    path = Path(path)
    if fmt == "json":
        payload = {
            "aggregate": {k: _jsonable(v) for k, v in report.aggregate().items()},
            "rows": [{k: _jsonable(r.get(k)) for k in ROW_FIELDS} for r in report.rows],
        }
        if payload["aggregate"]["quality"]:
            payload["aggregate"]["quality"] = {k: _jsonable(v) for k, v in report.quality.items()}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROW_FIELDS)
            for r in report.rows:
                w.writerow(["" if r.get(k) is None else _jsonable(r.get(k)) for k in ROW_FIELDS])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    written = [path]
    if report.traces:
        cpath = path.with_name(path.stem + "_curves.csv")
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("trial", "query_count", "eps_prime"))
            w.writerows(curve_rows(report))
        written.append(cpath)
    return written


def write_traces(report, path):
    """All trial traces in one JSONL file, each record tagged with its trial index."""
    lines = []
    for row, trace in zip(report.rows, report.traces):
        for rec in trace.records:
            lines.append(json.dumps({"trial": row["trial"], **asdict(rec)}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
