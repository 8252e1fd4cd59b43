"""Cross-task initialization, binary search and the frequency decision-based attack."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import nn
from ..freq import dct2, idct2, sample_freq_noise, unnormalized_to_orthonormal
from ..imgcore import check_same_shape, clip_to_ball, linf_norm
from ..oracles import BudgetExceeded, NoFaceDetected

logger = logging.getLogger(__name__)

STEP_KINDS = ("setup", "init", "bsearch", "freq", "flip")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    gamma: float = 1.75
    kappa: float = 0.004
    p: float = 0.999
    max_queries: int = 10_000
    k: int = 10
    seed: int = 0
    # units of gamma for spectrum noise: "unnormalized" DCT-II or "orthonormal"
    noise_units: str = "unnormalized"

    def __post_init__(self):
        if self.noise_units not in ("unnormalized", "orthonormal"):
            raise ValueError("noise_units must be 'unnormalized' or 'orthonormal'")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.gamma <= 0 or self.kappa <= 0:
            raise ValueError("gamma and kappa must be positive")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must lie in (0, 1]")
        if self.max_queries <= 0 or self.k < 1:
            raise ValueError("max_queries and k must be positive")


@dataclass(frozen=True)
class CPIConfig:
    xi: float = 0.031
    K: int = 10
    layer: int = nn.EMBEDDER_TAP

    def __post_init__(self):
        if self.xi <= 0 or self.K < 1:
            raise ValueError("xi must be positive and K >= 1")


@dataclass(frozen=True)
class InitStrategy:
    """``kind`` is one of ``random``, ``real`` or ``cpi``."""

    kind: str = "cpi"
    magnitude: float | None = None
    cpi: CPIConfig = field(default_factory=CPIConfig)

    def __post_init__(self):
        if self.kind not in ("random", "real", "cpi"):
            raise ValueError(f"unknown init strategy {self.kind!r}")
        if self.magnitude is not None and not 0.0 < self.magnitude <= 1.0:
            raise ValueError("random init magnitude must lie in (0, 1]")

    @classmethod
    def random(cls, magnitude=None):
        return cls("random", magnitude)

    @classmethod
    def real_face(cls):
        return cls("real")

    @classmethod
    def cross_task(cls, cfg=None):
        return cls("cpi", None, cfg or CPIConfig())


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    kind: str
    accepted: bool
    eps_prime: float
    query_count: int


@dataclass
class AttackTrace:
    records: list = field(default_factory=list)

    def add(self, iteration, kind, accepted, eps_prime, query_count):
        self.records.append(TraceRecord(iteration, kind, bool(accepted), float(eps_prime), int(query_count)))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def count(self, kind=None):
        return sum(1 for r in self.records if kind is None or r.kind == kind)

    def to_jsonl(self):
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text):
        return cls([TraceRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


@dataclass
class AttackResult:
    success: bool
    final_delta: np.ndarray
    queries_used: int
    trace: AttackTrace
    reason: str = ""
    degenerate_init: bool = False

    @property
    def eps_prime(self):
        return linf_norm(self.final_delta)

    def adversarial(self, x):
        return np.clip(x + self.final_delta, 0.0, 1.0)


class _Tracker:
    """Bundles an oracle handle with the trace so every query gets a record."""

    def __init__(self, oracle, trace):
        self.oracle = oracle
        self.trace = trace

    def query(self, img, iteration, kind, eps_prime_if_accept, eps_prime_if_reject):
        real = self.oracle.is_real(img)
        eps = eps_prime_if_accept if real else eps_prime_if_reject
        self.trace.add(iteration, kind, real, eps, self.oracle.query_count)
        return real


def is_adversarial(oracle, x, delta, epsilon):
    """True iff ``||delta||_inf <= epsilon`` and the oracle says REAL on ``x + delta``.

    Always spends exactly one query.
    """
    check_same_shape(x, delta, ("x", "delta"))
    real = oracle.is_real(np.clip(x + delta, 0.0, 1.0))
    return real and linf_norm(delta) <= epsilon


def cpi_init(x_fake, x_real, embedder, cfg=CPIConfig(), return_degenerate=False):
    """Push ``x_real`` away from ``x_fake`` in the embedder's layer-``cfg.layer`` feature space.

    Runs ``cfg.K`` sign-gradient steps of size ``xi / K`` on the negative
    cosine similarity, projecting onto the ``xi``-ball around ``x_real``.
    Uses no detector queries.
    """
    check_same_shape(x_fake, x_real, ("x_fake", "x_real"))
    ref = nn.feature_at(embedder, x_fake, cfg.layer)
    step = cfg.xi / cfg.K
    x = np.array(x_real, dtype=np.float64)
    for _ in range(cfg.K):
        g, degenerate = nn.grad_input_cosine(embedder, cfg.layer, x, ref_feature=ref)
        if degenerate:
            logger.debug("cpi_init: zero feature vector, returning x_real")
            out = np.array(x_real, dtype=np.float64)
            return (out, True) if return_degenerate else out
        x = clip_to_ball(x_real, x + step * np.sign(g), cfg.xi)
    return (x, False) if return_degenerate else x


def binary_search(x, delta_init, oracle, k=10, tracker=None):
    """Shrink ``delta_init`` by bisecting the clamp radius ``k`` times.

    ``x + delta_init`` must already be adversarial. Each round tests
    ``x + clip(delta_init, -m, m)``; the returned perturbation is clamped at
    the smallest radius known to be adversarial. Spends exactly ``k`` queries.
    """
    lo, hi = 0.0, linf_norm(delta_init)
    for i in range(k):
        mid = (lo + hi) / 2.0
        cand = np.clip(x + np.clip(delta_init, -mid, mid), 0.0, 1.0)
        if tracker is not None:
            real = tracker.query(cand, i, "bsearch", mid, hi)
        else:
            real = oracle.is_real(cand)
        if real:
            hi = mid
        else:
            lo = mid
    return np.clip(x + np.clip(delta_init, -hi, hi), 0.0, 1.0) - x


def _project_step(x, delta, eps_prime, cfg, oracle, rng, noise, domain, tracker, iteration):
    radius = eps_prime - cfg.kappa
    if radius < 0:
        return delta, False
    eta = sample_freq_noise(x.shape, cfg.gamma, rng) if noise is None else noise
    if domain == "freq":
        if cfg.noise_units == "unnormalized":
            eta = eta * unnormalized_to_orthonormal(*x.shape[:2])
        moved = idct2(dct2(x + delta) + eta)
    else:
        moved = x + delta + eta
    cand = clip_to_ball(x, moved, radius)
    new_delta = cand - x
    if tracker is not None:
        ok = tracker.query(cand, iteration, "freq", linf_norm(new_delta), eps_prime)
    else:
        ok = oracle.is_real(cand)
    return (new_delta, True) if ok else (delta, False)


def freq_noise_step(x, delta, eps_prime, cfg, oracle, rng, noise=None, tracker=None, iteration=0):
    """Add Rademacher noise to the spectrum of ``x + delta`` and project onto the
    ``eps_prime - kappa`` ball around ``x``; keep it if still REAL.

    ``noise`` overrides the sampled spectrum noise (tests use zeros).
    Returns ``(delta, accepted)``.
    """
    return _project_step(x, delta, eps_prime, cfg, oracle, rng, noise, "freq", tracker, iteration)


def spatial_noise_step(x, delta, eps_prime, cfg, oracle, rng, noise=None, tracker=None, iteration=0):
    """Pixel-domain counterpart of :func:`freq_noise_step` used for ablation."""
    return _project_step(x, delta, eps_prime, cfg, oracle, rng, noise, "spatial", tracker, iteration)


def sign_flip_step(x, delta, p, oracle, rng, tracker=None, iteration=0):
    """Flip the sign of each coordinate with probability ``1 - p``; keep if still REAL.

    Returns ``(delta, accepted)``.
    """
    keep = rng.random(delta.shape) < p
    s = np.where(keep, 1.0, -1.0)
    cand = np.clip(x + delta * s, 0.0, 1.0)
    new_delta = cand - x
    eps_prime = linf_norm(delta)
    if tracker is not None:
        ok = tracker.query(cand, iteration, "flip", linf_norm(new_delta), eps_prime)
    else:
        ok = oracle.is_real(cand)
    return (new_delta, True) if ok else (delta, False)


def _initial_image(x_fake, x_real, init, embedder, cfg, rng):
    if init.kind == "real":
        return np.array(x_real, dtype=np.float64), False
    if init.kind == "random":
        mag = cfg.epsilon if init.magnitude is None else init.magnitude
        return np.clip(x_fake + rng.uniform(-mag, mag, x_fake.shape), 0.0, 1.0), False
    if embedder is None:
        raise ValueError("CPI initialization needs an embedder network")
    return cpi_init(x_fake, x_real, embedder, init.cpi, return_degenerate=True)


def run_attack(x_fake, x_real, init, oracle, embedder=None, cfg=AttackConfig(), domain="freq"):
    """Full decision-based attack pipeline; ``domain`` selects frequency or pixel noise."""
    x = np.asarray(x_fake, dtype=np.float64)
    check_same_shape(x, x_real, ("x_fake", "x_real"))
    rng = np.random.default_rng(cfg.seed)
    trace = AttackTrace()
    tracker = _Tracker(oracle, trace)
    zero = np.zeros_like(x)
    step = freq_noise_step if domain == "freq" else spatial_noise_step

    def result(success, delta, reason, degenerate=False):
        return AttackResult(success, delta, oracle.query_count, trace, reason, degenerate)

    try:
        if tracker.query(x, 0, "setup", 0.0, 0.0):
            return result(True, zero, "clean_misclassified")
        x_init, degenerate = _initial_image(x, x_real, init, embedder, cfg, rng)
        delta_init = x_init - x
        if not tracker.query(x_init, 0, "init", linf_norm(delta_init), linf_norm(delta_init)):
            return result(False, zero, "init_failure", degenerate)
        delta = binary_search(x, delta_init, oracle, cfg.k, tracker)
        eps_prime = linf_norm(delta)
        it = 0
        while cfg.epsilon < eps_prime:
            it += 1
            delta, _ = step(x, delta, eps_prime, cfg, oracle, rng, tracker=tracker, iteration=it)
            delta, _ = sign_flip_step(x, delta, cfg.p, oracle, rng, tracker=tracker, iteration=it)
            eps_prime = linf_norm(delta)
        return result(True, delta, "success", degenerate)
    except BudgetExceeded:
        return result(False, zero, "budget_exhausted")
    except NoFaceDetected:  # only reachable if is_real is bypassed
        return result(False, zero, "no_face")


def fda_attack(x_fake, x_real, init, oracle, embedder=None, cfg=AttackConfig()):
    """Frequency decision-based attack: init, verify, binary search, then
    alternate frequency-noise projection and random sign flips until the
    perturbation radius is within ``cfg.epsilon``."""
    return run_attack(x_fake, x_real, init, oracle, embedder, cfg, domain="freq")


def spatial_noise_attack(x_fake, x_real, init, oracle, embedder=None, cfg=AttackConfig()):
    """Same pipeline as :func:`fda_attack` with the noise added in pixel space."""
    return run_attack(x_fake, x_real, init, oracle, embedder, cfg, domain="spatial")
