"""Label-only detectors and the query-counting oracle handle.

Every detector here is a callable ``detector(image) -> Decision``. Scores
never leave a detector through the oracle path; attacks only see labels.
"""
from __future__ import annotations

import base64
import enum
import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import nn
from .freq import high_frequency_mask, dct2, jpeg_like_compress
from .imgcore import encode_png, quantize

logger = logging.getLogger(__name__)


class Decision(enum.IntEnum):
    REAL = 0
    FAKE = 1


class BudgetExceeded(RuntimeError):
    """The oracle's query budget is spent."""


class TransportError(RuntimeError):
    """A remote oracle could not be reached or kept failing."""


class NoFaceDetected(RuntimeError):
    """A remote oracle refused the image (no face found). The query still counts."""


class OracleHandle:
    """Counts every query made against ``detector`` and enforces ``budget``.

    One handle per attack trial; handles are not thread-safe.
    """

    def __init__(self, detector, budget=10_000):
        if budget <= 0:
            raise ValueError("budget must be positive")
        self.detector = detector
        self.budget = int(budget)
        self.query_count = 0

    @property
    def remaining(self):
        return self.budget - self.query_count

    def decide(self, img):
        if self.query_count >= self.budget:
            raise BudgetExceeded(f"query budget of {self.budget} exhausted")
        self.query_count += 1
        return Decision(self.detector(img))

    def is_real(self, img):
        """``decide(img) == REAL``, treating a no-face rejection as not REAL."""
        try:
            return self.decide(img) == Decision.REAL
        except NoFaceDetected:
            return False


# -- frequency-statistics detector ----------------------------------------


@dataclass(frozen=True)
class FreqStatConfig:
    hf_threshold: float = 1e-3
    band_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.hf_threshold < 1.0:
            raise ValueError("hf_threshold must lie in (0, 1)")
        if not 0.0 < self.band_fraction < 1.0:
            raise ValueError("band_fraction must lie in (0, 1)")


def hf_energy_ratio(img, band_fraction=0.5):
    """High-band share of total DCT energy; 0 for an all-zero image.

    The high band holds coefficients with ``u + v`` beyond ``band_fraction``
    of the anti-diagonal.
    """
    spec = dct2(img)
    energy = spec**2
    total = float(energy.sum())
    if total <= 0.0:
        return 0.0
    h, w = spec.shape[:2]
    if band_fraction == 0.5:
        mask = high_frequency_mask(h, w)
    else:
        u = np.arange(h)[:, None]
        v = np.arange(w)[None, :]
        mask = (u + v) > band_fraction * (h - 1 + w - 1)
    return float(energy[mask].sum() / total)


class FrequencyStatDetector(ClassifierMixin, BaseEstimator):
    """Flags an image as FAKE when its high-frequency energy ratio exceeds a threshold.

    ``fit`` calibrates the threshold from labelled images unless
    ``hf_threshold`` fixes it. With ``target_tpr`` set, the threshold is the
    fake-class ratio quantile that flags that share of the training fakes;
    otherwise it is the geometric mean of the real-class upper quantile and
    the fake-class lower quantile. Either way it never drops below the
    real-class upper quantile.
    """

    def __init__(self, hf_threshold=None, band_fraction=0.5, quantile=0.05, target_tpr=None):
        self.hf_threshold = hf_threshold
        self.band_fraction = band_fraction
        self.quantile = quantile
        self.target_tpr = target_tpr

    def fit(self, X, y):
        y = np.asarray(y)
        if self.hf_threshold is not None:
            self.threshold_ = float(self.hf_threshold)
        else:
            r = np.array([hf_energy_ratio(x, self.band_fraction) for x in X])
            if not (np.any(y == 0) and np.any(y == 1)):
                raise ValueError("calibration needs both REAL and FAKE images")
            hi_real = float(np.quantile(r[y == 0], 1.0 - self.quantile))
            if self.target_tpr is not None:
                # "> threshold" flags the fakes strictly above this quantile
                thr = float(np.quantile(r[y == 1], 1.0 - self.target_tpr))
            else:
                lo_fake = np.quantile(r[y == 1], self.quantile)
                thr = float(np.sqrt(max(hi_real, 1e-12) * max(lo_fake, 1e-12)))
            self.threshold_ = max(thr, hi_real)
        FreqStatConfig(self.threshold_, self.band_fraction)
        self.classes_ = np.array([0, 1])
        return self

    @property
    def config(self):
        return FreqStatConfig(self.threshold_, self.band_fraction)

    def ratio(self, img):
        return hf_energy_ratio(img, self.band_fraction)

    def __call__(self, img):
        return Decision.FAKE if self.ratio(img) > self.threshold_ else Decision.REAL

    def predict(self, X):
        return np.array([int(self(x)) for x in X])


def freq_stat_detector(cfg):
    """Build a frequency-statistics decision function from a fixed config."""
    det = FrequencyStatDetector(hf_threshold=cfg.hf_threshold, band_fraction=cfg.band_fraction)
    return det.fit([], [])


# -- CNN, defended and remote detectors -----------------------------------


class CNNDetector:
    """FAKE iff the network's softmax fake-probability is strictly above ``threshold``."""

    def __init__(self, net, threshold=0.5):
        self.net = net
        self.threshold = threshold

    def fake_probability(self, img):
        return float(nn.softmax(nn.predict_logits(self.net, img))[0, 1])

    def __call__(self, img):
        return Decision.FAKE if self.fake_probability(img) > self.threshold else Decision.REAL

    def predict(self, X):
        p = nn.softmax(nn.predict_logits(self.net, X))[:, 1]
        return (p > self.threshold).astype(np.int64)


def cnn_detector(net, threshold=0.5):
    return CNNDetector(net, threshold)


class DefendedDetector:
    """Runs the JPEG-style compressor before ``inner``; still one query per call."""

    def __init__(self, inner, quality):
        self.inner = inner
        self.quality = quality

    def __call__(self, img):
        return self.inner(jpeg_like_compress(img, self.quality))


def with_defense(inner, quality):
    return DefendedDetector(inner, quality)


class QuantizedDetector:
    """Rounds every query to 8 bits before ``inner`` sees it, like a PNG transport."""

    def __init__(self, inner):
        self.inner = inner

    def __call__(self, img):
        return self.inner(quantize(img))


class HTTPOracle:
    """Decision function backed by a ``/detect`` endpoint.

    Each call is one HTTP round trip. Timeouts and 5xx responses are retried
    ``retries`` times before raising :class:`TransportError`; a 422 response
    raises :class:`NoFaceDetected`.
    """

    def __init__(self, endpoint, timeout=5.0, retries=2, backoff=0.05):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def __call__(self, img):
        body = encode_png(img)
        req = urllib.request.Request(
            self.endpoint + "/detect", data=body, headers={"Content-Type": "image/png"}, method="POST"
        )
        last = None
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read())
                return Decision.FAKE if payload["label"] == "fake" else Decision.REAL
            except urllib.error.HTTPError as exc:
                if exc.code == 422:
                    raise NoFaceDetected("service could not find a face") from exc
                if exc.code < 500:
                    raise TransportError(f"/detect returned HTTP {exc.code}") from exc
                last = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
            if attempt < self.retries:
                time.sleep(self.backoff * (attempt + 1))
        raise TransportError(f"{self.endpoint}/detect unreachable after {self.retries + 1} attempts: {last}")


def http_oracle(endpoint, timeout=5.0, retries=2):
    return HTTPOracle(endpoint, timeout, retries)


def image_to_b64(img):
    return base64.b64encode(encode_png(img)).decode("ascii")
