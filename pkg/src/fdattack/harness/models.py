"""Training and persistence for the detector, embedder and frequency-statistics oracle."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import nn
from ..oracles import CNNDetector, FrequencyStatDetector
from .dataset import as_arrays, gen_dataset
from .experiments import PairSetSpec

logger = logging.getLogger(__name__)

DETECTOR_FILE = "detector.fdann"
EMBEDDER_FILE = "embedder.fdann"
FREQSTAT_FILE = "freqstat.json"


@dataclass(frozen=True)
class TrainSpec:
    data: PairSetSpec = field(default_factory=lambda: PairSetSpec(split=0))
    num_identities: int = 50
    images_per_identity: int = 2
    detector: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(epochs=15))
    embedder: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    freq_target_tpr: float = 0.95
    # zero-mean first-layer start for the embedder; None keeps a plain He start
    embedder_highpass_gain: float | None = 10.0
    # add a copy of each real face with uniform noise of this amplitude, labelled REAL
    detector_noise_aug: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.freq_target_tpr < 1.0:
            raise ValueError("freq_target_tpr must lie in (0, 1)")
        if self.detector_noise_aug < 0:
            raise ValueError("detector_noise_aug must be non-negative")


@dataclass
class ModelBundle:
    detector: nn.NetworkParams
    embedder: nn.NetworkParams
    freq_stat: FrequencyStatDetector

    def cnn(self, threshold=0.5):
        return CNNDetector(self.detector, threshold)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nn.save_network(self.detector, d / DETECTOR_FILE)
        nn.save_network(self.embedder, d / EMBEDDER_FILE)
        fs = self.freq_stat
        (d / FREQSTAT_FILE).write_text(
            json.dumps({"hf_threshold": fs.threshold_, "band_fraction": fs.band_fraction}, indent=2) + "\n"
        )
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        cfg = json.loads((d / FREQSTAT_FILE).read_text())
        fs = FrequencyStatDetector(hf_threshold=cfg["hf_threshold"], band_fraction=cfg["band_fraction"]).fit([], [])
        return cls(nn.load_network(d / DETECTOR_FILE), nn.load_network(d / EMBEDDER_FILE), fs)


def training_data(spec):
    """Stacked training images, labels and identities over all strengths."""
    xs, ys, ids = [], [], []
    for ds in spec.data.dataset_specs(spec.images_per_identity, spec.num_identities, split=spec.data.split):
        X, y, i = as_arrays(gen_dataset(ds))
        xs.append(X)
        ys.append(y)
        ids.append(i)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ids)


def train_models(spec=TrainSpec()):
    """Train the CNN detector and the face embedder, and calibrate the
    frequency-statistics threshold, all on the training split."""
    X, y, ids = training_data(spec)
    logger.info("training on %d images", len(X))
    Xd, yd = X, y
    if spec.detector_noise_aug > 0:
        rng = np.random.default_rng([spec.detector.seed, 7])
        reals = X[y == 0]
        noisy = np.clip(reals + rng.uniform(-spec.detector_noise_aug, spec.detector_noise_aug, reals.shape), 0.0, 1.0)
        Xd = np.concatenate([X, noisy])
        yd = np.concatenate([y, np.zeros(len(noisy), dtype=y.dtype)])
    det, hist = nn.train_detector(Xd, yd, spec.detector)
    logger.info("detector loss %.4f -> %.4f", hist[0], hist[-1])
    emb, hist = nn.train_embedder(X, ids, spec.embedder, highpass_gain=spec.embedder_highpass_gain)
    logger.info("embedder loss %.4f -> %.4f", hist[0], hist[-1])
    fs = FrequencyStatDetector(target_tpr=spec.freq_target_tpr).fit(X, y)
    return ModelBundle(det, emb, fs)
