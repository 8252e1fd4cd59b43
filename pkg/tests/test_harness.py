import csv
import json
import math

import numpy as np
import pytest

from fdattack import nn
from fdattack.attacks.core import AttackConfig
from fdattack.harness.dataset import FAKE, REAL, Sample, SyntheticDatasetSpec, as_arrays, fake_pairs, gen_dataset
from fdattack.harness.experiments import (
    ExperimentConfig,
    PairSetSpec,
    ROW_FIELDS,
    curve_rows,
    emit_report,
    make_pairs,
    metrics_from_outcomes,
    paired_sign_test,
    rsr_eval,
    run_experiment,
    summarize,
    transfer_eval,
    trial_seed,
    write_traces,
)
from fdattack.oracles import Decision

SMALL = SyntheticDatasetSpec(num_identities=3, images_per_identity=2, size=(16, 16, 3), forgery_kind="mixed")


class TestDataset:
    def test_deterministic(self):
        a, b = gen_dataset(SMALL), gen_dataset(SMALL)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)

    def test_pairing(self):
        samples = gen_dataset(SMALL)
        assert len(samples) == 12
        for fake, real in fake_pairs(samples):
            assert fake.label == FAKE and real.label == REAL
            assert fake.identity_id == real.identity_id

    def test_fake_is_real_plus_bounded_artifact(self):
        spec = SyntheticDatasetSpec(2, 1, (16, 16, 3), "patch_noise", 0.05)
        for fake, real in fake_pairs(gen_dataset(spec)):
            diff = fake.image - real.image
            assert np.abs(diff).max() <= 0.05 + 1e-12 and np.abs(diff).max() > 0

    def test_split_changes_images_not_identities(self):
        a = gen_dataset(SMALL)
        b = gen_dataset(SyntheticDatasetSpec(3, 2, (16, 16, 3), "mixed", split=1))
        assert [s.identity_id for s in a] == [s.identity_id for s in b]
        assert not np.array_equal(a[0].image, b[0].image)

    def test_reenactment_offsets_source(self):
        spec = SyntheticDatasetSpec(2, 1, (16, 16, 3), "patch_noise", 0.05, reenact_jitter=1.0)
        fake, real = fake_pairs(gen_dataset(spec))[0]
        assert np.abs(fake.image - real.image).max() > 0.05

    def test_images_in_range(self):
        X, y, ids = as_arrays(gen_dataset(SMALL))
        assert X.shape == (12, 16, 16, 3) and X.min() >= 0 and X.max() <= 1
        assert set(y) == {0, 1} and set(ids) == {0, 1, 2}

    @pytest.mark.parametrize(
        "kw", [dict(num_identities=0), dict(forgery_kind="gan"), dict(artifact_strength=0), dict(size=(8, 8, 2))]
    )
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(**kw)

    def test_fake_needs_pair(self):
        with pytest.raises(ValueError):
            Sample(np.zeros((2, 2, 1)), FAKE, 0)


class TestMetrics:
    def test_fixture(self):
        m = metrics_from_outcomes([(True, 10), (True, 30), (False, 10_000)])
        assert m.asr == pytest.approx(2 / 3) and m.aq == 20 and m.mq == 20

    def test_no_successes(self):
        m = metrics_from_outcomes([(False, 5), (False, 7)])
        assert m.asr == 0 and m.aq is None and m.mq is None

    def test_median_odd_and_even(self):
        assert metrics_from_outcomes([(True, 12), (True, 40), (True, 14)]).mq == 14
        assert metrics_from_outcomes([(True, 12), (True, 40), (True, 14), (True, 16)]).mq == 15

    def test_queries_censoring(self):
        m = metrics_from_outcomes([(True, 12), (False, 99)])
        assert list(m.queries()) == [12, math.inf]
        assert list(m.queries(censor=100)) == [12, 100]

    def test_sign_test(self):
        r = paired_sign_test([1] * 10 + [5, 5], [2] * 10 + [5, 4])
        assert (r.less, r.greater, r.ties) == (10, 1, 1)
        assert r.significant() and r.p_value == pytest.approx(12 / 2048)
        assert paired_sign_test([1, 1], [1, 1]).p_value == 1.0
        with pytest.raises(ValueError):
            paired_sign_test([1], [1, 2])

    def test_seed_derivation(self):
        assert trial_seed(0, 1) == trial_seed(0, 1) != trial_seed(0, 2)


def _tiny_nets(shape=(16, 16, 3)):
    emb = nn.init_network(nn.EMBEDDER_LAYERS, shape, 6, np.random.default_rng(0))
    return emb


class Mean:
    def __init__(self, b):
        self.b = b

    def __call__(self, img):
        return Decision.FAKE if float(np.mean(img)) > self.b else Decision.REAL


@pytest.fixture
def pairs():
    spec = PairSetSpec(strengths=(0.05,), pairs_per_strength=4, size=(16, 16, 3), reenact_jitter=1.0)
    return make_pairs(spec)


class TestExperiment:
    def test_make_pairs(self, pairs):
        assert len(pairs) == 4
        assert all(p.strength == 0.05 for p in pairs)

    def test_run_and_reports(self, pairs, tmp_path):
        # a detector that flags anything brighter than the dimmest fake
        thr = min(float(np.mean(p.fake)) for p in pairs) - 1e-3
        det = Mean(thr)
        emb = _tiny_nets()
        cfg = ExperimentConfig(init="real", attack=AttackConfig(max_queries=300))
        rep = run_experiment(pairs, det, emb, cfg)
        assert rep.num_trials == 4 and rep.asr * 4 == int(rep.asr * 4)
        for row, trace in zip(rep.rows, rep.traces):
            assert row["queries"] == trace.records[-1].query_count
        # reports
        paths = emit_report(rep, "json", tmp_path / "r.json")
        data = json.loads(paths[0].read_text())
        assert data["aggregate"]["num_trials"] == 4
        assert [list(r) for r in data["rows"]] == [sorted(ROW_FIELDS)] * 4
        paths = emit_report(rep, "csv", tmp_path / "r.csv")
        rows = list(csv.reader(paths[0].open()))
        assert tuple(rows[0]) == ROW_FIELDS and len(rows) == 5
        curves = list(csv.reader(paths[1].open()))[1:]
        by_trial = {}
        for t, q, _ in curves:
            by_trial.setdefault(t, []).append(int(q))
        assert all(q == sorted(q) for q in by_trial.values())
        assert len(curve_rows(rep)) == len(curves)
        write_traces(rep, tmp_path / "t.jsonl")
        lines = (tmp_path / "t.jsonl").read_text().splitlines()
        assert len(lines) == sum(len(t) for t in rep.traces)
        with pytest.raises(ValueError):
            emit_report(rep, "xml", tmp_path / "r.xml")

    def test_workers_match_serial(self, pairs):
        thr = min(float(np.mean(p.fake)) for p in pairs) - 1e-3
        cfg = ExperimentConfig(init="real", attack=AttackConfig(max_queries=200))
        a = run_experiment(pairs, Mean(thr), None, cfg)
        b = run_experiment(pairs, Mean(thr), None, ExperimentConfig(init="real", attack=AttackConfig(max_queries=200), workers=2))
        assert a.rows == b.rows

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(domain="wavelet")
        with pytest.raises(ValueError):
            ExperimentConfig(init="noise")


class TestRSRAndTransfer:
    def test_identity_recognized(self, rng):
        emb = _tiny_nets()
        x = rng.uniform(0, 1, (16, 16, 3))
        assert rsr_eval(x, x, emb)

    def test_degenerate(self, rng):
        emb = nn.init_network(nn.EMBEDDER_LAYERS, (16, 16, 3), 6, rng, scale=0.0)
        x = rng.uniform(0, 1, (16, 16, 3))
        assert rsr_eval(x, x, emb, return_degenerate=True) == (False, True)

    def test_self_transfer(self, rng):
        det = Mean(0.5)
        adv = [np.full((4, 4, 1), 0.2), np.full((4, 4, 1), 0.3), None]
        rep = transfer_eval(adv, det, clean_fakes=[np.full((4, 4, 1), 0.9)])
        assert rep.transfer_rate == 1.0 and rep.clean_real_rate == 0.0
        assert rep.num_adversarial == 2 and rep.num_clean == 1
        assert transfer_eval([], det).transfer_rate is None


def test_summarize_quality_over_successes():
    rows = [
        dict.fromkeys(ROW_FIELDS) | dict(success=True, queries=12, mse=1.0, psnr_db=40.0, ssim=0.9, recognized=True),
        dict.fromkeys(ROW_FIELDS) | dict(success=True, queries=14, mse=3.0, psnr_db=math.inf, ssim=0.7, recognized=False),
        dict.fromkeys(ROW_FIELDS) | dict(success=False, queries=99),
    ]
    asr, aq, mq, qual, rsr = summarize(rows)
    assert qual == {"mse": 2.0, "psnr_db": 40.0, "ssim": pytest.approx(0.8)}
    assert rsr == 0.5 and aq == 13
