import numpy as np
import pytest

from ownverify.attack import AttackParams
from ownverify.desk import desk_model, desk_split
from ownverify.errors import OracleError
from ownverify.protocol import (CountingOracle, ExperimentReport, SampleRecord,
                                VerificationRequest, owner_verify, query,
                                run_separation_experiment, sample_cases, third_party_verify)


@pytest.fixture(scope="module")
def models():
    return desk_model("cnn-small", 1), desk_model("cnn-small", 2)


@pytest.fixture(scope="module")
def probe(models):
    owner, _ = models
    x = desk_split()[1].images[3]
    req = VerificationRequest(x, (owner.predict(x) + 2) % 10, 0.2)
    verdict, x_adv, trace = owner_verify(owner, owner, req)
    assert trace.converged
    return req, x_adv, verdict


class FixedOracle:
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def classify(self, x):
        return self.probs


def test_query_checks_distribution():
    assert query(FixedOracle([0.25, 0.75]), None)[1] == 0.75
    for bad in ([0.5, 0.6], [np.nan, 1.0], [1.0], [[0.5, 0.5]], [-0.1, 1.1]):
        with pytest.raises(OracleError):
            query(FixedOracle(bad), None)


def test_identical_model_is_recognised(probe):
    req, _, verdict = probe
    assert verdict.identical and verdict.d_prob <= 0.05 and verdict.attack_converged
    assert verdict.ssim > 0.9
    assert verdict.line().startswith("verdict identical=true d_prob=")


def test_sibling_model_is_rejected(probe, models):
    req, x_adv, _ = probe
    verdict = third_party_verify(x_adv, req, models[1])
    assert not verdict.identical and verdict.d_prob >= 0.5


def test_each_verification_queries_once(models):
    owner, _ = models
    x = desk_split()[1].images[5]
    suspect = CountingOracle(owner)
    req = VerificationRequest(x, (owner.predict(x) + 1) % 10, 0.3)
    owner_verify(owner, suspect, req, AttackParams(n_max=30))
    assert suspect.calls == 1


def test_third_party_flow(probe, models):
    req, x_adv, _ = probe
    counted = CountingOracle(models[0])
    v = third_party_verify(x_adv, req, counted)
    assert v.identical and counted.calls == 1
    # an unconverged claim never yields a positive verdict
    assert not third_party_verify(x_adv, req, models[0], owner_claims_converged=False).identical


def test_threshold_zero_rejects_everything_but_exact_hits(probe, models):
    req, x_adv, _ = probe
    v = third_party_verify(x_adv, req, models[0], threshold=0.0)
    assert v.identical == (v.d_prob == 0.0)


def test_out_of_range_target_class(probe):
    req, x_adv, _ = probe
    small = VerificationRequest(req.x, 5, 0.2)
    with pytest.raises(OracleError):
        third_party_verify(x_adv, small, FixedOracle([0.5, 0.5]))


def test_sampling_is_seeded(models):
    owner, _ = models
    data = desk_split()[1]
    a = sample_cases(owner, data, 10, [0.1, 0.2], seed=4)
    assert a == sample_cases(owner, data, 10, [0.1, 0.2], seed=4)
    assert a != sample_cases(owner, data, 10, [0.1, 0.2], seed=5)
    for idx, c, cp, pt in a:
        assert c == owner.predict(data.images[idx]) and cp != c and pt in (0.1, 0.2)


def test_single_image_experiment(models):
    owner, other = models
    suspects = [CountingOracle(owner), CountingOracle(other)]
    report = run_separation_experiment(owner, suspects, desk_split()[1], n_images=1,
                                       attack_params=AttackParams(n_max=40), seed=1,
                                       owner_name="o", suspect_names=["same", "other"])
    assert [s.calls for s in suspects] == [1, 1]
    assert report.pairs() == [("o", "same"), ("o", "other")]
    assert len(report.records) == 2


def test_worker_count_does_not_change_report(models):
    owner, other = models
    kw = dict(n_images=4, attack_params=AttackParams(n_max=30), seed=2, owner_name="o",
              suspect_names=["a", "b"])
    data = desk_split()[1]
    one = run_separation_experiment(owner, [owner, other], data, workers=1, **kw)
    two = run_separation_experiment(owner, [owner, other], data, workers=2, **kw)
    assert one.histogram_csv() == two.histogram_csv() and one.heatmap_csv() == two.heatmap_csv()


def record(d, suspect="s"):
    return SampleRecord("o", suspect, 0, 0, 1, 0.2, 0.2, d, True, 0.99, True)


def test_histogram_bins_and_overflow():
    report = ExperimentReport([record(d) for d in (0.0, 0.049, 0.05, 0.99, 1.0, 3.0)])
    rows = report.histogram_rows(0.05)
    assert len(rows) == 21
    counts = {(lo, hi): n for lo, hi, n, _ in rows}
    assert counts[(0.0, 0.05)] == 2 and counts[(0.05, 0.1)] == 1
    assert counts[(0.95, 1.0)] == 1 and counts[(1.0, float("inf"))] == 2
    assert sum(counts.values()) == 6
    assert report.histogram_csv().splitlines()[0] == "d_prob_bin_low,d_prob_bin_high,count,pair_label"


def test_heatmap_rows():
    report = ExperimentReport([record(0.0), record(0.1), record(1.0, "t")])
    assert report.heatmap_rows() == [("o", "s", pytest.approx(0.05), 2), ("o", "t", 1.0, 1)]
    assert report.heatmap_csv().splitlines()[0] == "owner_model,suspect_model,mean_d_prob,n"
    assert "pair owner=o suspect=s n=2" in report.summary()
