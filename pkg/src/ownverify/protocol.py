"""Ownership verification against a gray-box suspect.

Two flows are supported.  In the owner flow the owner holds the original
network, crafts the probe image, queries the suspect once and judges the
answer.  In the third-party flow a verifier picks (image, target class,
target probability), receives the probe image from the owner out-of-band,
and judges the suspect's answer without ever touching the owner's network.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .attack import AttackParams, generate_ifdgsm, make_request
from .errors import OracleError
from .metrics import SsimParams, prob_distance, ssim
from .network import Network

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_SSIM_FLOOR = 0.95
TABLE_P_TARGETS = (0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4)


@runtime_checkable
class GrayBoxOracle(Protocol):
    def classify(self, x: np.ndarray) -> np.ndarray: ...


class CountingOracle:
    """Wraps an oracle and counts classify calls."""

    def __init__(self, inner: GrayBoxOracle):
        self.inner = inner
        self.calls = 0

    def classify(self, x):
        self.calls += 1
        return self.inner.classify(x)


def query(oracle: GrayBoxOracle, x: np.ndarray) -> np.ndarray:
    """One classify call, with the response checked for being a distribution."""
    p = np.asarray(oracle.classify(x), dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise OracleError(f"oracle returned shape {p.shape}, expected a probability vector")
    if not np.isfinite(p).all() or p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
        raise OracleError("oracle response is not a probability distribution")
    return p


@dataclass(frozen=True)
class VerificationRequest:
    x: np.ndarray
    c_prime: int
    p_target: float

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must lie in (0, 1)")


@dataclass(frozen=True)
class Verdict:
    d_prob: float
    threshold: float
    identical: bool
    ssim: float
    attack_converged: bool
    p_observed: float
    ssim_floor: float = DEFAULT_SSIM_FLOOR

    @property
    def ssim_flagged(self) -> bool:
        return self.ssim < self.ssim_floor

    def line(self) -> str:
        return (f"verdict identical={str(self.identical).lower()} d_prob={self.d_prob!r} "
                f"ssim={self.ssim!r} converged={str(self.attack_converged).lower()}")


def judge(request: VerificationRequest, adv_image: np.ndarray, suspect: GrayBoxOracle,
          threshold: float, converged: bool, ssim_floor: float = DEFAULT_SSIM_FLOOR,
          ssim_params: SsimParams = SsimParams()) -> Verdict:
    """Query the suspect once with the probe image and score the answer."""
    p = query(suspect, adv_image)
    if not 0 <= request.c_prime < p.size:
        raise OracleError(f"oracle returned {p.size} classes; c'={request.c_prime} is out of range")
    observed = float(p[request.c_prime])
    d = prob_distance(request.p_target, observed)
    score = ssim(request.x, adv_image, ssim_params)
    verdict = Verdict(d, threshold, bool(d <= threshold and converged), score, bool(converged),
                      observed, ssim_floor)
    if verdict.ssim_flagged:
        log.warning("probe image SSIM %.4f is below the floor %.4f", score, ssim_floor)
    return verdict


def owner_verify(owner_model: Network, suspect: GrayBoxOracle, request: VerificationRequest,
                 attack_params: AttackParams = AttackParams(),
                 threshold: float = DEFAULT_THRESHOLD,
                 ssim_floor: float = DEFAULT_SSIM_FLOOR):
    """Craft the probe on the owner's model, query the suspect once, decide.

    Returns ``(verdict, adv_image, trace)``.  Non-convergence of the attack is
    reported in the verdict (``identical`` is then False), not raised.
    """
    attack_request = make_request(owner_model, request.x, request.c_prime, request.p_target)
    x_adv, trace = generate_ifdgsm(attack_request, owner_model, attack_params)
    verdict = judge(request, x_adv, suspect, threshold, trace.converged, ssim_floor)
    return verdict, x_adv, trace


def third_party_verify(adv_image: np.ndarray, request: VerificationRequest,
                       suspect: GrayBoxOracle, threshold: float = DEFAULT_THRESHOLD,
                       owner_claims_converged: bool = True,
                       ssim_floor: float = DEFAULT_SSIM_FLOOR) -> Verdict:
    """Judge an owner-supplied probe image; the owner's convergence claim is echoed as-is."""
    adv_image = np.asarray(adv_image, dtype=np.float64)
    return judge(request, adv_image, suspect, threshold, owner_claims_converged, ssim_floor)


# --------------------------------------------------------------------------
# batch experiment
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    owner: str
    suspect: str
    image_index: int
    c: int
    c_prime: int
    p_target: float
    p_observed: float
    d_prob: float
    converged: bool
    ssim: float
    source_dominant: bool


@dataclass
class ExperimentReport:
    records: list = field(default_factory=list)
    threshold: float = DEFAULT_THRESHOLD

    def extend(self, other: "ExperimentReport") -> "ExperimentReport":
        self.records.extend(other.records)
        return self

    def pairs(self) -> list[tuple[str, str]]:
        seen = {}
        for r in self.records:
            seen.setdefault((r.owner, r.suspect), None)
        return list(seen)

    def d_probs(self, owner: str, suspect: str) -> np.ndarray:
        return np.array([r.d_prob for r in self.records
                         if r.owner == owner and r.suspect == suspect])

    def mean_d_prob(self, owner: str, suspect: str) -> float:
        return float(self.d_probs(owner, suspect).mean())

    def heatmap_rows(self) -> list[tuple[str, str, float, int]]:
        return [(o, s, self.mean_d_prob(o, s), len(self.d_probs(o, s))) for o, s in self.pairs()]

    def histogram_rows(self, bin_width: float = 0.05, top: float = 1.0):
        """(low, high, count, label) rows; the last bin [top, inf) catches overshoot."""
        n_bins = int(round(top / bin_width))
        edges = [i * bin_width for i in range(n_bins + 1)] + [math.inf]
        rows = []
        for o, s in self.pairs():
            d = self.d_probs(o, s)
            # bins are [low, high)
            slot = np.searchsorted(np.array(edges[:-1]), d, side="right") - 1
            counts = np.bincount(slot, minlength=n_bins + 1)
            for lo, hi, n in zip(edges[:-1], edges[1:], counts):
                rows.append((round(lo, 10), round(hi, 10), int(n), f"{o}->{s}"))
        return rows

    def histogram_csv(self, bin_width: float = 0.05) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["d_prob_bin_low", "d_prob_bin_high", "count", "pair_label"])
        for lo, hi, n, label in self.histogram_rows(bin_width):
            w.writerow([repr(lo), "inf" if hi == math.inf else repr(hi), n, label])
        return buf.getvalue()

    def heatmap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["owner_model", "suspect_model", "mean_d_prob", "n"])
        for o, s, mean, n in self.heatmap_rows():
            w.writerow([o, s, repr(mean), n])
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        for o, s in self.pairs():
            recs = [r for r in self.records if r.owner == o and r.suspect == s]
            d = np.array([r.d_prob for r in recs])
            conv = [r for r in recs if r.converged]
            lines.append(
                f"pair owner={o} suspect={s} n={len(recs)} mean_d_prob={d.mean():.6f} "
                f"median_d_prob={np.median(d):.6f} min_d_prob={d.min():.6f} "
                f"max_d_prob={d.max():.6f} below_threshold={np.mean(d <= self.threshold):.4f} "
                f"converged={len(conv) / len(recs):.4f} "
                f"source_dominant={np.mean([r.source_dominant for r in conv]) if conv else 0:.4f} "
                f"mean_ssim={np.mean([r.ssim for r in recs]):.6f}")
        return "\n".join(lines) + "\n"


def _oracle_name(oracle, index: int) -> str:
    for attr in ("name", "provenance"):
        value = getattr(oracle, attr, None)
        if value:
            return str(value)
    return f"suspect{index}"


def sample_cases(owner_model: Network, dataset, n_images: int, p_target_pool, seed: int):
    """Draw (image index, c, c', p_target) tuples, c' uniform over classes other than c."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if n_images < 1:
        raise ValueError("n_images must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = min(n_images, len(dataset))
    indices = rng.choice(len(dataset), size=n, replace=False)
    pool = list(p_target_pool)
    cases = []
    for idx in indices:
        c = owner_model.predict(dataset.images[idx])
        others = [j for j in range(owner_model.num_classes) if j != c]
        cases.append((int(idx), c, int(others[rng.integers(len(others))]),
                      float(pool[rng.integers(len(pool))])))
    return cases


def run_separation_experiment(owner_model: Network, suspects, dataset, n_images: int = 100,
                              p_target_pool=TABLE_P_TARGETS,
                              attack_params: AttackParams = AttackParams(), seed: int = 0,
                              owner_name: str | None = None, suspect_names=None,
                              workers: int = 1,
                              threshold: float = DEFAULT_THRESHOLD) -> ExperimentReport:
    """Attack ``n_images`` sampled images on the owner model and score every suspect.

    Each suspect receives exactly one query per image.  Attacks may run on a
    thread pool; results are assembled in sampling order, so the report does
    not depend on ``workers``.
    """
    suspects = list(suspects)
    names = list(suspect_names) if suspect_names else [
        _oracle_name(s, i) for i, s in enumerate(suspects)]
    if len(names) != len(suspects):
        raise ValueError("one name per suspect required")
    owner_name = owner_name or owner_model.provenance or "owner"
    cases = sample_cases(owner_model, dataset, n_images, p_target_pool, seed)

    def attack(case):
        idx, _, cp, pt = case
        req = make_request(owner_model, dataset.images[idx], cp, pt)
        return generate_ifdgsm(req, owner_model, attack_params)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(attack, cases))
    else:
        results = [attack(case) for case in cases]

    report = ExperimentReport(threshold=threshold)
    for (idx, c, cp, pt), (x_adv, trace) in zip(cases, results):
        x = dataset.images[idx]
        score = ssim(x, x_adv)
        dominant = bool(np.argmax(trace.final_probs) == c)
        for name, suspect in zip(names, suspects):
            observed = float(query(suspect, x_adv)[cp])
            report.records.append(SampleRecord(
                owner_name, name, idx, c, cp, pt, observed, prob_distance(pt, observed),
                trace.converged, score, dominant))
    return report
