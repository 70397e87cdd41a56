"""Targeted sign-gradient attacks: plain iterative FGSM and the dual-gradient
controller that pins the target-class probability to a requested value."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NonFiniteError, ShapeError
from .network import Network

log = logging.getLogger(__name__)

TRACE_HEADER = ["N", "p_c", "p_cprime", "beta_c", "beta_cprime", "alpha_com"]


@dataclass(frozen=True)
class AttackParams:
    """Attack controls (step sizes, budget, averaging interval, tolerance)."""

    epsilon: float = 0.05
    alpha_target: float = 5e-4
    alpha_com: float = 1e-3
    beta_c: int = 1
    beta_cprime: int = 1
    l: int = 5
    t_diff: float = 5e-3
    n_max: int = 1000
    alpha_floor: float = 1e-10

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (self.alpha_target > 0 and self.alpha_com > 0):
            raise ValueError("step sizes must be positive")
        if self.l < 1:
            raise ValueError("averaging interval l must be >= 1")
        if not 0 < self.t_diff < 1:
            raise ValueError("t_diff must lie in (0, 1)")
        if self.beta_c < 1 or self.beta_cprime < 1:
            raise ValueError("beta coefficients start at >= 1")
        if not self.alpha_floor > 0:
            raise ValueError("alpha_floor must be positive")
        if self.n_max < 0:
            raise ValueError("n_max must be non-negative")


@dataclass(frozen=True)
class AttackRequest:
    x: np.ndarray
    c: int
    c_prime: int
    p_target: float

    def __post_init__(self):
        T.check_image(self.x)
        if self.c == self.c_prime:
            raise ValueError("target class must differ from the source class")
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must lie in (0, 1)")
        if self.p_target >= 0.5:
            warnings.warn(f"p_target={self.p_target} >= 0.5: the source class cannot stay "
                          "the argmax", stacklevel=3)

    def check_against(self, model: Network) -> None:
        k = model.num_classes
        if not (0 <= self.c < k and 0 <= self.c_prime < k):
            raise IndexError(f"class index outside [0, {k})")
        predicted = model.predict(self.x)
        if predicted != self.c:
            raise ValueError(f"source class {self.c} is not the model's argmax ({predicted})")


def make_request(model: Network, x: np.ndarray, c_prime: int, p_target: float) -> AttackRequest:
    """Build a request whose source class is the model's own prediction on x."""
    req = AttackRequest(np.asarray(x, dtype=np.float64), model.predict(x), int(c_prime),
                        float(p_target))
    req.check_against(model)
    return req


@dataclass(frozen=True)
class TraceRecord:
    n: int
    p_c: float
    p_cprime: float
    beta_c: float
    beta_cprime: float
    alpha_com: float
    zero_sign_fraction: float = 0.0


@dataclass
class AttackTrace:
    """Per-iteration probabilities and control values.

    Each record holds the probabilities of the iterate produced at step N and
    the controls that produced it (i.e. before any checkpoint update at N).
    """

    records: list = field(default_factory=list)
    converged: bool = False
    final_probs: np.ndarray | None = None
    final_mean_p_cprime: float | None = None

    @property
    def iterations_used(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.records:
            w.writerow([r.n, repr(r.p_c), repr(r.p_cprime), r.beta_c, r.beta_cprime,
                        repr(r.alpha_com)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _checked(x: np.ndarray, n: int) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite adversarial image at iteration {n}")
    return x


def ifgsm_step(x_adv, x, model: Network, c_prime: int, alpha: float, epsilon: float):
    """x_adv - alpha * sign(grad C(x_adv, c')), clipped to the epsilon ball around x."""
    if x_adv.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    _, (g,) = model.input_gradients(x_adv, [c_prime])
    return T.clip_ball(x_adv - alpha * T.sign(g), x, epsilon)


def combined_gradient(model: Network, x_adv, c: int, c_prime: int, beta_c, beta_cprime):
    """beta_c * grad C(x, c) + beta_c' * grad C(x, c'), the pre-sign direction."""
    _, (gc, gp) = model.input_gradients(x_adv, [c, c_prime])
    return beta_c * gc + beta_cprime * gp


def ifdgsm_step(x_adv, x, model: Network, c: int, c_prime: int, alpha_com: float,
                beta_c, beta_cprime, epsilon: float):
    if x_adv.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    if c == c_prime:
        raise ValueError("c and c' must differ")
    direction = combined_gradient(model, x_adv, c, c_prime, beta_c, beta_cprime)
    return T.clip_ball(x_adv - alpha_com * T.sign(direction), x, epsilon)


def generate_ifgsm(request: AttackRequest, model: Network, params: AttackParams = AttackParams()):
    """Baseline: n_max targeted steps toward c' with no probability control."""
    request.check_against(model)
    x = request.x
    x_adv = x.copy()
    trace = AttackTrace()
    p, (g,) = model.input_gradients(x_adv, [request.c_prime])
    for n in range(1, params.n_max + 1):
        x_adv = _checked(T.clip_ball(x_adv - params.alpha_target * T.sign(g), x,
                                     params.epsilon), n)
        p, (g,) = model.input_gradients(x_adv, [request.c_prime])
        trace.records.append(TraceRecord(n, float(p[request.c]), float(p[request.c_prime]),
                                         0, 1, params.alpha_target))
    trace.final_probs = p
    return x_adv, trace


def generate_ifdgsm(request: AttackRequest, model: Network, params: AttackParams = AttackParams()):
    """Steer p(c') of ``model`` to ``request.p_target`` while pushing p(c) up too.

    Every ``l`` iterations the mean probability vector over the last ``l``
    iterates decides which gradient coefficient is bumped (beta_c' if the
    target is undershot beyond the tolerance, beta_c otherwise); a mean
    strictly inside the tolerance band halves the step.  The run converges
    once the step falls below ``alpha_floor``; otherwise it stops at n_max
    and returns the last iterate with ``converged=False``.
    """
    request.check_against(model)
    x, c, cp, target = request.x, request.c, request.c_prime, request.p_target
    lo, hi = (1 - params.t_diff) * target, (1 + params.t_diff) * target
    alpha, beta_c, beta_cp = params.alpha_com, params.beta_c, params.beta_cprime
    x_adv = x.copy()
    trace = AttackTrace()
    window = []
    # one forward per iteration: the pass that yields p at x_N also feeds step N+1
    p, (gc, gp) = model.input_gradients(x_adv, [c, cp])
    for n in range(1, params.n_max + 1):
        s = T.sign(beta_c * gc + beta_cp * gp)
        x_adv = _checked(T.clip_ball(x_adv - alpha * s, x, params.epsilon), n)
        p, (gc, gp) = model.input_gradients(x_adv, [c, cp])
        trace.records.append(TraceRecord(n, float(p[c]), float(p[cp]), beta_c, beta_cp, alpha,
                                         float(np.mean(s == 0))))
        window.append(p)
        if n % params.l:
            continue
        mean_cp = float(np.mean(window[-params.l:], axis=0)[cp])
        window.clear()
        trace.final_mean_p_cprime = mean_cp
        if mean_cp < lo:
            beta_cp += 1
        else:
            beta_c += 1
        if lo < mean_cp < hi:
            alpha *= 0.5
        if alpha < params.alpha_floor:
            trace.converged = True
            break
    trace.final_probs = p
    if trace.records:
        zeros = [r.zero_sign_fraction for r in trace.records]
        log.debug("attack %d->%d: zero entries in the combined sign, mean %.4f max %.4f",
                  c, cp, float(np.mean(zeros)), max(zeros))
    if not trace.converged:
        log.info("attack %d->%d (target %.3f) hit n_max=%d without converging",
                 c, cp, target, params.n_max)
    return x_adv, trace
