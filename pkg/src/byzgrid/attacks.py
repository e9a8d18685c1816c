"""Byzantine fault injection on in-flight shared packets.

Corruption shifts the flow triple coherently, (P, Q, l) += (R, X, 1) * kappa,
so the receiver's balance-row contributions P - R*l and Q - X*l are exactly
unchanged: the injection is invisible to constraint-checking receivers.
"""

from dataclasses import dataclass

import numpy as np

from .errors import FieldError

FLOW_FIELDS = ("P", "Q", "l")


@dataclass(frozen=True)
class AttackScenario:
    kind: str                 # "static" | "dynamic"
    targets: tuple            # ((sender, receiver), ...) directed edges
    magnitude: float | tuple  # kappa-hat for static, (lo, hi) for dynamic
    period: int = 5
    seed: int = 0
    start_iter: int | None = 1   # None = never active
    stage: str = "x"

    def __post_init__(self):
        if self.kind not in ("static", "dynamic"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if not self.targets:
            raise ValueError("targets must be nonempty")
        if self.kind == "dynamic":
            lo, hi = self.magnitude
            if lo > hi:
                raise ValueError("dynamic magnitude needs lo <= hi")

    def active_at(self, k):
        if self.start_iter is None:
            return False
        return k >= self.start_iter and (k - self.start_iter) % self.period == 0


def _kappa(scenario, k, sender, receiver):
    if scenario.kind == "static":
        return float(scenario.magnitude)
    lo, hi = scenario.magnitude
    # per-(iteration, edge) stream: identical inputs give identical draws
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=scenario.seed,
                               spawn_key=(k, sender, receiver)))
    return float(rng.uniform(lo, hi))


def corrupt(packet, scenario, k, line):
    """Return the packet as delivered: corrupted when the scenario is active
    at iteration ``k`` on this packet's edge, untouched otherwise.

    The shift follows the correlated pattern: l += kappa, P += R*kappa,
    Q += X*kappa, with R, X taken from the sender's line.
    """
    if (packet.stage != scenario.stage
            or not scenario.active_at(k)
            or (packet.sender, packet.receiver) not in scenario.targets):
        return packet
    if any(f not in packet.payload for f in FLOW_FIELDS):
        raise FieldError(
            f"packet {packet.sender}->{packet.receiver} lacks flow fields")
    kap = _kappa(scenario, k, packet.sender, packet.receiver)
    payload = dict(packet.payload)
    payload["l"] = payload["l"] + kap
    payload["P"] = payload["P"] + line.r * kap
    payload["Q"] = payload["Q"] + line.x * kap
    return packet.replace_payload(payload)


def stealthiness_check(original, corrupted, line, tol=1e-9):
    """True when the corruption preserves the receiver-side linear power-flow
    relations: the balance-row contributions P - R*l and Q - X*l are unchanged
    (equivalently (dP)/R = (dQ)/X = dl).
    """
    dp = corrupted["P"] - original["P"]
    dq = corrupted["Q"] - original["Q"]
    dl = corrupted["l"] - original["l"]
    return (abs(dp - line.r * dl) <= tol) and (abs(dq - line.x * dl) <= tol)
