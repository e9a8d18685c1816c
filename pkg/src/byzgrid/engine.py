"""Synchronous distributed market clearing with Byzantine-fault hooks.

Each iteration runs barrier-synchronized stages: every agent solves its local
subproblem, shares fresh values and duals with the neighbors that duplicate
them, the message bus applies any scheduled corruption, receivers screen the
shared data (when the detector is on) and may substitute forecasts, every
agent projects its duplicated stack onto its coupling rows, copies flow back
to their owners, and duals advance.  Stopping is on summed primal/dual
consensus residuals.
"""

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .attacks import corrupt
from .detector import (DetectorHyper, DetectorModel, StreamWindow,
                       build_spatial_relation, build_window, detect,
                       fit_update, forecast, mitigate)
from .errors import ConfigError
from .localsolver import AgentSolver, precompute_y_kernel, solve_y
from .errors import FieldError
from .market import L_FLOW, P_FLOW, Q_FLOW, V, assemble, outcome


@dataclass
class RunSettings:
    eta: float = 1.0
    varpi1: float = 1e-4
    varpi2: float = 1e-4
    k_max: int = 500
    seed: int = 0
    utility: str = "aggregate"
    upsilon: float = 1.0
    detector: DetectorHyper = field(default_factory=DetectorHyper)
    detect_stages: tuple = ("x",)
    inner_tol: float = 1e-8
    inner_max_iter: int = 5000
    dyk_tol: float = 1e-10
    dyk_max_iter: int = 2000

    def validate(self):
        if self.varpi1 <= 0 or self.varpi2 <= 0:
            raise ConfigError("stopping tolerances must be positive")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if not 0.0 <= self.upsilon <= 1.0:
            raise ConfigError("upsilon must lie in [0, 1]")
        for st in self.detect_stages:
            if st not in ("x", "y"):
                raise ConfigError(f"unknown detect stage {st!r}")
        self.detector.validate()


@dataclass
class SharedPacket:
    sender: int
    receiver: int
    stage: str      # "x" | "y"
    payload: dict   # named scalar fields
    iteration: int

    def replace_payload(self, payload):
        return SharedPacket(self.sender, self.receiver, self.stage, payload,
                            self.iteration)


@dataclass(frozen=True)
class Residuals:
    primal: float
    dual: float


@dataclass(frozen=True)
class TheoremReport:
    agents: tuple
    cond1: np.ndarray
    cond2: np.ndarray
    satisfied1: np.ndarray
    satisfied2: np.ndarray

    @property
    def all_satisfied(self):
        return bool(np.all(self.satisfied1) and np.all(self.satisfied2))


def check_theorem1(eta, lam, delta, q_inv_norm, upsilon, agents=None):
    """Evaluate both convergence conditions exactly as stated.

    cond1 = U*eta/2 - 2*||Q^-1||^2*lam^2/eta,
    cond2 = U*(delta+eta)/2 - 2*eta*lam^2; satisfied iff value > 0.
    """
    eta = np.atleast_1d(np.asarray(eta, float))
    lam = np.broadcast_to(np.asarray(lam, float), eta.shape).astype(float)
    delta = np.broadcast_to(np.asarray(delta, float), eta.shape).astype(float)
    qin = np.broadcast_to(np.asarray(q_inv_norm, float), eta.shape).astype(float)
    if np.any(eta < 0) or np.any(lam < 0) or np.any(delta < 0) or np.any(qin < 0):
        raise ValueError("theorem inputs must be nonnegative")
    if not 0.0 <= upsilon <= 1.0:
        raise ValueError("upsilon must lie in [0, 1]")
    cond1 = upsilon * eta / 2.0 - 2.0 * qin ** 2 * lam ** 2 / eta
    cond2 = upsilon * (delta + eta) / 2.0 - 2.0 * eta * lam ** 2
    if agents is None:
        agents = tuple(range(eta.shape[0]))
    return TheoremReport(agents=tuple(agents), cond1=cond1, cond2=cond2,
                         satisfied1=cond1 > 0, satisfied2=cond2 > 0)


@dataclass
class AgentState:
    """One agent's iterate: local vector, the copies of it held elsewhere,
    the matching duals, and recent shared-packet history for the detector."""
    x: np.ndarray
    y_copies: dict          # holder id ('self' uses the agent's own id) -> vec
    mu: dict                # same keys
    history: dict = field(default_factory=dict)   # stage -> list of vectors


class _StageDetector:
    def __init__(self, hyper, spatial, labels, n_channels, n_received):
        self.hyper = hyper
        self.labels = labels
        self.n_received = n_received
        self.model = DetectorModel(hyper=hyper, spatial=spatial,
                                   n_channels=n_channels,
                                   n_received=n_received)
        self.history = []
        self.prev_chosen = deque(maxlen=2)
        self.pending = None
        self.flags = 0

    def process(self, k, received_full):
        """Screen this iteration's received channel vector; returns
        (chosen received part, gamma, prediction error, source)."""
        hyper = self.hyper
        nr = self.n_received
        r = received_full[:nr].copy()
        gamma, err, source, chosen = 0, math.nan, "received", r
        active = self.pending is not None and k > hyper.L + hyper.grace
        if active:
            pred_r = self.pending[:nr]
            err = float(np.linalg.norm(r - pred_r))
            gamma = detect(r, pred_r, hyper.phi)
            if gamma == 1:
                if len(self.prev_chosen) == 2:
                    out = mitigate(pred_r, self.prev_chosen[-1],
                                   self.prev_chosen[-2], hyper.lam)
                    chosen, source = out.chosen, out.source
                else:
                    chosen, source = pred_r.copy(), "predicted"
                self.flags += 1
        full = received_full.copy()
        full[:nr] = chosen
        self.history.append(full)
        self.prev_chosen.append(np.asarray(chosen, float))
        self.pending = None
        if len(self.history) >= hyper.L:
            window = StreamWindow(signals=self.labels,
                                  data=build_window(self.history, hyper.L))
            self.model = fit_update(self.model, window)
            self.pending = forecast(self.model)
            if len(self.history) > 4 * hyper.L:
                del self.history[:-2 * hyper.L]
        return chosen, gamma, err, source


class _AgentRuntime:
    def __init__(self, problem, settings):
        self.problem = problem
        d = problem.dim
        # holder keys are relation-tagged: one neighbor can hold several
        # component groups (a parent that is also a trading partner)
        self.holders = [("self", np.arange(d))]
        if problem.parent is not None:
            self.holders.append(("parent", np.array([P_FLOW, Q_FLOW, L_FLOW])))
        for c in problem.children:
            self.holders.append((("child", c), np.array([V])))
        for s in problem.partners:
            self.holders.append((("partner", s), np.array([problem.e_index(s)])))
        counts = np.zeros(d)
        for _, idx in self.holders:
            counts[idx] += 1.0
        self.counts = counts
        self.solver = AgentSolver(problem, settings.eta, counts)
        self.ykernel = precompute_y_kernel(problem.coupling, settings.eta)
        self.spos = {(c.owner, c.fld): k for k, c in enumerate(problem.stack)}

        # flat start: nominal voltage, zero injections/flows/trades, clipped
        # into the boxes; keeps early iterates off the problem's flat ridges
        lo, hi = problem.box_lo, problem.box_hi
        x0 = np.zeros(d)
        x0[V] = 1.0
        x0 = np.clip(x0, lo, hi)
        self.state = AgentState(
            x=x0,
            y_copies={h: x0[idx].copy() for h, idx in self.holders},
            mu={h: np.zeros(idx.shape[0]) for h, idx in self.holders})
        self.y_prev = {h: v.copy() for h, v in self.state.y_copies.items()}
        self.warm = None
        self.stack_vals = np.zeros(len(problem.stack))
        self.detectors = {}
        self.nonconverged = 0

    def x_targets(self):
        eta = self.solver.eta
        return [(idx, self.state.y_copies[h] - self.state.mu[h] / eta)
                for h, idx in self.holders]


def _x_stage_packets(agents, k):
    packets = []
    for i in sorted(agents):
        rt = agents[i]
        x = rt.state.x
        mu = rt.state.mu
        p = rt.problem
        payloads = {}
        if p.parent is not None:
            m = mu["parent"]
            payloads.setdefault(p.parent, {}).update({
                "P": float(x[P_FLOW]), "Q": float(x[Q_FLOW]),
                "l": float(x[L_FLOW]), "mu_P": float(m[0]),
                "mu_Q": float(m[1]), "mu_l": float(m[2])})
        for c in p.children:
            payloads.setdefault(c, {}).update({
                "v": float(x[V]), "mu_v": float(mu[("child", c)][0])})
        for s in p.partners:
            payloads.setdefault(s, {}).update({
                "e": float(x[p.e_index(s)]),
                "mu_e": float(mu[("partner", s)][0])})
        for recv in sorted(payloads):
            packets.append(SharedPacket(i, recv, "x", payloads[recv], k))
    return packets


def _y_stage_packets(agents, k):
    packets = []
    for i in sorted(agents):
        rt = agents[i]
        p = rt.problem
        r = rt.stack_vals
        payloads = {}
        if p.parent is not None:
            payloads.setdefault(p.parent, {}).update({
                "v": float(r[rt.spos[(p.parent, V)]])})
        for c in p.children:
            payloads.setdefault(c, {}).update({
                "P": float(r[rt.spos[(c, P_FLOW)]]),
                "Q": float(r[rt.spos[(c, Q_FLOW)]]),
                "l": float(r[rt.spos[(c, L_FLOW)]])})
        for s in p.partners:
            sp = agents[s].problem
            payloads.setdefault(s, {}).update({
                "e": float(r[rt.spos[(s, sp.e_index(i))]])})
        for recv in sorted(payloads):
            packets.append(SharedPacket(i, recv, "y", payloads[recv], k))
    return packets


def share_stage(agents, stage, k):
    """Emit the stage's packets, exactly one delivery per edge per iteration.

    x-stage: owners send fresh values and the matching duals to the holders
    of their duplicated components.  y-stage: holders return updated copies
    to the owners.
    """
    if stage == "x":
        return _x_stage_packets(agents, k)
    if stage == "y":
        return _y_stage_packets(agents, k)
    raise ConfigError(f"unknown stage {stage!r}")


def _received_x_vector(rt, inbox):
    """Received x-stage fields in channel order (the non-self stack coords)."""
    p = rt.problem
    vals = []
    for coord in p.stack[p.dim:]:
        payload = inbox[coord.owner].payload
        if coord.owner == p.parent and coord.fld == V:
            vals.append(payload["v"])
        elif coord.fld == P_FLOW:
            vals.append(payload["P"])
        elif coord.fld == Q_FLOW:
            vals.append(payload["Q"])
        elif coord.fld == L_FLOW:
            vals.append(payload["l"])
        else:
            vals.append(payload["e"])
    return np.array(vals, dtype=float)


def _write_back_x(rt, inbox, chosen):
    p = rt.problem
    for pos, coord in enumerate(p.stack[p.dim:]):
        payload = inbox[coord.owner].payload
        if coord.owner == p.parent and coord.fld == V:
            payload["v"] = float(chosen[pos])
        elif coord.fld == P_FLOW:
            payload["P"] = float(chosen[pos])
        elif coord.fld == Q_FLOW:
            payload["Q"] = float(chosen[pos])
        elif coord.fld == L_FLOW:
            payload["l"] = float(chosen[pos])
        else:
            payload["e"] = float(chosen[pos])


@dataclass
class RunReport:
    converged: bool
    iterations: int
    outcome: object
    gamma_p: list
    gamma_d: list
    omega_trace: list
    p0_trace: list
    detector_rows: list
    detection_counts: dict
    theorem: TheoremReport
    nonconvergence_count: int
    settings: RunSettings


def residuals(states, eta, holders_of, previous=None):
    """Summed per-edge consensus residuals.

    primal: sum over agents i and holders h of ||x_i|_h - y_{i(h)}||.
    dual: the same sum over eta_i * ||y_{i(h)} - previous y_{i(h)}||
    (0 when no previous copies are supplied).
    """
    etas = eta if isinstance(eta, dict) else {i: eta for i in states}
    gp = 0.0
    gd = 0.0
    for i in sorted(states):
        st = states[i]
        for h, idx in holders_of[i]:
            gp += float(np.linalg.norm(st.x[idx] - st.y_copies[h]))
            if previous is not None:
                gd += etas[i] * float(
                    np.linalg.norm(st.y_copies[h] - previous[i][h]))
    return Residuals(primal=gp, dual=gd)


def run(case, params, attack=None, detector_on=False, settings=None):
    """Execute the resilient clearing loop; see the module docstring.

    Inner-solver failures are recorded and iteration continues with the best
    iterate (the loop has no abort branch); convergence is reported, never
    enforced.
    """
    settings = settings or RunSettings()
    settings.validate()
    problems = assemble(case, params, utility=settings.utility)
    eta = settings.eta
    agents = {p.id: _AgentRuntime(p, settings) for p in problems}
    order = sorted(agents)
    by_id = {p.id: p for p in problems}

    qin = np.array([agents[i].ykernel.q_inv_norm for i in order])
    deltas = np.array([by_id[i].delta for i in order])
    theorem = check_theorem1(np.full(len(order), eta), settings.detector.lam,
                             deltas, qin, settings.upsilon, agents=order)

    if detector_on:
        for i in order:
            rt = agents[i]
            p = rt.problem
            if "x" in settings.detect_stages:
                spatial = build_spatial_relation(p)
                labels = [f"{c.owner}.{c.fld}" for c in spatial.channels]
                rt.detectors["x"] = _StageDetector(
                    settings.detector, spatial, labels,
                    len(spatial.channels), len(p.stack) - p.dim)
            if "y" in settings.detect_stages:
                n_recv = len(p.stack) - p.dim
                labels = [f"copy.{h}" for h in range(n_recv)] \
                    + [f"self.{f}" for f in range(p.dim)]
                rt.detectors["y"] = _StageDetector(
                    settings.detector, None, labels, n_recv + p.dim, n_recv)

    gamma_p_tr, gamma_d_tr, omega_tr, p0_tr = [], [], [], []
    detector_rows = []
    nonconv = 0
    converged = False
    k = 0

    for k in range(1, settings.k_max + 1):
        # x-update
        for i in order:
            rt = agents[i]
            x, s, _, _, ok = rt.solver.solve(
                rt.x_targets(), tol=settings.inner_tol,
                max_iter=settings.inner_max_iter, warm=rt.warm,
                dyk_tol=settings.dyk_tol, dyk_max_iter=settings.dyk_max_iter)
            if not ok:
                rt.nonconverged += 1
                nonconv += 1
            rt.state.x = x
            rt.warm = s

        # x-stage sharing, corruption, screening
        packets = share_stage(agents, "x", k)
        if attack is not None and attack.stage == "x":
            out = []
            for pk in packets:
                if attack.active_at(k) and (pk.sender, pk.receiver) in attack.targets:
                    try:
                        line = case.line_into(pk.sender)
                    except KeyError:
                        raise FieldError(
                            f"attack target sender {pk.sender} has no line")
                    pk = corrupt(pk, attack, k, line)
                out.append(pk)
            packets = out
        inboxes = {i: {} for i in order}
        for pk in packets:
            inboxes[pk.receiver][pk.sender] = pk
        if detector_on and "x" in settings.detect_stages:
            for i in order:
                rt = agents[i]
                if not rt.problem.stack[rt.problem.dim:]:
                    continue
                recv = _received_x_vector(rt, inboxes[i])
                full = np.concatenate([recv, rt.state.x])
                chosen, gamma, err, source = rt.detectors["x"].process(k, full)
                if not math.isnan(err):
                    detector_rows.append((k, i, "x", gamma, err, source))
                if gamma == 1:
                    _write_back_x(rt, inboxes[i], chosen)

        # y-update: project the duplicated stack onto the coupling rows
        for i in order:
            rt = agents[i]
            p = rt.problem
            d = p.dim
            xs = np.empty(len(p.stack))
            ms = np.empty(len(p.stack))
            xs[:d] = rt.state.x
            ms[:d] = rt.state.mu["self"]
            for pos, coord in enumerate(p.stack[d:], start=d):
                payload = inboxes[i][coord.owner].payload
                if coord.owner == p.parent and coord.fld == V:
                    xs[pos], ms[pos] = payload["v"], payload["mu_v"]
                elif coord.fld == P_FLOW:
                    xs[pos], ms[pos] = payload["P"], payload["mu_P"]
                elif coord.fld == Q_FLOW:
                    xs[pos], ms[pos] = payload["Q"], payload["mu_Q"]
                elif coord.fld == L_FLOW:
                    xs[pos], ms[pos] = payload["l"], payload["mu_l"]
                else:
                    xs[pos], ms[pos] = payload["e"], payload["mu_e"]
            rt.stack_vals = solve_y(rt.ykernel, xs, ms)

        # y-stage sharing (returned copies), optional screening
        ypackets = share_stage(agents, "y", k)
        if attack is not None and attack.stage == "y":
            out = []
            for pk in ypackets:
                if (pk.sender, pk.receiver) in attack.targets and attack.active_at(k):
                    pk = corrupt(pk, attack, k, case.line_into(pk.receiver))
                out.append(pk)
            ypackets = out
        yin = {i: {} for i in order}
        for pk in ypackets:
            yin[pk.receiver][pk.sender] = pk
        if detector_on and "y" in settings.detect_stages:
            for i in order:
                rt = agents[i]
                det = rt.detectors["y"]
                recv, writers = _received_y_vector(agents, i, yin[i])
                if recv.size == 0:
                    continue
                full = np.concatenate([recv, rt.state.x])
                chosen, gamma, err, source = det.process(k, full)
                if not math.isnan(err):
                    detector_rows.append((k, i, "y", gamma, err, source))
                if gamma == 1:
                    for pos, (payload, fieldname) in enumerate(writers):
                        payload[fieldname] = float(chosen[pos])

        # dual updates by the owners, against returned copies
        for i in order:
            rt = agents[i]
            p = rt.problem
            for h, idx in rt.holders:
                if h == "self":
                    ynew = rt.stack_vals[:p.dim][idx]
                elif h == "parent":
                    payload = yin[i][p.parent].payload
                    ynew = np.array([payload["P"], payload["Q"], payload["l"]])
                elif h[0] == "child":
                    ynew = np.array([yin[i][h[1]].payload["v"]])
                else:
                    ynew = np.array([yin[i][h[1]].payload["e"]])
                rt.y_prev[h] = rt.state.y_copies[h]
                rt.state.y_copies[h] = np.asarray(ynew, float)
                rt.state.mu[h] = rt.state.mu[h] + eta * (
                    rt.state.x[idx] - rt.state.y_copies[h])

        res = residuals({i: agents[i].state for i in order}, eta,
                        {i: agents[i].holders for i in order},
                        previous={i: agents[i].y_prev for i in order})
        gp, gd = res.primal, res.dual
        xs_now = {i: agents[i].state.x for i in order}
        mo = outcome(xs_now, case, problems)
        gamma_p_tr.append(gp)
        gamma_d_tr.append(gd)
        omega_tr.append(mo.total_traded)
        p0_tr.append(mo.substation_injection)
        if gp <= settings.varpi1 and gd <= settings.varpi2:
            converged = True
            break

    xs_now = {i: agents[i].state.x for i in order}
    final = outcome(xs_now, case, problems)
    counts = {i: sum(det.flags for det in agents[i].detectors.values())
              for i in order}
    return RunReport(converged=converged, iterations=k, outcome=final,
                     gamma_p=gamma_p_tr, gamma_d=gamma_d_tr,
                     omega_trace=omega_tr, p0_trace=p0_tr,
                     detector_rows=detector_rows, detection_counts=counts,
                     theorem=theorem, nonconvergence_count=nonconv,
                     settings=settings)


def _received_y_vector(agents, i, inbox):
    """Returned-copy fields for agent i in a fixed order, with writeback
    handles (payload dict, field name) for mitigation."""
    rt = agents[i]
    p = rt.problem
    vals, writers = [], []
    if p.parent is not None:
        payload = inbox[p.parent].payload
        for f in ("P", "Q", "l"):
            vals.append(payload[f])
            writers.append((payload, f))
    for c in p.children:
        payload = inbox[c].payload
        vals.append(payload["v"])
        writers.append((payload, "v"))
    for s in p.partners:
        payload = inbox[s].payload
        vals.append(payload["e"])
        writers.append((payload, "e"))
    return np.array(vals, dtype=float), writers
