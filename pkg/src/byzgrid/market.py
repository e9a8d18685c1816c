"""Per-prosumer optimization data: cost functions, local constraint sets, and
coupling-constraint rows.

Variable layout for agent i (all internal units as in ``netmodel``):

    x_i = (v, p, q, P, Q, l, e_{i,s1}, e_{i,s2}, ...)      partners sorted

``P, Q, l`` describe the line into bus i (flow directed from i toward its
parent); for the root they are pinned to zero by their box.  Each agent owns
a stacked coupling matrix M over its *stack*: its own full vector followed by
the neighbor components duplicated into its constraint rows (parent voltage,
child flows, partner trades).
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError, RoleError
from .netmodel import S_BASE, derive_sets

BIG = np.inf

V, P_INJ, Q_INJ, P_FLOW, Q_FLOW, L_FLOW = range(6)
_FIELD_NAMES = ("v", "p", "q", "P", "Q", "l")


class AgentRole(enum.Enum):
    BUYER = "buyer"
    SELLER = "seller"
    PASSIVE = "passive"


def role_of(p_desired):
    if p_desired > 0:
        return AgentRole.BUYER
    if p_desired < 0:
        return AgentRole.SELLER
    return AgentRole.PASSIVE


@dataclass(frozen=True)
class CostParams:
    alpha: float
    beta: float
    epsilon: float
    omega_b: float
    omega_s: float
    p_desired: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.omega_b >= self.omega_s >= 0:
            raise ValueError("need omega_b >= omega_s >= 0")


@dataclass(frozen=True)
class StackCoord:
    """One column of the agent's coupling matrix: ``owner``'s layout field."""
    owner: int
    fld: int  # index into the owner's layout


@dataclass
class AgentProblem:
    id: int
    role: AgentRole
    cost: CostParams
    parent: int | None
    children: tuple
    partners: tuple           # sorted partner ids; e-variable order
    box_lo: np.ndarray
    box_hi: np.ndarray
    halfspaces: list          # [(a, b)] with a.x <= b
    soc: tuple | None         # (P, Q, v, l) indices of the flow cone
    soc_scale: float          # P^2 + Q^2 <= soc_scale * v * l
    stack: list               # list[StackCoord]; columns of M
    coupling: np.ndarray      # M, rows = this agent's constraint rows
    row_labels: list
    delta: float
    utility: str = "aggregate"

    @property
    def dim(self):
        return 6 + len(self.partners)

    def e_index(self, partner):
        return 6 + self.partners.index(partner)

    def stack_index(self, owner, fld):
        for k, c in enumerate(self.stack):
            if c.owner == owner and c.fld == fld:
                return k
        raise LayoutError(f"agent {self.id}: no stack coord ({owner}, {fld})")

    def cost_quadratic(self):
        """Dense (H, g) of the smooth cost model used by the subproblem solver:
        the positive-part grid terms replaced by their exact-on-feasible
        linearizations."""
        d = self.dim
        H = np.zeros((d, d))
        g = np.zeros(d)
        if self.role is AgentRole.PASSIVE:
            return H, g
        c = self.cost
        e_idx = np.arange(6, d)
        H[P_INJ, P_INJ] = 2.0 * c.epsilon
        if self.utility == "aggregate":
            H[np.ix_(e_idx, e_idx)] += 2.0 * c.alpha
        else:
            H[e_idx, e_idx] += 2.0 * c.alpha
        g[P_INJ] = -2.0 * c.epsilon * c.p_desired
        g[e_idx] += c.beta
        omega = c.omega_b if self.role is AgentRole.BUYER else c.omega_s
        g[P_INJ] -= omega
        g[e_idx] += omega
        return H, g


@dataclass(frozen=True)
class MarketOutcome:
    total_traded: float           # Omega, kWh
    substation_injection: float   # p_0, kWh
    objective: float              # cents
    per_pair_trades: dict         # (buyer, seller) -> e_{buyer,seller}


def sample_params(seed, n_agents, roles, p_desired=None, omega_b=10.0,
                  omega_s=5.0):
    """Draw utility/discomfort parameters per agent, deterministically.

    Buyers: alpha in [0.01, 0.1], beta in [1.0, 3.0].
    Sellers: alpha in [0.02, 0.1], beta in [0.1, 0.8].
    Everyone: epsilon in [2.5, 3.5].
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if p_desired is None:
        p_desired = [0.0] * n_agents
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_agents):
        u1, u2, u3 = rng.uniform(size=3)
        role = roles[i]
        if role is AgentRole.SELLER:
            alpha = 0.02 + u1 * (0.1 - 0.02)
            beta = 0.1 + u2 * (0.8 - 0.1)
        else:
            alpha = 0.01 + u1 * (0.1 - 0.01)
            beta = 1.0 + u2 * (3.0 - 1.0)
        eps = 2.5 + u3 * (3.5 - 2.5)
        out.append(CostParams(alpha=alpha, beta=beta, epsilon=eps,
                              omega_b=omega_b, omega_s=omega_s,
                              p_desired=p_desired[i]))
    return out


def cost_eval(problem, x):
    """Operation cost of one agent at a local vector (cents).

    Evaluates the true objective including the positive-part grid terms; on
    the feasible set the active one coincides with the solver's linearization.
    Passive agents cost 0.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.dim,):
        raise LayoutError(
            f"agent {problem.id}: expected length {problem.dim}, got {x.shape}")
    if problem.role is AgentRole.PASSIVE:
        return 0.0
    c = problem.cost
    e = x[6:]
    se = float(np.sum(e))
    if problem.utility == "aggregate":
        quad = c.alpha * se * se
    else:
        quad = c.alpha * float(np.sum(e * e))
    p = x[P_INJ]
    val = quad + c.beta * se + c.epsilon * (p - c.p_desired) ** 2
    val += c.omega_b * max(0.0, -p + se) - c.omega_s * max(0.0, p - se)
    return float(val)


def strong_convexity_modulus(params, role):
    """Conservative strong-convexity bound of the cost on the (sum-e, p)
    directions: 2*min(alpha, epsilon); 0 for passive agents."""
    if role is AgentRole.PASSIVE:
        return 0.0
    return 2.0 * min(params.alpha, params.epsilon)


def _line_l_cap(line, bus):
    # generous box cap for the squared-current variable (keeps iterates bounded)
    pmax = max(abs(line.P_min), abs(line.P_max))
    qmax = max(abs(line.Q_min), abs(line.Q_max))
    vmin = max(bus.v_min, 1e-6)
    return 2.0 * (pmax * pmax + qmax * qmax) / (vmin * S_BASE)


def assemble(case, params, utility="aggregate"):
    """Build every agent's local problem from the case and cost parameters.

    Every constraint of the market problem lands in exactly one agent's box /
    halfspace / cone / coupling data (coupling rows are duplicated per agent
    by design: each agent enforces its own copy over its stack).
    """
    if len(params) != case.n_buses:
        raise LayoutError(f"{len(params)} parameter sets for {case.n_buses} buses")
    sets = derive_sets(case)
    params_by_id = {b.id: params[k] for k, b in enumerate(case.buses)}
    roles = {b.id: role_of(b.p_desired) for b in case.buses}

    for buyer, seller in case.trading_pairs:
        if roles[buyer] is not AgentRole.BUYER or roles[seller] is not AgentRole.SELLER:
            raise RoleError(
                f"pair ({buyer},{seller}) must join one buyer and one seller")

    problems = []
    for b in case.buses:
        i = b.id
        role = roles[i]
        cost = params_by_id[i]
        parent = sets.parents[i][0] if sets.parents[i] else None
        children = sets.children[i]
        partners = sets.partners[i]
        d = 6 + len(partners)

        lo = np.full(d, -BIG)
        hi = np.full(d, BIG)
        lo[V], hi[V] = b.v_min, b.v_max
        lo[P_INJ], hi[P_INJ] = b.p_min, b.p_max
        lo[Q_INJ], hi[Q_INJ] = b.q_min, b.q_max
        if parent is None:
            lo[P_FLOW] = hi[P_FLOW] = 0.0
            lo[Q_FLOW] = hi[Q_FLOW] = 0.0
            lo[L_FLOW] = hi[L_FLOW] = 0.0
            soc = None
        else:
            line = case.line_into(i)
            lo[P_FLOW], hi[P_FLOW] = line.P_min, line.P_max
            lo[Q_FLOW], hi[Q_FLOW] = line.Q_min, line.Q_max
            lo[L_FLOW], hi[L_FLOW] = 0.0, _line_l_cap(line, b)
            soc = (P_FLOW, Q_FLOW, V, L_FLOW)
        for k, s in enumerate(partners):
            if role is AgentRole.BUYER:
                lo[6 + k], hi[6 + k] = 0.0, BIG
            elif role is AgentRole.SELLER:
                lo[6 + k], hi[6 + k] = -BIG, 0.0
            else:
                raise RoleError(f"passive agent {i} appears in a trading pair")

        halfspaces = []
        if role is AgentRole.BUYER:
            a = np.zeros(d)
            a[P_INJ] = 1.0
            a[6:] = -1.0
            halfspaces.append((a, 0.0))
        elif role is AgentRole.SELLER:
            a = np.zeros(d)
            a[P_INJ] = -1.0
            a[6:] = 1.0
            halfspaces.append((a, 0.0))

        # stack: own vector, then duplicated neighbor components
        stack = [StackCoord(i, f) for f in range(d)]
        if parent is not None:
            stack.append(StackCoord(parent, V))
        for j in children:
            stack.extend([StackCoord(j, P_FLOW), StackCoord(j, Q_FLOW),
                          StackCoord(j, L_FLOW)])
        for s in partners:
            stack.append(StackCoord(s, 6 + sets.partners[s].index(i)))
        pos = {(c.owner, c.fld): k for k, c in enumerate(stack)}

        rows = []
        labels = []
        if parent is not None:
            line = case.line_into(i)
            row = np.zeros(len(stack))
            row[pos[(parent, V)]] = 1.0
            row[pos[(i, V)]] = -1.0
            row[pos[(i, P_FLOW)]] = 2.0 * line.r / S_BASE
            row[pos[(i, Q_FLOW)]] = 2.0 * line.x / S_BASE
            row[pos[(i, L_FLOW)]] = -line.z2 / S_BASE
            rows.append(row)
            labels.append("vdrop")
        row_p = np.zeros(len(stack))
        row_q = np.zeros(len(stack))
        for j in children:
            lj = case.line_into(j)
            row_p[pos[(j, P_FLOW)]] = 1.0
            row_p[pos[(j, L_FLOW)]] = -lj.r
            row_q[pos[(j, Q_FLOW)]] = 1.0
            row_q[pos[(j, L_FLOW)]] = -lj.x
        row_p[pos[(i, P_FLOW)]] = -1.0
        row_p[pos[(i, P_INJ)]] = 1.0
        row_q[pos[(i, Q_FLOW)]] = -1.0
        row_q[pos[(i, Q_INJ)]] = 1.0
        rows.extend([row_p, row_q])
        labels.extend(["p_balance", "q_balance"])
        for s in partners:
            row = np.zeros(len(stack))
            row[pos[(i, 6 + partners.index(s))]] = 1.0
            row[pos[(s, 6 + sets.partners[s].index(i))]] = 1.0
            rows.append(row)
            labels.append(f"reciprocity_{s}")

        problems.append(AgentProblem(
            id=i, role=role, cost=cost, parent=parent, children=children,
            partners=tuple(partners), box_lo=lo, box_hi=hi,
            halfspaces=halfspaces, soc=soc, soc_scale=S_BASE, stack=stack,
            coupling=np.array(rows), row_labels=labels,
            delta=strong_convexity_modulus(cost, role), utility=utility))
    return problems


def outcome(xs, case, problems):
    """Market summary from final per-agent vectors.

    ``xs`` maps agent id -> local vector.  Total traded energy sums the buyer
    sides; per-pair trades are read from the buyer side.
    """
    by_id = {p.id: p for p in problems}
    omega = 0.0
    trades = {}
    for buyer, seller in case.trading_pairs:
        pb = by_id[buyer]
        e = float(xs[buyer][pb.e_index(seller)])
        trades[(buyer, seller)] = e
        omega += e
    obj = sum(cost_eval(by_id[i], xs[i]) for i in xs)
    p0 = float(xs[case.root][P_INJ])
    return MarketOutcome(total_traded=omega, substation_injection=p0,
                         objective=float(obj), per_pair_trades=trades)
