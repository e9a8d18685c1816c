"""Radial distribution case loading, validation, and neighbor indexing.

Internal unit conventions (fixed here, documented in the README):
  * power p, q, P, Q in kW / kVAr,
  * squared voltage v in p.u.^2,
  * line impedance r, x in p.u. on S_BASE,
  * squared line current carried as l = S_BASE * l_pu, so the loss terms in
    the balance equations read literally R * l (kW) while the voltage-drop
    equation carries 1/S_BASE coefficients.

Lines are directed parent -> child after loading and are indexed by their
child (end) bus.  Cases are immutable after load and safe to share.
"""

from dataclasses import dataclass, field

from .errors import BoundsError, ParseError, TopologyError

S_BASE = 1000.0  # kVA base tying kW quantities to per-unit impedances


@dataclass(frozen=True)
class BusRecord:
    id: int
    v_min: float
    v_max: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    p_desired: float

    def __post_init__(self):
        if self.v_min > self.v_max:
            raise BoundsError(f"bus {self.id}: v_min > v_max")
        if self.p_min > self.p_max:
            raise BoundsError(f"bus {self.id}: p_min > p_max")
        if self.q_min > self.q_max:
            raise BoundsError(f"bus {self.id}: q_min > q_max")


@dataclass(frozen=True)
class LineRecord:
    from_bus: int  # parent end
    to_bus: int    # child end; the line's index key
    r: float
    x: float
    P_min: float
    P_max: float
    Q_min: float
    Q_max: float

    def __post_init__(self):
        if self.r < 0 or self.x < 0:
            raise BoundsError(f"line into bus {self.to_bus}: negative impedance")
        if self.P_min > self.P_max or self.Q_min > self.Q_max:
            raise BoundsError(f"line into bus {self.to_bus}: flow bounds inverted")

    @property
    def z2(self):
        return self.r * self.r + self.x * self.x


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple
    lines: tuple
    trading_pairs: tuple  # (buyer id, seller id)
    root: int = 0

    def bus(self, bus_id):
        return {b.id: b for b in self.buses}[bus_id]

    def line_into(self, bus_id):
        """The line whose child end is ``bus_id``."""
        return {ln.to_bus: ln for ln in self.lines}[bus_id]

    @property
    def n_buses(self):
        return len(self.buses)


@dataclass(frozen=True)
class NeighborSets:
    """Per-agent index: parents, children, trading partners (sorted ids)."""
    parents: dict
    children: dict
    partners: dict


def derive_sets(case):
    """Parent/child/partner sets for every agent.

    The root has no parent; every non-root bus has exactly one.  Partner
    relations are symmetric.
    """
    parents = {b.id: () for b in case.buses}
    children = {b.id: [] for b in case.buses}
    partners = {b.id: [] for b in case.buses}
    for ln in case.lines:
        parents[ln.to_bus] = (ln.from_bus,)
        children[ln.from_bus].append(ln.to_bus)
    for buyer, seller in case.trading_pairs:
        partners[buyer].append(seller)
        partners[seller].append(buyer)
    children = {k: tuple(sorted(v)) for k, v in children.items()}
    partners = {k: tuple(sorted(v)) for k, v in partners.items()}
    return NeighborSets(parents=parents, children=children, partners=partners)


def _tokenize(text):
    rows = []
    for ln_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        rows.append((ln_no, line))
    return rows


def loads_case(text):
    """Parse the case format from a string; see ``load_case``."""
    section = None
    buses, lines, trades = [], [], []
    for ln_no, line in _tokenize(text):
        if line.startswith("["):
            name = line.strip("[]").strip().lower()
            if name not in ("bus", "line", "trade"):
                raise ParseError(f"line {ln_no}: unknown section [{name}]")
            section = name
            continue
        if section is None:
            raise ParseError(f"line {ln_no}: data before any section header")
        toks = line.split()
        try:
            vals = [float(t) for t in toks]
        except ValueError as exc:
            raise ParseError(f"line {ln_no}: non-numeric token ({exc})")
        if section == "bus":
            if len(toks) != 8:
                raise ParseError(f"line {ln_no}: bus row needs 8 fields")
            buses.append(BusRecord(int(vals[0]), *vals[1:]))
        elif section == "line":
            if len(toks) != 8:
                raise ParseError(f"line {ln_no}: line row needs 8 fields")
            lines.append((int(vals[0]), int(vals[1]), *vals[2:]))
        else:
            if len(toks) != 2:
                raise ParseError(f"line {ln_no}: trade row needs 2 fields")
            trades.append((int(vals[0]), int(vals[1])))
    return _validate_and_normalize(buses, lines, trades)


def load_case(path):
    """Load, validate, and BFS-normalize a network case file.

    The file has three sections.  ``[bus]`` rows: ``id v_min v_max p_min
    p_max q_min q_max p_desired``; ``[line]`` rows: ``from to r x P_min P_max
    Q_min Q_max``; ``[trade]`` rows: ``buyer seller``.  ``#`` starts a
    comment.  Raises ParseError / TopologyError / BoundsError.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read case file {path}: {exc}")
    return loads_case(text)


def _validate_and_normalize(buses, lines, trades):
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate bus ids")
    id_set = set(ids)
    root = 0
    if root not in id_set:
        raise TopologyError("case has no substation bus 0")
    if len(lines) != len(buses) - 1:
        raise TopologyError(
            f"{len(lines)} lines for {len(buses)} buses; a tree needs n-1")

    adj = {i: [] for i in ids}
    raw_by_edge = {}
    for (fa, fb, r, x, pmin, pmax, qmin, qmax) in lines:
        if fa not in id_set or fb not in id_set:
            raise TopologyError(f"line {fa}-{fb} references unknown bus")
        if fa == fb:
            raise TopologyError(f"line {fa}-{fb} is a self loop")
        key = (min(fa, fb), max(fa, fb))
        if key in raw_by_edge:
            raise TopologyError(f"duplicate line between {fa} and {fb}")
        raw_by_edge[key] = (r, x, pmin, pmax, qmin, qmax)
        adj[fa].append(fb)
        adj[fb].append(fa)

    # breadth-first orientation from the root; detects cycles/disconnection
    order = [root]
    parent = {root: None}
    seen = {root}
    qi = 0
    while qi < len(order):
        cur = order[qi]
        qi += 1
        for nxt in sorted(adj[cur]):
            if nxt == parent[cur]:
                continue
            if nxt in seen:
                raise TopologyError("line graph contains a cycle")
            seen.add(nxt)
            parent[nxt] = cur
            order.append(nxt)
    if len(order) != len(buses):
        missing = sorted(id_set - seen)
        raise TopologyError(f"buses {missing} unreachable from the root")

    bus_by_id = {b.id: b for b in buses}
    norm_buses = tuple(bus_by_id[i] for i in order)
    norm_lines = []
    for child in order[1:]:
        par = parent[child]
        r, x, pmin, pmax, qmin, qmax = raw_by_edge[(min(par, child), max(par, child))]
        norm_lines.append(LineRecord(par, child, r, x, pmin, pmax, qmin, qmax))

    pair_seen = set()
    for buyer, seller in trades:
        if buyer not in id_set or seller not in id_set:
            raise ParseError(f"trade {buyer}-{seller} references unknown bus")
        if buyer == seller:
            raise ParseError(f"trade {buyer}-{seller} is a self trade")
        key = (min(buyer, seller), max(buyer, seller))
        if key in pair_seen:
            raise ParseError(f"duplicate trade between {buyer} and {seller}")
        pair_seen.add(key)
        if not bus_by_id[buyer].p_desired > 0:
            raise ParseError(
                f"trade {buyer}-{seller}: buyer {buyer} has p_desired <= 0")
        if not bus_by_id[seller].p_desired < 0:
            raise ParseError(
                f"trade {buyer}-{seller}: seller {seller} has p_desired >= 0")

    return NetworkCase(buses=norm_buses, lines=tuple(norm_lines),
                       trading_pairs=tuple(trades), root=root)


def serialize(case):
    """Emit the case in its file format (BFS order); parses back identically."""
    out = ["[bus]"]
    for b in case.buses:
        out.append(f"{b.id} {b.v_min!r} {b.v_max!r} {b.p_min!r} {b.p_max!r} "
                   f"{b.q_min!r} {b.q_max!r} {b.p_desired!r}")
    out.append("[line]")
    for ln in case.lines:
        out.append(f"{ln.from_bus} {ln.to_bus} {ln.r!r} {ln.x!r} "
                   f"{ln.P_min!r} {ln.P_max!r} {ln.Q_min!r} {ln.Q_max!r}")
    out.append("[trade]")
    for buyer, seller in case.trading_pairs:
        out.append(f"{buyer} {seller}")
    return "\n".join(out) + "\n"
