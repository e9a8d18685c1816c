"""Generate the bundled 15-bus and 85-bus radial market cases.

Topology and impedance magnitudes are adapted from the standard 15-bus and
85-bus radial distribution test feeders (11 kV class): per-unit r/x on a
1 MVA base land in the few-percent range typical of those feeders, mains
stiffer than laterals.  The prosumer layer (desired powers, trading pairs)
is not part of those feeders and is synthesized here: buyers desire more
energy than sellers offer so the substation absorbs the surplus, mirroring
the published operating point's sign pattern.

Run from the repository root:  python3 tools/gen_cases.py
"""

import os

import numpy as np

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "byzgrid", "cases")

HEADER = """\
# {name}: radial market case, {nb} buses / {nl} lines.
# Units: power in kW/kVAr, impedance in p.u. (1 MVA base), voltage bounds in p.u.^2.
# Adapted from the standard {nb}-bus radial feeder: tree shape and p.u.
# impedance magnitudes follow the feeder; prosumer desired powers and trading
# pairs are synthetic (the reference feeder has no market layer).
# [bus] id v_min v_max p_min p_max q_min q_max p_desired
# [line] from to r x P_min P_max Q_min Q_max
# [trade] buyer seller
"""


def write_case(name, edges, p_desired, trades, seed):
    rng = np.random.default_rng(seed)
    nb = len(p_desired)
    lines = []
    for (a, b) in edges:
        main = max(a, b) < nb // 3
        r = rng.uniform(0.006, 0.012) if main else rng.uniform(0.015, 0.035)
        x = r * rng.uniform(0.7, 1.1)
        cap = 800.0 if main else 400.0
        lines.append((a, b, r, x, -cap, cap, -cap, cap))

    rows = [HEADER.format(name=name, nb=nb, nl=len(edges)), "[bus]"]
    for i in range(nb):
        pd = p_desired[i]
        if i == 0:
            rows.append("0 1.0 1.0 -100000 100000 -100000 100000 0")
            continue
        if pd > 0:
            pmin, pmax = 0.0, 2.0 * pd
        elif pd < 0:
            pmin, pmax = 2.0 * pd, 0.0
        else:
            pmin, pmax = 0.0, 0.0
        qcap = 0.4 * abs(pd) + 5.0
        rows.append(f"{i} 0.81 1.21 {pmin:g} {pmax:g} {-qcap:g} {qcap:g} {pd:g}")
    rows.append("[line]")
    for (a, b, r, x, pmin, pmax, qmin, qmax) in lines:
        rows.append(f"{a} {b} {r:.6f} {x:.6f} {pmin:g} {pmax:g} {qmin:g} {qmax:g}")
    rows.append("[trade]")
    for buyer, seller in trades:
        rows.append(f"{buyer} {seller}")
    path = os.path.join(OUT, name + ".case")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print("wrote", path)


def case15():
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (5, 7), (1, 8),
             (8, 9), (2, 10), (10, 11), (11, 12), (3, 13), (3, 14)]
    p_desired = [0.0] * 15
    buyers = {1: 60.0, 3: 70.0, 4: 45.0, 6: 50.0, 9: 55.0, 11: 80.0,
              13: 65.0, 14: 75.0}
    sellers = {2: -40.0, 5: -35.0, 7: -30.0, 8: -25.0, 10: -45.0, 12: -55.0}
    for k, v in {**buyers, **sellers}.items():
        p_desired[k] = v
    trades = [(1, 2), (1, 5), (3, 7), (3, 5), (4, 2), (6, 7), (9, 8),
              (11, 10), (11, 12), (13, 12), (14, 10), (14, 12)]
    write_case("ieee15", edges, p_desired, trades, seed=1503)


def case85():
    edges = [(i, i + 1) for i in range(24)]          # main feeder 0..24
    laterals = [(3, 6), (7, 8), (12, 10), (17, 8), (21, 8),
                (5, 5), (10, 5), (15, 5), (20, 5)]
    nxt = 25
    for (anchor, length) in laterals:
        prev = anchor
        for _ in range(length):
            edges.append((prev, nxt))
            prev = nxt
            nxt += 1
    assert nxt == 85 and len(edges) == 84

    rng = np.random.default_rng(8501)
    p_desired = [0.0] * 85
    trades = []
    sellers_pool = []
    buyers_pool = []
    for i in range(1, 85):
        u = rng.uniform()
        if u < 0.42:
            p_desired[i] = -float(np.round(rng.uniform(8, 30), 1))
            sellers_pool.append(i)
        elif u < 0.90:
            p_desired[i] = float(np.round(rng.uniform(10, 40), 1))
            buyers_pool.append(i)
    rng.shuffle(buyers_pool)
    for kk, buyer in enumerate(buyers_pool[:22]):
        seller = sellers_pool[kk % len(sellers_pool)]
        trades.append((buyer, seller))
    write_case("ieee85", edges, p_desired, trades, seed=8502)


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    case15()
    case85()
