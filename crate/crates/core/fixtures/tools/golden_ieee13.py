"""Independent reference power flow for ieee13.feeder at nominal load.

Builds the three-phase bus admittance matrix from the branch impedances and
solves the constant-power injection equations S = V * conj(Y V) with a
Newton iteration (finite-difference Jacobian via scipy.optimize.root, method
'hybr'), slack fixed at the balanced nominal voltage. Devices are idle.
Output rows: node, phase, re(V), im(V) in per unit.
"""
import cmath
import math
import sys

import numpy as np
from scipy.optimize import root


def parse(path):
    sec = None
    nodes, branches, loads = [], [], {}
    bases = {}
    for raw in open(path):
        line = raw.split("#")[0].strip()
        if not line:
            continue
        if line.startswith("["):
            sec = line.strip("[]")
            continue
        if sec == "bases":
            k, v = line.split("=")
            bases[k.strip()] = float(v)
        elif sec == "nodes":
            t = line.split()
            nodes.append((t[0], t[1], len(t) > 4))
        elif sec == "branches":
            head, z = line.split("|")
            a, b, ph, _ = head.split()
            rows = [[complex(x.replace("j", "j")) for x in r.split()] for r in z.split(";")]
            branches.append((a, b, ph, np.array(rows)))
        elif sec == "loads":
            nid, ph, p, q = line.split()
            for c in ph:
                loads[(nid, c)] = loads.get((nid, c), 0) + complex(float(p), float(q)) * 1e3
    return bases, nodes, branches, loads


def main(path, out):
    bases, nodes, branches, loads = parse(path)
    zb = bases["v_base"] ** 2 / bases["s_base"]
    idx = {}
    for nid, ph, _ in nodes:
        for c in ph:
            idx[(nid, c)] = len(idx)
    n = len(idx)
    Y = np.zeros((n, n), dtype=complex)
    for a, b, ph, z in branches:
        ks = ["abc".index(c) for c in ph]
        zs = z[np.ix_(ks, ks)] / zb
        y = np.linalg.inv(zs)
        ia = [idx[(a, c)] for c in ph]
        ib = [idx[(b, c)] for c in ph]
        Y[np.ix_(ia, ia)] += y
        Y[np.ix_(ib, ib)] += y
        Y[np.ix_(ia, ib)] -= y
        Y[np.ix_(ib, ia)] -= y
    slack = [nid for nid, _, s in nodes if s][0]
    vs = {c: cmath.rect(1.0, -2 * math.pi / 3 * k) for k, c in enumerate("abc")}
    fixed = [idx[(slack, c)] for c in "abc"]
    free = [i for i in range(n) if i not in fixed]
    s_inj = np.zeros(n, dtype=complex)
    for (nid, c), s in loads.items():
        s_inj[idx[(nid, c)]] -= s / bases["s_base"]
    v0 = np.zeros(n, dtype=complex)
    for (nid, c), i in idx.items():
        v0[i] = vs[c]

    def full(x):
        v = v0.copy()
        v[free] = x[: len(free)] + 1j * x[len(free):]
        return v

    def resid(x):
        v = full(x)
        mis = (v * np.conj(Y @ v) - s_inj)[free]
        return np.concatenate([mis.real, mis.imag])

    x0 = np.concatenate([v0[free].real, v0[free].imag])
    sol = root(resid, x0, method="hybr", tol=1e-14)
    v = full(sol.x)
    assert np.max(np.abs(resid(sol.x))) < 1e-10, np.max(np.abs(resid(sol.x)))
    out.write("# node\tphase\tre\tim\n")
    for (nid, c), i in idx.items():
        out.write(f"{nid}\t{c}\t{v[i].real:.12f}\t{v[i].imag:.12f}\n")


if __name__ == "__main__":
    main(sys.argv[1], sys.stdout)
