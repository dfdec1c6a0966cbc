"""Writes ieee13.feeder from the IEEE 13-node test feeder data.

Line configurations are the published phase impedance matrices in ohm/mile;
segment lengths in feet. The 670 midpoint of 632-671 is folded away by
splitting its distributed load evenly between 632 and 671. The regulator is
omitted (taps at nominal), XFM-1 is a series impedance on the 2.4 kV base,
the 671-692 switch is closed with a small impedance, voltage limits
are 0.85-1.1 pu because without regulation phase c sags to 0.88 pu, delta loads are placed on
the first phase of their pair and capacitors are constant negative kvar.
"""
import sys

FT_PER_MILE = 5280.0

C = complex
CONFIGS = {
    601: [[C(0.3465, 1.0179), C(0.1560, 0.5017), C(0.1580, 0.4236)],
          [C(0.1560, 0.5017), C(0.3375, 1.0478), C(0.1535, 0.3849)],
          [C(0.1580, 0.4236), C(0.1535, 0.3849), C(0.3414, 1.0348)]],
    602: [[C(0.7526, 1.1814), C(0.1580, 0.4236), C(0.1560, 0.5017)],
          [C(0.1580, 0.4236), C(0.7475, 1.1983), C(0.1535, 0.3849)],
          [C(0.1560, 0.5017), C(0.1535, 0.3849), C(0.7436, 1.2112)]],
    603: [[0, 0, 0],
          [0, C(1.3294, 1.3471), C(0.2066, 0.4591)],
          [0, C(0.2066, 0.4591), C(1.3238, 1.3569)]],
    604: [[C(1.3238, 1.3569), 0, C(0.2066, 0.4591)],
          [0, 0, 0],
          [C(0.2066, 0.4591), 0, C(1.3294, 1.3471)]],
    605: [[0, 0, 0], [0, 0, 0], [0, 0, C(1.3292, 1.3475)]],
    606: [[C(0.7982, 0.4463), C(0.3192, 0.0328), C(0.2849, -0.0143)],
          [C(0.3192, 0.0328), C(0.7891, 0.4041), C(0.3192, 0.0328)],
          [C(0.2849, -0.0143), C(0.3192, 0.0328), C(0.7982, 0.4463)]],
    607: [[C(1.3425, 0.5124), 0, 0], [0, 0, 0], [0, 0, 0]],
}

# XFM-1: 500 kVA, R = 1.1 %, X = 2 % on the per-phase base (2.4 kV, 500/3 kVA).
ZT = (2400.0 ** 2) / (500e3 / 3)
XFM = [[C(0.011 * ZT, 0.02 * ZT) if r == c else 0 for c in range(3)] for r in range(3)]
SWITCH = [[C(1e-3, 1e-3) if r == c else 0 for c in range(3)] for r in range(3)]

SEGMENTS = [
    ("650", "632", "abc", 601, 2000, 3000),
    ("632", "671", "abc", 601, 2000, 3000),
    ("671", "680", "abc", 601, 1000, 3000),
    ("632", "633", "abc", 602, 500, 1000),
    ("633", "634", "abc", "xfm", 0, 1000),
    ("632", "645", "bc", 603, 500, 1000),
    ("645", "646", "bc", 603, 300, 1000),
    ("671", "692", "abc", "switch", 0, 3000),
    ("692", "675", "abc", 606, 500, 1000),
    ("671", "684", "ac", 604, 300, 1000),
    ("684", "611", "c", 605, 300, 1000),
    ("684", "652", "a", 607, 800, 1000),
]

NODES = [("650", "abc"), ("632", "abc"), ("633", "abc"), ("634", "abc"), ("645", "bc"),
         ("646", "bc"), ("671", "abc"), ("680", "abc"), ("684", "ac"), ("611", "c"),
         ("652", "a"), ("692", "abc"), ("675", "abc")]

# node, phase, kW, kvar
LOADS = [
    ("634", "a", 160, 110), ("634", "b", 120, 90), ("634", "c", 120, 90),
    ("645", "b", 170, 125),
    ("646", "b", 230, 132),
    ("652", "a", 128, 86),
    ("671", "a", 385, 220), ("671", "b", 385, 220), ("671", "c", 385, 220),
    ("675", "a", 485, 190), ("675", "b", 68, 60), ("675", "c", 290, 212),
    ("692", "c", 170, 151),
    ("611", "c", 170, 80),
    # distributed 632-671, half at each end
    ("632", "a", 8.5, 5), ("632", "b", 33, 19), ("632", "c", 58.5, 34),
    ("671", "a", 8.5, 5), ("671", "b", 33, 19), ("671", "c", 58.5, 34),
    # shunt capacitors
    ("675", "abc", 0, -200), ("611", "c", 0, -100),
]


def fmt(z):
    z = complex(z)
    return f"{z.real:.10g}{z.imag:+.10g}j"


def main(out):
    w = out.write
    w("# IEEE 13-node test feeder (see tools/make_ieee13.py for provenance)\n")
    w("[bases]\nv_base = 2400\ns_base = 1000000\n\n[nodes]\n")
    for nid, ph in NODES:
        w(f"{nid} {ph} 0.85 1.1{' slack' if nid == '650' else ''}\n")
    w("\n[branches]\n# from to phases s_max_kva | impedance (ohm)\n")
    for a, b, ph, cfg, feet, smax in SEGMENTS:
        if cfg == "xfm":
            z = XFM
        elif cfg == "switch":
            z = SWITCH
        else:
            z = [[x * feet / FT_PER_MILE for x in row] for row in CONFIGS[cfg]]
        rows = "; ".join(" ".join(fmt(x) for x in row) for row in z)
        w(f"{a} {b} {ph} {smax} | {rows}\n")
    w("\n[batteries]\n# node phases b_min b_max p_max h_max eta_c eta_d b_init  (kWh, kW, kVA)\n")
    w("680 abc 0 40 50 50 0.95 0.95 20\n")
    w("\n[solar]\n# node phases g_max (kVA)\n")
    w("680 abc 100\n675 abc 100\n611 c 100\n652 a 100\n")
    w("\n[loads]\n# node phases kW kvar (per phase)\n")
    for nid, ph, p, q in LOADS:
        w(f"{nid} {ph} {p} {q}\n")


if __name__ == "__main__":
    main(sys.stdout)
