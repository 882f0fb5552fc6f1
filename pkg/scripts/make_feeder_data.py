"""Regenerate the bundled feeder, fleet and synthetic 24 h profiles.

The network is a single-phase radial feeder with the 37-node topology and
positive-sequence line impedances on a 4.8 kV / 23.04 MVA base.  Profiles
are synthetic: an evening-peaking load shape and a midday PV bell.
"""

import csv
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "mfopf" / "data"
S_BASE = 23.04
Z_BASE = 4.8**2 / S_BASE

# ohm per mile, positive sequence
CONFIG = {
    721: (0.2253, 0.2341),
    722: (0.3122, 0.3299),
    723: (0.8065, 0.4602),
    724: (1.5748, 0.5020),
}

LINES = [
    (799, 701, 721, 1850), (701, 702, 722, 960), (702, 705, 724, 400), (702, 713, 723, 360),
    (702, 703, 722, 1320), (703, 727, 724, 240), (703, 730, 723, 600), (704, 714, 724, 80),
    (704, 720, 723, 800), (705, 742, 724, 320), (705, 712, 724, 240), (706, 725, 724, 280),
    (707, 724, 724, 760), (707, 722, 724, 120), (708, 733, 723, 320), (708, 732, 724, 320),
    (709, 731, 723, 600), (709, 708, 723, 320), (710, 735, 724, 200), (710, 736, 724, 1280),
    (711, 741, 723, 400), (711, 740, 724, 200), (713, 704, 723, 520), (714, 718, 724, 520),
    (720, 707, 724, 920), (720, 706, 723, 600), (727, 744, 723, 280), (730, 709, 723, 200),
    (733, 734, 723, 560), (734, 737, 723, 640), (734, 710, 724, 520), (737, 738, 723, 400),
    (738, 711, 723, 400), (744, 728, 724, 200), (744, 729, 724, 280),
]
TRANSFORMER = (709, 775, 0.0415, 0.834)  # already per unit

# kW, kVAr
LOADS = {
    701: (630, 315), 712: (85, 40), 713: (85, 40), 714: (38, 18), 718: (85, 40), 720: (85, 40),
    722: (161, 80), 724: (42, 21), 725: (42, 21), 727: (42, 21), 728: (126, 63), 729: (42, 21),
    730: (85, 40), 731: (85, 40), 732: (42, 21), 733: (85, 40), 734: (42, 21), 735: (85, 40),
    736: (42, 21), 737: (140, 70), 738: (126, 62), 740: (85, 40), 741: (42, 21), 742: (93, 44),
    744: (42, 21),
}

PV_KVA = {709: 200, 711: 200, 712: 200, 713: 100, 724: 100, 730: 200, 734: 200, 740: 200}
BATTERIES = (703, 734)


def load_shape(h):
    base = 0.55 + 0.12 * np.exp(-0.5 * ((h - 8.5) / 1.5) ** 2)
    return base + 0.45 * np.exp(-0.5 * ((h - 19.0) / 2.2) ** 2)


def pv_shape(h):
    return np.where((h > 6.0) & (h < 19.5), np.exp(-0.5 * ((h - 12.5) / 2.6) ** 2), 0.0)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "feeder.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "r_pu", "x_pu"])
        for a, b, cfg, ft in LINES:
            r, x = CONFIG[cfg]
            miles = ft / 5280.0
            w.writerow([a, b, repr(round(r * miles / Z_BASE, 10)), repr(round(x * miles / Z_BASE, 10))])
        a, b, r, x = TRANSFORMER
        w.writerow([a, b, r, x])

    with open(OUT / "fleet.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "kind", "s_rated_MVA", "p_min_MW", "p_max_MW", "soc_MWh", "soc_min_MWh", "soc_max_MWh"])
        for node in BATTERIES:
            w.writerow([node, "battery", 12.0, -10.0, 10.0, 15.0, 0.0, 30.0])
        for node, kva in PV_KVA.items():
            w.writerow([node, "pv", kva / 1000.0, "", "", "", "", ""])

    t = np.arange(0, 24 * 3600 + 1, 300)
    h = t / 3600.0
    ls = load_shape(h)
    ps = pv_shape(h)
    with open(OUT / "loads.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds", "node", "p_MW", "q_MVAr"])
        for i, ti in enumerate(t):
            for node, (p, q) in LOADS.items():
                w.writerow([int(ti), node, round(p / 1000.0 * ls[i], 6), round(q / 1000.0 * ls[i], 6)])
    with open(OUT / "pv.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds", "node", "p_available_MW"])
        for i, ti in enumerate(t):
            for node, kva in PV_KVA.items():
                w.writerow([int(ti), node, round(0.95 * kva / 1000.0 * ps[i], 6)])


if __name__ == "__main__":
    main()
