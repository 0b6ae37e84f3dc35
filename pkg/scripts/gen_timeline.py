"""Regenerate the daily timeline fixture (data/daily33.tsv).

96 intervals of 15 minutes.  Active load follows a residential-style day
(night valley, morning ramp, evening peak); reactive load is deliberately
evening-heavy so the feeder leans on inverter support to stay inside the
cost-free tariff zone; PV is a clear-sky bell; the tariff tracks a
day-ahead-style curve with an evening price spike.
"""

import os

import numpy as np


def smooth_profile(points, n=96):
    """Piecewise-linear daily profile through (hour, value) anchors."""
    hours = np.arange(n) * 24.0 / n
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return np.interp(hours, xs, ys)


def build(n=96):
    load_p = smooth_profile(
        [(0, 0.58), (3, 0.55), (6, 0.60), (9, 0.82), (12, 0.80),
         (15, 0.78), (18, 0.92), (19, 1.00), (21, 0.98), (23, 0.70),
         (24, 0.60)], n) * 0.22
    load_q = smooth_profile(
        [(0, 0.32), (3, 0.30), (6, 0.34), (9, 0.44), (12, 0.45),
         (15, 0.44), (18, 0.52), (19, 0.55), (21, 0.54), (23, 0.40),
         (24, 0.34)], n)
    pv = smooth_profile(
        [(0, 0.0), (5.5, 0.0), (7, 0.15), (9, 0.55), (11, 0.9),
         (13, 1.0), (15, 0.85), (17, 0.45), (19, 0.05), (19.5, 0.0),
         (24, 0.0)], n)
    tariff = smooth_profile(
        [(0, 0.07), (4, 0.06), (7, 0.12), (10, 0.16), (13, 0.11),
         (16, 0.14), (18, 0.22), (20, 0.26), (22, 0.14), (24, 0.08)], n)
    return tariff, load_p, load_q, pv


def main():
    n = 96
    tariff, load_p, load_q, pv = build(n)
    out = os.path.join(os.path.dirname(__file__), "..", "data", "daily33.tsv")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("# t  tariff_eur_per_kwh  load_p_scale  load_q_scale  pv_scale\n")
        for t in range(n):
            fh.write(
                f"{t}  {tariff[t]:.5f}  {load_p[t]:.5f}  "
                f"{load_q[t]:.5f}  {pv[t]:.5f}\n"
            )
    print(f"wrote {os.path.normpath(out)}")


if __name__ == "__main__":
    main()
