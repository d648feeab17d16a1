#!/usr/bin/env python3
"""Generate the bundled synthetic wind trace (data/sample_wind.csv).

One year of 10-minute farm output: a Gaussian AR(1) process with a mild
diurnal cycle is mapped through the normal CDF onto a Weibull wind-speed
distribution and then through a generic turbine power curve. The output is
deterministic for a given seed.
"""
import argparse
import math

import numpy as np
from scipy import stats


def power_curve(v, cut_in=3.0, rated=12.0, cut_out=25.0):
    p = np.clip((v**3 - cut_in**3) / (rated**3 - cut_in**3), 0.0, 1.0)
    p[(v < cut_in) | (v >= cut_out)] = 0.0
    return p


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/sample_wind.csv")
    ap.add_argument("--seed", type=int, default=20240601)
    ap.add_argument("--days", type=int, default=365)
    ap.add_argument("--capacity-mw", type=float, default=16.0)
    ap.add_argument("--step-minutes", type=int, default=10)
    ap.add_argument("--hourly-corr", type=float, default=0.97,
                    help="lag-1 autocorrelation of the latent process at one hour")
    ap.add_argument("--weibull-k", type=float, default=2.0)
    ap.add_argument("--weibull-scale", type=float, default=8.0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    steps_per_hour = 60 // args.step_minutes
    n = args.days * 24 * steps_per_hour
    phi = args.hourly_corr ** (1.0 / steps_per_hour)
    noise = rng.standard_normal(n) * math.sqrt(1.0 - phi * phi)
    z = np.empty(n)
    z[0] = rng.standard_normal()
    for t in range(1, n):
        z[t] = phi * z[t - 1] + noise[t]
    hours = np.arange(n) / steps_per_hour
    z = (z + 0.3 * np.sin(2.0 * math.pi * (hours - 9.0) / 24.0)) / math.sqrt(1.0 + 0.045)

    u = np.clip(stats.norm.cdf(z), 1e-12, 1.0 - 1e-12)
    speed = stats.weibull_min.ppf(u, args.weibull_k, scale=args.weibull_scale)
    power = args.capacity_mw * power_curve(speed)

    start = np.datetime64("2019-01-01T00:00")
    stamps = start + np.arange(n) * np.timedelta64(args.step_minutes, "m")
    with open(args.out, "w") as f:
        f.write("timestamp,power_mw\n")
        for ts, p in zip(stamps, power):
            f.write(f"{str(ts).replace('T', ' ')},{p:.4f}\n")


if __name__ == "__main__":
    main()
