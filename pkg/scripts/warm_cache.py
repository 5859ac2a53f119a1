#!/usr/bin/env python3
"""Precompute every cached posterior fit the acceptance tests read.

Safe to re-run: entries already on disk are skipped.  Order puts the fits
the surface criteria need first so partial progress is already useful.
"""

import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "tests"))

from threadpoolctl import threadpool_limits

import cachelib


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def main():
    jobs = [("example2 hotspot fit", cachelib.ensure_example2)]
    jobs.append(("example1 rep 00", lambda: cachelib.ensure_example1_rep(0)))
    jobs.append(("example1 L=3 variant", lambda: cachelib.ensure_example1_variant(3)))
    jobs.append(("example1 L=1 variant", lambda: cachelib.ensure_example1_variant(1)))
    for rep in range(1, cachelib.N_REPLICATIONS):
        jobs.append((f"example1 rep {rep:02d}", lambda r=rep: cachelib.ensure_example1_rep(r)))

    with threadpool_limits(limits=1):
        for name, fn in jobs:
            t0 = time.time()
            fn()
            log(f"{name} ready ({time.time() - t0:.0f}s)")
    log("cache warm")


if __name__ == "__main__":
    main()
