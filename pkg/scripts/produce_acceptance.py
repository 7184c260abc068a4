"""Produce the cached simulation outputs the acceptance suite reads.

Idempotent: cells whose manifest already matches are skipped, so an
interrupted run can simply be restarted.

Usage: python3 scripts/produce_acceptance.py
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from acceptance_scenarios import ACCEPT_DIR, ensure_produced, scenario_plan


def main():
    plan = scenario_plan()
    print(f"{len(plan)} cells -> {ACCEPT_DIR}", flush=True)
    t0 = time.time()
    for i, (sc, dump) in enumerate(plan, 1):
        start = time.time()
        ensure_produced(sc, dump)
        print(
            f"[{i:2d}/{len(plan)}] {sc.scenario_id}: {sc.n_reps} reps, "
            f"{time.time() - start:.0f}s (total {time.time() - t0:.0f}s)",
            flush=True,
        )
    print("done", flush=True)


if __name__ == "__main__":
    main()
