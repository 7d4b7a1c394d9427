"""A formation drive where one rover leaves its corridor: the leader clears
the shared coordination flag and aborts the other two drives.  The same run
is repeated over links that drop 30% of messages.

Run:  python demos/formation_abort.py
"""

from pathlib import Path

from roverteam import audit
from roverteam.mission import Scenario, Simulation

for name in ("corridor_failure", "lossy_links"):
    scen = Scenario.load(Path(__file__).parent / "scenarios" / f"{name}.json")
    result = Simulation(scen).run()
    print(f"== {name} (drop {scen.drop})")
    for ex in sorted(audit.executions(result.trace).values(), key=lambda e: e.agent):
        if ex.task.startswith("formation.c0."):
            print(f"  {ex.agent}: {ex.status:<9} {ex.reason:<18} ended {ex.end:.2f}s")
    for rec in audit.of_kind(result.trace, "abort"):
        print(f"  abort sent at {rec['time']:.2f}s for {rec['payload']}")
