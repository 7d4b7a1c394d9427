"""rover2 overheats while the leader cannot hear it.  The leader keeps
planning from old data and commits a drive; the rover's own pre-check
refuses it, and nothing runs outside its limits.

Run:  python demos/stale_rover.py
"""

from pathlib import Path

from roverteam import audit
from roverteam.mission import Scenario, Simulation

scen = Scenario.load(Path(__file__).parent / "scenarios" / "stale_rover.json")
result = Simulation(scen).run()
for ex in audit.executions(result.trace).values():
    if ex.agent == "rover2" and ex.window == 0 and ex.status != "completed":
        print(f"{ex.task}: {ex.status} ({ex.reason})")
print("constraint-violating executions:", len(audit.execution_violations(result.trace)))
