"""Kill the leading base station halfway through a window and watch the
rovers elect a replacement.

Run:  python demos/leader_loss.py
"""

from pathlib import Path

from roverteam import audit
from roverteam.mission import Scenario, Simulation

scen = Scenario.load(Path(__file__).parent / "scenarios" / "leader_kill.json")
result = Simulation(scen).run()

for rec in audit.leader_records(result.trace):
    p = rec["payload"]
    if rec["agent"] == "rover1":
        print(f"{rec['time']:8.2f}  rover1 follows {p['leader']} (epoch {p['epoch']})")
for r in audit.recovery_times(result.trace):
    print(f"{r['killed']} lost at {r['at']:.1f}s; team agreed on a new leader "
          f"{r['idle']:.2f}s later")
print(audit.run_report(result.trace, result.trace_hash).text())
