"""Plan one wake window from a task network and a state file, then compare
with a low-charge start where one rover's drive gets cut short.

Run:  python demos/batch_plan.py
"""

import json
from pathlib import Path

from roverteam.cli import load_snapshot
from roverteam.resources import EnvironmentModel, background_rates
from roverteam.scheduler import plan_priority_insertion
from roverteam.tasknet import expand_instances, load_network

HERE = Path(__file__).parent


def plan_for(state_file: str, window_end: int):
    net = load_network((HERE / "networks" / "exploration.txt").read_text())
    snap = load_snapshot((HERE / "states" / state_file).read_text(), net)
    plan = plan_priority_insertion(expand_instances(net), snap, (snap.time, window_end),
                                   background=background_rates(net, EnvironmentModel()))
    return plan


for state in ("fresh.json", "low_charge.json"):
    plan = plan_for(state, 400)
    drive = plan.entries.get("explore_drive.c0.rover1")
    print(f"{state}: {len(plan.entries)} tasks placed, {len(plan.rejected)} rejected")
    if drive is not None:
        print(f"  rover1 first drive {drive.start}..{drive.end} s")
    print("  self-check:", plan.verify() or "ok")

print(json.dumps(json.loads(plan.to_jsonl().splitlines()[0]), indent=2))
