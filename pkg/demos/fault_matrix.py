"""Run every task kind against every execution behavior and print the grid.

Run:  python demos/fault_matrix.py   (about a minute)
"""

from roverteam.matrix import run_matrix

report = run_matrix(progress=lambda c: print(f"{c.row:>14} x {c.behavior:<11} {c.status}"))
print()
print(report.render())
