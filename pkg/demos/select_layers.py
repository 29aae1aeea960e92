"""Pick which layers to replace from a table of per-layer quality scores.

    python3 demos/select_layers.py [scores.csv] [budget]

Each row says how a quality dimension scores with the original model, with
one layer replaced by its hybrid student, and with that layer skipped.
Dimensions the students recover well are cheap to lose a little on; the
others decide which layers are protected.
"""

import sys
from pathlib import Path

from gdnstream import selection

here = Path(__file__).resolve().parent
path = Path(sys.argv[1]) if len(sys.argv) > 1 else here.parent / "tests/fixtures/scores_synthetic.csv"
budget = int(sys.argv[2]) if len(sys.argv) > 2 else 6

table = selection.ScoreTable.load(path)
res = selection.select_layers(table, budget)

print("mean recovery per dimension")
for j, dim in enumerate(table.dimensions):
    tag = "recoverable" if dim in res.hr_dims else "sensitive"
    print(f"  {dim:<12} {res.arr[:, j].mean():6.3f}  {tag}")

print("\nprotection score per layer (smaller = safer to replace)")
for layer in table.layers:
    mark = "*" if layer in res.replaced else " "
    print(f"  {mark} layer {layer:2d}  p = {res.p[layer]:7.3f}")

for beta in (0.1, 0.5, 1.0):
    print(f"beta {beta}: replace {selection.select_layers(table, budget, beta=beta).replaced}")
