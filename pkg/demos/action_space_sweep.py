"""MSE, bias and variance as the action space grows.

A reduced version of the default sweep (20 replications instead of 100) that
finishes in a few minutes and writes CSV, a text summary and three SVG charts
to ``demo_results/``. The full-size run is ``ope-lab run --config demos/sweep.ini``.
"""

from ope_lab.experiment import SweepConfig, emit_report, run_sweep

config = SweepConfig(action_space_grid=(10, 50, 100, 500, 1000), n_replications=20, base_seed=0)
table = run_sweep(config)
paths = emit_report(table, "demo_results")
print(paths["summary"].read_text())
for path in paths.values():
    print("wrote", path)
