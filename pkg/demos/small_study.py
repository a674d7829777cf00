"""A few replications of the p=36 study, printed as accuracy and selection tables.

Run with:  python demos/small_study.py [reps]
The full reproduction uses 30 replications (see tests/test_acceptance.py).
"""

import sys

from spatial_lda.experiments import BASE_METHODS, Scenario, format_table, run_study

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 3
reports = [run_study(Scenario(u=6, r=r), BASE_METHODS, reps, base_seed=2024) for r in (1.0, 9.0)]
print(format_table(reports))
print()
print(format_table(reports, metric="selectedN", digits=1))
