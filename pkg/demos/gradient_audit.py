"""Finite-difference audit of every differentiable primitive, as a table.

Run: python demos/gradient_audit.py [n_seeds]
"""

import sys

from halftruth import gradsuite

n = int(sys.argv[1]) if len(sys.argv) > 1 else 3
results = gradsuite.run_suite(seeds=range(n))
print(gradsuite.format_table(results))
print(f"{sum(r.passed for r in results)}/{len(results)} primitives within tolerance")
