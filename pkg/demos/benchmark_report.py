"""Read a ``posecal repro`` output directory and print what it measured.

Shows the four-system accuracy table, the alpha sweep on the clean-shifted
set with the selected alpha marked, and the patch-importance maps.

    posecal repro --seed 42 --out repro_out
    python demos/benchmark_report.py repro_out
"""

import json
import sys
from pathlib import Path

import numpy as np

from posecal.benchmark import summary_table


def main(out_dir):
    report = json.loads((Path(out_dir) / "report.json").read_text())
    print(summary_table(report), "\n")

    s = report["sets"]["clean_shifted"]
    sw = s["sweep"]
    print("clean_shifted sweep      accuracy  max prior  iters")
    for a, acc, p, it in zip(sw["alphas"], sw["accuracy"], sw["stable_priors"], sw["iterations"]):
        mark = "<- alpha_hat" if a == s["alpha_hat"] else ""
        print(f"  alpha {a:10.4g}  {acc:8.3f}  {max(p):9.3f}  {it:5d} {mark}")
    print("  patterns:", "".join(p[0] for p in sw["patterns"]),
          "(fallback)" if s["alpha_hat_fallback"] else "")

    np.set_printoptions(precision=3, suppress=True)
    for key, imp in report["patch_importance"].items():
        print(f"\npatch importance, {key}:\n{np.array(imp)}")

    print()
    for c in report["checks"]:
        print(f"criterion {c['id']}: {'PASS' if c['passed'] else 'FAIL'}  {c['name']}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "repro_out")
