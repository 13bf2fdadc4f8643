"""Config-driven experiments through the command-line interface.

Equivalent shell session:

    vpr presets list
    vpr validate linreg_coverage --set replicates=2
    VPR_OUTPUT_ROOT=/tmp/runs vpr run linreg_coverage --set replicates=2 ...

Run: python demos/demo_cli.py
"""

import json
import os
import tempfile
from pathlib import Path

from vpr import cli

print("$ vpr presets list")
cli.main(["presets", "list"])

small = ["--set", "replicates=3", "--set", "data.d=5", "--set", "methods=exact,mf_vi,vpr_ideal",
         "--set", "resampling.paths=500", "--set", "resampling.horizon=2000"]
print("\n$ vpr validate linreg_coverage", " ".join(small))
cli.main(["validate", "linreg_coverage", *small])

with tempfile.TemporaryDirectory() as root:
    os.environ["VPR_OUTPUT_ROOT"] = root
    print("\n$ VPR_OUTPUT_ROOT=%s vpr run linreg_coverage ... --quiet" % root)
    code = cli.main(["run", "linreg_coverage", *small, "--quiet"])
    out = Path(root) / "linreg_coverage"
    print("exit code", code)
    print("files:", sorted(p.name for p in out.iterdir()))
    print("replicate files:", sorted(p.name for p in (out / "replicate_000").iterdir())[:6], "...")
    summary = json.loads((out / "manifest.json").read_text())["summary"]
    for method, metrics in summary.items():
        c = metrics["coverage"]
        print(f"  {method:10s} coverage {c['mean']:.3f}  95% CI [{c['ci_low']:.3f}, {c['ci_high']:.3f}]")

print("\n$ vpr validate (a broken config)")
with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as fh:
    fh.write("experiment = logistic_sim\nmethods = exact, vpr_ideal\n")
print("exit code", cli.main(["validate", fh.name]))
os.unlink(fh.name)
