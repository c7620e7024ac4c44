"""
Walker speeds: VAE, diverse GAIL, and the unconditional baseline
=================================================================

Reduced-size run of the full walker pipeline through the command line
entry point.  Expect a few minutes on one core; the acceptance suite runs
the same commands at full size.
"""

import json
import sys
import tempfile
from pathlib import Path

from diverse_imitation import cli

small = """
[env]
kind = walker
[dataset]
rollouts = 2
[vae]
epochs = 100
encoder_width = 16
action_sizes = 32, 32
channels = 8
wavenet_layers = 2
[gail]
iterations = 30
n = 8
"""

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="walker-"))
out.mkdir(parents=True, exist_ok=True)
cfg = out / "small.ini"
cfg.write_text(small)

steps = [
    ["gen-demos"],
    ["train-vae"],
    ["train-gail"],
    ["train-gail", "--unconditional"],
    ["eval", "--gail", str(out / "gail"), "--gail", str(out / "gail_unconditional")],
    ["blend"],
]
for argv in steps:
    print("running", " ".join(argv))
    code = cli.run_command(argv + ["--config", str(cfg), "--out", str(out)])
    if code:
        sys.exit(code)

summary = json.loads((out / "eval_summary.json").read_text())
print("\nmedian |speed difference| and mode coverage per policy")
for name, agg in summary.items():
    print(f"  {name:20s} median {agg['median']:.3f}   coverage {agg['mode_coverage']:.2f}")

blend = json.loads((out / "blend_summary.json").read_text())
print("\nblend from speed %.2f to %.2f ends at %.2f"
      % (blend["speed_a"], blend["speed_b"], blend["late_mean_speed"]))
print("outputs in", out)
