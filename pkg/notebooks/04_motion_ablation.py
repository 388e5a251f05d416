"""Motion-only task: central differences versus no motion branch, plus a frame-shuffle control.

Every class visits the same ring of positions, so only the visiting order carries
the label. Shuffling frames should push accuracy to chance.
Run with ``python notebooks/04_motion_ablation.py [epochs]``.
"""
import csv
import sys

from msfmamba import cli

epochs = sys.argv[1] if len(sys.argv) > 1 else "20"
rows = []
for seed in ("0", "1", "2"):
    for mode, shuffle in (("central", "false"), ("none", "false"), ("central", "true")):
        if shuffle == "true" and seed != "0":
            continue
        out = f"runs/ablation/{mode}_{shuffle}_{seed}"
        common = ["--out", out, "--synth_mode", "motion_only", "--seed", seed]
        cli.main(["gen", *common])
        cli.main(["train", *common, "--epochs", epochs, "--warmup_epochs", "2",
                  "--motion_mode", mode, "--frame_shuffle", shuffle])
        with open(f"{out}/metrics.csv") as fh:
            top1 = list(csv.DictReader(fh))[-1]["top1"]
        rows.append((seed, mode, shuffle, top1))

for r in rows:
    print("seed {} motion {} shuffled {}: val top1 {}".format(*r))
