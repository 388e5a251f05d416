"""Train the desk preset on the default synthetic task and print the learning curve.

This is the run behind acceptance criterion 7; it takes about ten minutes on one core.
Run with ``python notebooks/03_train_desk.py [out_dir]``.
"""
import sys

from msfmamba import cli

out = sys.argv[1] if len(sys.argv) > 1 else "runs/desk"
cli.main(["gen", "--out", out])
cli.main(["train", "--out", out])
cli.main(["export-attn", "--out", out, "--clip_index", "0"])
