"""The alpha / temperature / loss grid, at a size that finishes quickly.

Prints the two blocks (alpha rows at T=5, T rows at alpha=0.8); every
cell shows the mean over seeds and the per-seed values in brackets.

Run: python demos/small_sweep.py   (a few minutes; pass a number to use worker processes)
"""
import sys
from dataclasses import replace

from ktdkit import datakit, evalkit, pipeline
from ktdkit.pipeline import TrainConfig

jobs = int(sys.argv[1]) if len(sys.argv) > 1 else 1
base = datakit.TriageConfig()
train = datakit.synth_triage(replace(base, images_per_class=200, seed=1))
test = datakit.synth_triage(replace(base, images_per_class=30, seed=3))

rf_spec = pipeline.rf_spec()
seeds = (0,)
teachers = {s: pipeline.finetune_rf(None, None, rf_spec, train, TrainConfig(epochs=20, seed=s),
                                    transfer=False).bundle for s in seeds}
inputs = evalkit.SweepInputs(train, None, test, rf_spec, teachers, TrainConfig(epochs=20))
# two of the four student losses keep the run short
losses = (evalkit.LossVariant("pc", 0.8), evalkit.LossVariant("softmax"))
table = evalkit.run_sweep(evalkit.default_grids(seeds=seeds, losses=losses), inputs, jobs=jobs)
print(evalkit.format_sweep(table, losses=losses))
print(evalkit.format_sweep(table, metric="covid_vs_normal", losses=losses))
