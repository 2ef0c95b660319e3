"""Pretrain, transfer, distill: the full triage workflow at a small scale.

A multi-head network is pretrained on eight synthetic "disease" patterns,
its backbone and pneumonia head are transplanted into a 3-class teacher,
and a network about four times smaller learns from that teacher. The
student trained without a teacher is shown for comparison.

Run: python demos/transfer_and_distill.py   (about two minutes on one core)
"""
from dataclasses import replace

from ktdkit import datakit, evalkit, nets, pipeline
from ktdkit.losses import DistillConfig
from ktdkit.pipeline import TrainConfig

base = datakit.TriageConfig()
train = datakit.synth_triage(replace(base, images_per_class=200, seed=1))
val = datakit.synth_triage(replace(base, images_per_class=30, seed=2))
test = datakit.synth_triage(replace(base, images_per_class=60, seed=3))
print(f"triage data: {len(train)} train / {len(val)} val / {len(test)} test images")

# 1. multi-head pretraining (independent binary loss per head)
ap_spec = pipeline.ap_spec()
ap_data = datakit.synth_triage(replace(base, class_names=datakit.AP_DISEASES, images_per_class=100, seed=10))
ap = pipeline.pretrain_ap(ap_spec, ap_data, TrainConfig(epochs=30)).bundle

# 2. weight surgery + fine-tuning; covid/normal heads start random
rf_spec = pipeline.rf_spec()
rf = pipeline.finetune_rf(ap, ap_spec, rf_spec, train, TrainConfig(epochs=20), val=val)
print(f"teacher: best val epoch {rf.state.best_epoch}, "
      f"test accuracy {evalkit.evaluate(rf_spec, rf.bundle, test).accuracy:.3f}")

# 3. the compact student, with and without the teacher
ms_spec = pipeline.ms_spec()
cfg = TrainConfig(epochs=30)
kd = pipeline.distill_ms(rf.bundle, rf_spec, ms_spec, train, DistillConfig(alpha=0.8, temperature=5.0), cfg, val=val)
plain = pipeline.train_plain(ms_spec, train, "pc", cfg, val=val)
for name, res in (("distilled", kd), ("plain", plain)):
    rep = evalkit.evaluate(ms_spec, res.bundle, test)
    aurocs = ", ".join(f"{k} {v:.3f}" for k, v in rep.auroc.items())
    print(f"student ({name}): accuracy {rep.accuracy:.3f}; AUROC {aurocs}")

print(f"params: teacher {nets.count_params(rf_spec)}, student {nets.count_params(ms_spec)}; "
      f"MACs: teacher {nets.count_macs(rf_spec)}, student {nets.count_macs(ms_spec)}")
