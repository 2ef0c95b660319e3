"""Follow-up trajectories: label sequences, then compare the two aggregations.

Each patient's chronological images are cut into windows of up to four
images, labelled Worse / Stable / Improved from the last two opacity
scores. A frozen student network turns every image into a feature
vector; the classifier sees either the last-minus-previous difference or
all four (zero-padded) vectors side by side.

Run: python demos/follow_up_trajectories.py   (about a minute)
"""
from collections import Counter

import numpy as np

from ktdkit import datakit, pipeline, trajectory
from ktdkit.pipeline import TrainConfig
from ktdkit.trajectory import TrajClassifierConfig

patients = datakit.synth_longitudinal()
seqs = trajectory.all_sequences(patients)
print(f"{len(patients)} patients -> {len(seqs)} sequences, labels {dict(Counter(s.label for s in seqs))}")

one = patients[0]
print("first patient scores:", [round(si.opacity_score, 2) for si in one])
for s in trajectory.build_sequences(one):
    print(f"  window t{s.images[0].timepoint}..t{s.images[-1].timepoint}: {s.label}")

# feature extractor: a student trained briefly on the triage task
ms = pipeline.ms_spec()
triage = datakit.synth_triage(datakit.TriageConfig(images_per_class=100, seed=1))
extractor = pipeline.train_plain(ms, triage, "pc", TrainConfig(epochs=10)).bundle

train, _, test = datakit.split_by_patient(seqs, datakit.SplitSpec(stratify=False),
                                          patient_of=lambda s: s.patient_id, class_of=lambda s: s.label)
for scheme in trajectory.SCHEMES:
    clf = trajectory.train_traj_classifier(ms, extractor, train, scheme, TrajClassifierConfig())
    p = trajectory.predict_many(clf, extractor, test)
    acc = np.mean(p.argmax(axis=1) == trajectory.sequence_labels(test))
    print(f"{scheme:>13}: test accuracy {acc:.3f} on {len(test)} sequences")
