"""A quick look at the three student losses and the distillation objective.

Run: python demos/losses_tour.py
"""
import numpy as np

from ktdkit import losses
from ktdkit.losses import ArcFaceConfig, DistillConfig, PCConfig

# Temperature flattens a distribution without changing its ranking.
z = np.array([3.0, 1.0, 0.2])
for t in (1.0, 5.0, 10.0):
    print(f"softmax at T={t:>4}: {np.round(losses.softmax(z, t), 3)}")

# The probability-margin loss is zero once the target beats every other
# class by at least xi, and grows linearly with each shortfall.
probs = np.array([[0.95, 0.03, 0.02], [0.5, 0.3, 0.2], [1 / 3, 1 / 3, 1 / 3]])
for xi in (0.5, 0.8):
    per_row = [losses.pc_loss(p[None], [0], PCConfig(xi)) for p in probs]
    print(f"PC loss, xi={xi}: {np.round(per_row, 3)}")

# Additive angular margin: only the target logit is pushed down, which
# forces the feature to sit closer to its class direction.
w = np.eye(3)
f = np.array([0.8, 0.6, 0.0])
print("cosine logits      :", np.round(losses.arcface_logits(f, w, 0, ArcFaceConfig(1.0, 0.0)), 3))
print("with margin, s=30  :", np.round(losses.arcface_logits(f, w, 0, ArcFaceConfig(30.0, 0.5)), 3))

# Distillation mixes the softened teacher/student KL with the student's
# own loss. alpha=0 leaves only the student loss.
student, teacher = np.array([1.0, 0.5, -0.5]), np.array([4.0, 2.5, -1.0])
for alpha in (0.0, 0.5, 0.8, 1.0):
    cfg = DistillConfig(alpha=alpha, temperature=5.0, student_loss="pc")
    print(f"KD loss alpha={alpha}: {losses.kd_loss(student, teacher, 0, cfg):.4f}")
