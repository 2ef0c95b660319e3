"""Knowledge transfer and distillation toolkit for small image classifiers.

Modules
-------
losses
    Softmax, cross-entropy, probability-margin, angular-margin and
    distillation objectives with gradients.
nets
    Declarative networks, numpy forward/backward, weight surgery, complexity.
pipeline
    Pre-training, fine-tuning, distillation and plain training loops.
trajectory
    Follow-up sequence labelling, feature aggregation and classifiers.
evalkit
    Accuracy, AUROC, ROC points and hyperparameter sweeps.
datakit
    Synthetic generators, manifests and patient-grouped splits.
"""
__version__ = "0.1.0"
