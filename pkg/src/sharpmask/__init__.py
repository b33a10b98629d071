"""Adversarial sharpening masks for DeepFake anti-forensics.

Two-stage pipeline: a Forensics Disruption Network (FDN) injects
adversarial perturbations into DeepFake frames so forgery detectors
misclassify them, then a Visual Enhancement Network (VEN) re-shapes the
perturbation into an unsharp-mask-like sharpening effect that improves
perceptual quality.
"""

__version__ = "0.1.0"
