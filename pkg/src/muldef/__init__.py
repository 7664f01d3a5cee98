"""Randomized multi-model defense against adversarial examples.

A family of adversarially trained networks is generated from a target
model, and each query is answered by one member drawn uniformly at random.
The package ships its own small numpy network engine, the FGSM and
Carlini & Wagner L2 attacks, a substitute-model black-box pipeline, and the
evaluation harness used to score the defense.
"""

__version__ = "0.1.0"
