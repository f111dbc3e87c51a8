"""Desk-scale lab for universal transferable adversarial patch attacks.

Optimizes one physical patch against a toy surrogate vision-language-action
policy (feature deviation, repulsive contrastive, attention-hijack, and
semantic-misalignment losses under a bi-level schedule), evaluates black-box
transfer to a distinct toy victim, and executably checks the linear
feature-alignment theory behind the transfer claim.
"""

__version__ = "0.1.0"
