"""Bilateral adversarial training toolkit: perturb images and labels together."""

__version__ = "0.1.0"
