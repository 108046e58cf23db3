"""Toy text-conditioned diffusion with dynamically scheduled guidance.

A small variance-preserving diffusion stack (denoiser with cross-attention,
preference scorer, procedural shapes dataset) plus a guided sampler that
steers generation with two objectives: attention-map alignment against a
semantic graph of the prompt, and a learned step-aware preference score.
Guidance strength, objective mixing, and per-step recurrence are all
scheduled dynamically from the trajectory itself.
"""

__version__ = "0.1.0"
