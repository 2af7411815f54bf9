"""latentmark: a desk-scale lab for reusable watermark adapters.

The package trains a latent message codec, distills the message into a
low-rank denoiser adapter via gradient-orthogonal projection, composes
that adapter with style adapters by linear superposition, and verifies
ownership of generated images with exact binomial statistics.
"""

__version__ = "0.1.0"
