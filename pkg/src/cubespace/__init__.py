"""Learn propositional STRIPS models from image transitions and plan in the learned latent space."""

__version__ = "0.1.0"
