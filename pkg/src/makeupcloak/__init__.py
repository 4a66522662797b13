"""makeupcloak: makeup-style transfer that embeds transferable
identity-protection perturbations against face-recognition ensembles."""

__version__ = "0.1.0"
