"""Forgery localization by fusing SRM residuals into the latent space of a frozen codec."""

__version__ = "0.1.0"
