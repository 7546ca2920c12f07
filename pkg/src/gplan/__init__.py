"""Toolkit for latent-CoT plan distillation and counterfactual preference alignment on toy models."""

__version__ = "0.1.0"
