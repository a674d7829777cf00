"""Spatially dependent two-class LDA with penalized maximum likelihood."""
