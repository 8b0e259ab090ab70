"""Scene flow for point-cloud pairs: coarse initialization plus conditional-diffusion
residual refinement with joint per-point uncertainty."""

__version__ = "0.1.0"
