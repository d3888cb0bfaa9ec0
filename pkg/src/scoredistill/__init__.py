"""Score distillation (SDS, CSD, VSD, ASD, DDS) against analytic Gaussian-mixture oracles."""

__version__ = "0.1.0"
