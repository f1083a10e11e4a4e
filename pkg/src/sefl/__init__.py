"""Secure federated learning with Paillier aggregation, block-Hankel
compression and differentially private release."""

from .ahe import FixedPointParams, KeyPair, keygen
from .bhm import BhmParams, BhmUpdate, compress, decompress
from .dp import DpParams, PrivacyLedger, derive_sigma
from .fedsim import SimConfig, run_simulation

__all__ = [
    "BhmParams",
    "BhmUpdate",
    "DpParams",
    "FixedPointParams",
    "KeyPair",
    "PrivacyLedger",
    "SimConfig",
    "compress",
    "decompress",
    "derive_sigma",
    "keygen",
    "run_simulation",
]
