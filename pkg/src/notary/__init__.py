"""Tamper-evident sealing of sensor logs with auditor and user verification."""

from .crypto import KeyPair, PublicKey
from .model import (
    ChunkId, Full, Marker, Mode, ProofForUser, ProofOfIntegrity, SealedChunk, SensorReading, SensorState,
    Tombstone,
)
from .policy import DataCaptureRule, Polarity, RuleSet, evaluate
from .sealing import ChunkPolicy, Enclave, Sealer, seal_chunk_entire, seal_chunk_mixed, seal_optimized
from .store import ChunkStore
from .verify import verify_auditor, verify_range, verify_user

__version__ = "0.1.0"

__all__ = [
    "KeyPair", "PublicKey", "ChunkId", "Full", "Marker", "Mode", "ProofForUser", "ProofOfIntegrity",
    "SealedChunk", "SensorReading", "SensorState", "Tombstone", "DataCaptureRule", "Polarity", "RuleSet",
    "evaluate", "ChunkPolicy", "Enclave", "Sealer", "seal_chunk_entire", "seal_chunk_mixed", "seal_optimized",
    "ChunkStore", "verify_auditor", "verify_range", "verify_user",
]
