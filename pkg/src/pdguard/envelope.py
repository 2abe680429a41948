"""Hybrid encryption envelopes for crypto-erasure.

A fresh AES-256-GCM key encrypts the record; the key itself is wrapped with
the authority's RSA public key (OAEP/SHA-256). Only the authority's private
key, which never lives in the store, can unwrap it.
"""

from __future__ import annotations

import base64
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import DecryptFailure, KeyParseError

KEM_RSA_OAEP_SHA256 = "RSA-OAEP-SHA256"
AEAD_AES_256_GCM = "AES-256-GCM"

_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


@dataclass(frozen=True)
class CiphertextEnvelope:
    kem: str
    aead: str
    wrapped_key: bytes
    nonce: bytes
    ciphertext: bytes
    binding: str  # authenticated, not encrypted: the ref of the erased record

    def to_dict(self) -> dict:
        b64 = lambda b: base64.b64encode(b).decode("ascii")  # noqa: E731
        return {
            "aead": self.aead,
            "binding": self.binding,
            "ciphertext": b64(self.ciphertext),
            "kem": self.kem,
            "nonce": b64(self.nonce),
            "wrapped_key": b64(self.wrapped_key),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CiphertextEnvelope:
        return cls(
            kem=d["kem"],
            aead=d["aead"],
            wrapped_key=base64.b64decode(d["wrapped_key"]),
            nonce=base64.b64decode(d["nonce"]),
            ciphertext=base64.b64decode(d["ciphertext"]),
            binding=d["binding"],
        )


def generate_authority_keypair(bits: int = 3072) -> tuple[bytes, bytes]:
    """Return ``(private_pem, public_pem)``. The private half belongs to the authority."""
    key = rsa.generate_private_key(public_exponent=65537, key_size=bits)
    private_pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    public_pem = key.public_key().public_bytes(
        serialization.Encoding.PEM,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    )
    return private_pem, public_pem


def load_public_key(pem: bytes | str) -> rsa.RSAPublicKey:
    if isinstance(pem, str):
        pem = pem.encode("ascii")
    try:
        key = serialization.load_pem_public_key(pem)
    except (ValueError, TypeError) as exc:
        raise KeyParseError(f"cannot parse public key: {exc}") from None
    if not isinstance(key, rsa.RSAPublicKey):
        raise KeyParseError("authority key must be an RSA public key")
    return key


def load_private_key(pem: bytes | str) -> rsa.RSAPrivateKey:
    if isinstance(pem, str):
        pem = pem.encode("ascii")
    try:
        key = serialization.load_pem_private_key(pem, password=None)
    except (ValueError, TypeError) as exc:
        raise KeyParseError(f"cannot parse private key: {exc}") from None
    if not isinstance(key, rsa.RSAPrivateKey):
        raise KeyParseError("authority key must be an RSA private key")
    return key


def seal(plaintext: bytes, public_key: rsa.RSAPublicKey, binding: str) -> CiphertextEnvelope:
    data_key = AESGCM.generate_key(bit_length=256)
    nonce = os.urandom(12)
    ciphertext = AESGCM(data_key).encrypt(nonce, plaintext, binding.encode("utf-8"))
    return CiphertextEnvelope(
        kem=KEM_RSA_OAEP_SHA256,
        aead=AEAD_AES_256_GCM,
        wrapped_key=public_key.encrypt(data_key, _OAEP),
        nonce=nonce,
        ciphertext=ciphertext,
        binding=binding,
    )


def unseal(envelope: CiphertextEnvelope, private_key: rsa.RSAPrivateKey) -> bytes:
    if envelope.kem != KEM_RSA_OAEP_SHA256 or envelope.aead != AEAD_AES_256_GCM:
        raise DecryptFailure(f"unsupported algorithms {envelope.kem}/{envelope.aead}")
    try:
        data_key = private_key.decrypt(envelope.wrapped_key, _OAEP)
        return AESGCM(data_key).decrypt(envelope.nonce, envelope.ciphertext,
                                        envelope.binding.encode("utf-8"))
    except (ValueError, InvalidTag):
        raise DecryptFailure("envelope does not open with this key or was tampered with") from None
