"""Certificate provisioning and trust policy for the tunnel handshake.

The server side either loads operator-provided PEM/DER material or
generates a fresh self-signed certificate at startup.  The client side
builds an ``ssl.SSLContext`` from a :class:`TrustPolicy`: full chain and
hostname verification (optionally against pinned roots), or an
accept-anything mode intended strictly for tests.
"""

from __future__ import annotations

import ipaddress
import logging
import os
import ssl
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec

from .errors import ConfigError

log = logging.getLogger("quictun.security")

# Both ends must offer/expect this ALPN identifier during the handshake.
ALPN_PROTOCOL = "quic-tun/1"

SELF_SIGNED_BACKDATE = timedelta(hours=1)
SELF_SIGNED_LIFETIME = timedelta(days=90)


class TrustMode(Enum):
    VERIFY_STANDARD = "verify_standard"
    INSECURE_ACCEPT_ANY = "insecure_accept_any"


@dataclass(frozen=True)
class CertificateMaterial:
    """A leaf certificate chain plus its private key, both DER-encoded."""

    certificate_chain_der: tuple[bytes, ...]
    private_key_der: bytes
    subject_names: tuple[str, ...]

    def __post_init__(self):
        if not self.certificate_chain_der:
            raise ConfigError("certificate chain must contain at least one certificate")
        if not self.subject_names:
            raise ConfigError("certificate material must carry at least one subject name")
        leaf = x509.load_der_x509_certificate(self.certificate_chain_der[0])
        key = serialization.load_der_private_key(self.private_key_der, password=None)
        if key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        ) != leaf.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        ):
            raise ConfigError("private key does not match the leaf certificate")

    @property
    def leaf_der(self) -> bytes:
        return self.certificate_chain_der[0]

    def chain_pem(self) -> bytes:
        parts = []
        for der in self.certificate_chain_der:
            cert = x509.load_der_x509_certificate(der)
            parts.append(cert.public_bytes(serialization.Encoding.PEM))
        return b"".join(parts)

    def private_key_pem(self) -> bytes:
        key = serialization.load_der_private_key(self.private_key_der, password=None)
        return key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )


@dataclass(frozen=True)
class TrustPolicy:
    """How the client judges the server certificate.

    ``pinned_roots_pem`` adds trust anchors on top of (not instead of)
    standard verification semantics; with VERIFY_STANDARD and no pins the
    system store is used.
    """

    mode: TrustMode = TrustMode.VERIFY_STANDARD
    pinned_roots_pem: tuple[bytes, ...] = field(default=())


def generate_self_signed(subject_names: list[str]) -> CertificateMaterial:
    """Generate a fresh self-signed server certificate for the given names.

    Names may be DNS names or IP address literals; each becomes the
    matching SAN type.  The key is ECDSA P-256.  Validity runs from one
    hour in the past (clock-skew slack) to 90 days out.  The extension
    set (CA:FALSE, digitalSignature, serverAuth EKU, SKI/AKI) is chosen
    so the certificate passes both OpenSSL pinning and strict
    webpki-style verifiers when pinned as its own trust anchor.
    """
    if not subject_names:
        raise ConfigError("subject_names must be non-empty")

    key = ec.generate_private_key(ec.SECP256R1())
    sans: list[x509.GeneralName] = []
    for name in subject_names:
        try:
            sans.append(x509.IPAddress(ipaddress.ip_address(name)))
        except ValueError:
            sans.append(x509.DNSName(name))

    subject = x509.Name([x509.NameAttribute(x509.NameOID.COMMON_NAME, subject_names[0])])
    now = datetime.now(timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - SELF_SIGNED_BACKDATE)
        .not_valid_after(now + SELF_SIGNED_LIFETIME)
        .add_extension(x509.SubjectAlternativeName(sans), critical=False)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True,
                key_cert_sign=False,
                content_commitment=False,
                key_encipherment=False,
                data_encipherment=False,
                key_agreement=False,
                crl_sign=False,
                encipher_only=False,
                decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(
            x509.ExtendedKeyUsage([x509.ExtendedKeyUsageOID.SERVER_AUTH]), critical=False
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(key.public_key()), critical=False
        )
        .sign(key, hashes.SHA256())
    )

    return CertificateMaterial(
        certificate_chain_der=(cert.public_bytes(serialization.Encoding.DER),),
        private_key_der=key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        ),
        subject_names=tuple(subject_names),
    )


def load_certificate_files(cert_path: str | Path, key_path: str | Path) -> CertificateMaterial:
    """Load operator-provided certificate material (PEM or DER files)."""
    cert_bytes = Path(cert_path).read_bytes()
    key_bytes = Path(key_path).read_bytes()

    chain: list[bytes] = []
    if b"-----BEGIN" in cert_bytes:
        for cert in x509.load_pem_x509_certificates(cert_bytes):
            chain.append(cert.public_bytes(serialization.Encoding.DER))
    else:
        chain.append(x509.load_der_x509_certificate(cert_bytes).public_bytes(serialization.Encoding.DER))

    if b"-----BEGIN" in key_bytes:
        key = serialization.load_pem_private_key(key_bytes, password=None)
    else:
        key = serialization.load_der_private_key(key_bytes, password=None)
    key_der = key.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )

    leaf = x509.load_der_x509_certificate(chain[0])
    names: list[str] = []
    try:
        san = leaf.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
        names.extend(str(n) for n in san.get_values_for_type(x509.DNSName))
        names.extend(str(ip) for ip in san.get_values_for_type(x509.IPAddress))
    except x509.ExtensionNotFound:
        pass
    if not names:
        cn = leaf.subject.get_attributes_for_oid(x509.NameOID.COMMON_NAME)
        names = [str(cn[0].value)] if cn else ["unknown"]

    return CertificateMaterial(tuple(chain), key_der, tuple(names))


def server_ssl_context(material: CertificateMaterial) -> ssl.SSLContext:
    """Build the server-side TLS 1.3 context from in-memory material.

    ``SSLContext.load_cert_chain`` only accepts file paths, so the PEM
    material transits through a private temporary directory that is
    removed immediately after loading.
    """
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.set_alpn_protocols([ALPN_PROTOCOL])
    with tempfile.TemporaryDirectory(prefix="quictun-cert-") as tmp:
        cert_file = os.path.join(tmp, "cert.pem")
        key_file = os.path.join(tmp, "key.pem")
        with open(cert_file, "wb") as fh:
            fh.write(material.chain_pem())
        fd = os.open(key_file, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(material.private_key_pem())
        ctx.load_cert_chain(cert_file, key_file)
    return ctx


def build_trust(policy: TrustPolicy) -> ssl.SSLContext:
    """Build the client-side verifier context for the tunnel handshake.

    VERIFY_STANDARD performs chain and hostname verification against the
    system store plus any pinned roots.  INSECURE_ACCEPT_ANY disables all
    verification and logs a prominent warning; it must never be a default
    anywhere upstream of this call.
    """
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.set_alpn_protocols([ALPN_PROTOCOL])
    if policy.mode is TrustMode.INSECURE_ACCEPT_ANY:
        log.warning(
            "TLS verification DISABLED (insecure_accept_any): the tunnel peer "
            "is not authenticated; use only for testing"
        )
        ctx.check_hostname = False
        ctx.verify_mode = ssl.CERT_NONE
        return ctx

    ctx.check_hostname = True
    ctx.verify_mode = ssl.CERT_REQUIRED
    ctx.load_default_certs(ssl.Purpose.SERVER_AUTH)
    for pem in policy.pinned_roots_pem:
        ctx.load_verify_locations(cadata=pem.decode("ascii"))
    return ctx
