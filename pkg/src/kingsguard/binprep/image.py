"""The KGIM program image container.

Layout (all integers little-endian)::

    "KGIM" | version u16 | section count u16
    count x (name 8 bytes, NUL padded | offset u64 | length u64)
    section payloads, in table order

``.mac`` holds one ``name | HMAC-SHA256(key, name || payload)`` record per
section it covers.  Every other section is covered, which includes the taint
bitmap and the declassification hash set.
"""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field

from ..errors import BadMagic, ImageError, MacMismatch, MissingSection

MAGIC = b"KGIM"
VERSION = 1
HEADER = struct.Struct("<4sHH")
ENTRY = struct.Struct("<8sQQ")
MAC_RECORD = 8 + 32

TEXT, DATA, SENS, SHARED, META = ".text", ".data", ".sens", ".shared", ".meta"
TAINTS, HASHES, MAC = ".taints", ".hashes", ".mac"
SECTION_ORDER = (TEXT, DATA, SENS, SHARED, META, TAINTS, HASHES, MAC)


@dataclass(frozen=True)
class ImageMeta:
    text_base: int
    data_base: int
    sensitive_base: int
    shared_base: int
    entry: int
    host_entry: int
    irq_handler: int = 0

    _FMT = struct.Struct("<7Q")

    def pack(self) -> bytes:
        return self._FMT.pack(self.text_base, self.data_base, self.sensitive_base,
                              self.shared_base, self.entry, self.host_entry, self.irq_handler)

    @classmethod
    def unpack(cls, blob: bytes) -> "ImageMeta":
        if len(blob) != cls._FMT.size:
            raise ImageError("malformed .meta section")
        return cls(*cls._FMT.unpack(blob))



@dataclass
class ProgramImage:
    sections: dict[str, bytes] = field(default_factory=dict)

    @property
    def meta(self) -> ImageMeta:
        return ImageMeta.unpack(self.sections[META])

    def section(self, name: str) -> bytes:
        return self.sections.get(name, b"")

    def without(self, name: str) -> "ProgramImage":
        return ProgramImage({k: v for k, v in self.sections.items() if k != name})


def _mac(key: bytes, name: str, payload: bytes) -> bytes:
    return hmac.new(key, name.encode() + payload, hashlib.sha256).digest()


def compute_mac_section(sections: dict[str, bytes], key: bytes) -> bytes:
    out = bytearray()
    for name, payload in sections.items():
        if name != MAC:
            out += _name8(name) + _mac(key, name, payload)
    return bytes(out)


def _name8(name: str) -> bytes:
    raw = name.encode("ascii")
    if len(raw) > 8:
        raise ValueError(f"section name {name!r} longer than 8 bytes")
    return raw.ljust(8, b"\0")


def serialize(image: ProgramImage) -> bytes:
    names = list(image.sections)
    offset = HEADER.size + ENTRY.size * len(names)
    table, payload = bytearray(), bytearray()
    for name in names:
        data = image.sections[name]
        table += ENTRY.pack(_name8(name), offset + len(payload), len(data))
        payload += data
    return HEADER.pack(MAGIC, VERSION, len(names)) + bytes(table) + bytes(payload)


def emit_image(sections: dict[str, bytes], taints: bytes, hashes: bytes, key: bytes) -> bytes:
    """Assemble the final byte stream; section order is fixed so output is deterministic."""
    body = {name: sections[name] for name in SECTION_ORDER if name in sections}
    body[TAINTS] = taints
    body[HASHES] = hashes
    ordered = {name: body[name] for name in SECTION_ORDER if name in body}
    ordered[MAC] = compute_mac_section(ordered, key)
    return serialize(ProgramImage(ordered))


def parse_image(blob: bytes) -> ProgramImage:
    if len(blob) < HEADER.size:
        raise BadMagic("image shorter than its header")
    magic, version, count = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise ImageError(f"unsupported image version {version}")
    sections: dict[str, bytes] = {}
    for i in range(count):
        at = HEADER.size + i * ENTRY.size
        if at + ENTRY.size > len(blob):
            raise ImageError("truncated section table")
        raw, off, length = ENTRY.unpack_from(blob, at)
        if off + length > len(blob):
            raise ImageError("section payload beyond end of image")
        name = raw.rstrip(b"\0").decode("ascii", errors="replace")
        if name in sections:
            raise ImageError(f"duplicate section {name}")
        sections[name] = bytes(blob[off:off + length])
    return ProgramImage(sections)


def verify_image(image: ProgramImage, key: bytes) -> None:
    """Presence checks first, then every MAC record."""
    for name in (TAINTS, HASHES, META, MAC):
        if not image.section(name):
            raise MissingSection(name)
    mac_blob = image.sections[MAC]
    if len(mac_blob) % MAC_RECORD:
        raise MacMismatch("malformed .mac section")
    records = {}
    for at in range(0, len(mac_blob), MAC_RECORD):
        name = mac_blob[at:at + 8].rstrip(b"\0").decode("ascii", errors="replace")
        records[name] = mac_blob[at + 8:at + MAC_RECORD]
    covered = [n for n in image.sections if n != MAC]
    if set(records) != set(covered):
        raise MacMismatch("MAC records do not cover exactly the image sections")
    for name in covered:
        if not hmac.compare_digest(records[name], _mac(key, name, image.sections[name])):
            raise MacMismatch(f"MAC mismatch on {name}")
