"""Build pipeline: source -> sections, T*, CFG, declassification paths, signed image."""
from __future__ import annotations

from dataclasses import dataclass

from ..layout import DEFAULT_LAYOUT, Layout
from . import image as img
from .adp import DEFAULT_PATH_BOUND, AdpPath, enumerate_adps, manual_adp
from .assembler import Program, assemble
from .bitmap import build_taint_bitmap
from .cfg import Cfg, build_cfg


@dataclass
class PrepResult:
    program: Program
    cfg: Cfg
    paths: list[AdpPath]
    taints: bytes
    hashes: bytes
    image: bytes

    @property
    def digests(self) -> list[bytes]:
        return [self.hashes[i:i + 32] for i in range(0, len(self.hashes), 32)]


def find_paths(program: Program, cfg: Cfg, path_bound: int = DEFAULT_PATH_BOUND) -> list[AdpPath]:
    if program.entry is None:
        return []
    if program.manual_adps:
        paths = []
        for _line, labels in program.manual_adps:
            nodes = [program.address_of(lab) for lab in labels[:-1]]
            paths.append(manual_adp(cfg, program.entry, nodes, program.address_of(labels[-1])))
        return paths
    if not program.releases:
        return []
    return enumerate_adps(cfg, program.entry, [a for _, a in program.releases], path_bound)


def hash_section(paths: list[AdpPath]) -> bytes:
    return b"".join(sorted({p.digest for p in paths}))


def build_sections(program: Program, sensitive: bytes | None = None) -> dict[str, bytes]:
    lay = program.layout
    meta = img.ImageMeta(lay.text_base, lay.data_base, lay.sensitive_base, lay.shared_base,
                         program.entry or 0, program.host_entry, program.irq_handler)
    return {
        img.TEXT: program.text_bytes,
        img.DATA: program.data,
        img.SENS: program.sensitive if sensitive is None else sensitive,
        img.SHARED: program.shared,
        img.META: meta.pack(),
    }


def prep(source: str, key: bytes, path_bound: int = DEFAULT_PATH_BOUND,
         layout: Layout = DEFAULT_LAYOUT, sensitive: bytes | None = None) -> PrepResult:
    """Assemble and sign ``source``.

    ``sensitive`` replaces the contents of the sensitive section (same length)
    without touching code, so two images differ only in their secrets.
    """
    program = assemble(source, layout)
    if sensitive is not None and len(sensitive) != len(program.sensitive):
        raise ValueError("replacement sensitive section must keep the original length")
    taints = build_taint_bitmap(program.sensitive)
    cfg = build_cfg(program)
    paths = find_paths(program, cfg, path_bound)
    hashes = hash_section(paths)
    blob = img.emit_image(build_sections(program, sensitive), taints, hashes, key)
    return PrepResult(program, cfg, paths, taints, hashes, blob)
