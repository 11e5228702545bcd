"""Authorized declassification path enumeration and path hashing.

Enumeration walks the program from the enclave entry point, forking at every
conditional branch and at every listed JALR target.  A marked back-edge may be
taken at most once per path, matching the runtime rule that hashes a repeated
loop back-edge only once, so each path has a finite edge list whose digest is
exactly what the hash engine computes when execution follows it.

Calls and returns are treated like any other edge (no call-stack matching).
"""
from __future__ import annotations

from dataclasses import dataclass

from ..declass import INIT, EdgeKind, chain_edges
from ..errors import DisconnectedAdp, PathExplosion
from ..isa import A7, INSN_BYTES, Opcode
from .cfg import Cfg

DEFAULT_PATH_BOUND = 256
ECALL_EEXIT = 3

Edge = tuple[int, int, EdgeKind]


@dataclass(frozen=True)
class AdpPath:
    release: int
    edges: tuple[Edge, ...]

    @property
    def digest(self) -> bytes:
        return path_hash(self.edges)

    def describe(self, cfg: Cfg | None = None) -> str:
        def name(a):
            lab = cfg.program.label_for(a) if cfg is not None else None
            return f"{a:#x}({lab})" if lab else f"{a:#x}"
        hops = " ".join(f"{name(s)}->{name(t)}" for s, t, _ in self.edges)
        return f"{self.digest.hex()}  release={name(self.release)}  {hops}"


def path_hash(edges) -> bytes:
    """Digest of a path; repeated back-edges are folded in only once."""
    return chain_edges(edges, INIT)


def _writes_a7(ins) -> bool:
    if ins.rd != A7:
        return False
    return ins.opcode not in (Opcode.SD, Opcode.BEQ, Opcode.BNE, Opcode.BLT, Opcode.MOVSR,
                              Opcode.ECALL, Opcode.HALT)


def enumerate_adps(cfg: Cfg, entry: int, release_points, path_bound: int = DEFAULT_PATH_BOUND,
                   max_edges: int = 512, work_cap: int = 1_000_000) -> list[AdpPath]:
    """Every path from ``entry`` that reaches a release point.

    Paths with no control transfer before the release are not returned: their
    digest would be the initial constant, which never authorizes anything.
    Walks longer than ``max_edges`` transfers are abandoned.
    """
    if path_bound <= 0:
        raise ValueError("path_bound must be positive")
    releases = set(release_points)
    if not releases:
        raise ValueError("no release points to enumerate towards")
    found: list[AdpPath] = []
    work = 0
    # (pc, edges, back-edges already taken, known a7 value or None)
    stack: list[tuple[int, tuple, frozenset, int | None]] = [(entry, (), frozenset(), None)]
    while stack:
        pc, edges, backs, a7 = stack.pop()
        while True:
            work += 1
            if work > work_cap:
                raise PathExplosion(path_bound)
            if pc in releases and edges:
                found.append(AdpPath(pc, edges))
                if len(found) > path_bound:
                    raise PathExplosion(path_bound)
            ins = cfg.instruction_at(pc)
            if ins is None or ins.opcode is Opcode.HALT:
                break
            if ins.opcode is Opcode.ECALL and a7 == ECALL_EEXIT:
                break
            node = cfg.nodes.get(pc)
            if node is None:
                if ins.opcode is Opcode.ADDI and ins.rd == A7 and ins.rs1 == 0:
                    a7 = ins.imm
                elif _writes_a7(ins):
                    a7 = None
                pc += INSN_BYTES
                continue
            if node.opcode in (Opcode.JAL, Opcode.JALR) and ins.rd == A7:
                a7 = None
            if len(edges) >= max_edges:
                break
            if node.conditional:
                target = node.taken[0]
                if not (node.back_edge and (pc, target) in backs):
                    nb = backs | {(pc, target)} if node.back_edge else backs
                    stack.append((target, edges + ((pc, target, node.kind(target)),), nb, a7))
                pc = node.fallthrough
                continue
            for target in node.taken[1:][::-1]:
                stack.append((target, edges + ((pc, target, EdgeKind.JUMP),), backs, a7))
            target = node.taken[0]
            edges = edges + ((pc, target, EdgeKind.JUMP),)
            pc = target
    return found


def _walk_to(cfg: Cfg, pc: int, goal: int) -> bool:
    """Whether straight-line execution (branches not taken) reaches ``goal`` from ``pc``."""
    limit = len(cfg.program.text) + 1
    for _ in range(limit):
        if pc == goal:
            return True
        ins = cfg.instruction_at(pc)
        if ins is None or ins.opcode is Opcode.HALT:
            return False
        node = cfg.nodes.get(pc)
        if node is not None and not node.conditional:
            return False
        pc += INSN_BYTES
    return False


def manual_adp(cfg: Cfg, entry: int, nodes: list[int], release: int) -> AdpPath:
    """Turn a hand-written list of taken nodes into a path, checking it is a connected walk."""
    if not nodes:
        raise DisconnectedAdp("a declassification path needs at least one taken transfer")

    def extend(pc: int, i: int, edges: tuple) -> tuple | None:
        if i == len(nodes):
            return edges if _walk_to(cfg, pc, release) else None
        addr = nodes[i]
        node = cfg.nodes.get(addr)
        if node is None or not _walk_to(cfg, pc, addr):
            return None
        for target in node.taken:
            done = extend(target, i + 1, edges + ((addr, target, node.kind(target)),))
            if done is not None:
                return done
        return None

    edges = extend(entry, 0, ())
    if edges is None:
        listing = " ".join(f"{a:#x}" for a in nodes)
        raise DisconnectedAdp(f"nodes [{listing}] do not form a walk to {release:#x}")
    return AdpPath(release, edges)
