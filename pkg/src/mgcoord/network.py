"""Radial distribution network model, validation, and per-unit ingestion.

The network is a rooted directed tree: every line points away from the
substation (root) bus, so each non-root bus has exactly one incoming line
and the line "belonging to" a bus is the one feeding it from its ancestor.
All electrical quantities are stored in per-unit; ingestion from a text
document converts once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NetworkError(ValueError):
    """Base class for network construction/validation failures."""


class CycleDetected(NetworkError):
    pass


class DisconnectedBus(NetworkError):
    pass


class DuplicateLine(NetworkError):
    pass


class MissingRoot(NetworkError):
    pass


class NonpositiveBase(NetworkError):
    pass


@dataclass(frozen=True)
class PerUnitBase:
    """Per-unit base quantities.

    v_base is in volts, s_base in volt-amperes.  The impedance base follows
    as v_base**2 / s_base.
    """

    v_base: float
    s_base: float

    def __post_init__(self):
        if not (self.v_base > 0.0 and self.s_base > 0.0):
            raise NonpositiveBase(
                f"bases must be positive, got v={self.v_base}, s={self.s_base}"
            )

    @property
    def z_base(self) -> float:
        return self.v_base**2 / self.s_base


_PU_KINDS = ("power", "voltage", "impedance")


def _base_for(base: PerUnitBase, kind: str) -> float:
    if kind == "power":
        return base.s_base
    if kind == "voltage":
        return base.v_base
    if kind == "impedance":
        return base.z_base
    raise ValueError(f"unknown per-unit kind {kind!r}, expected one of {_PU_KINDS}")


def to_per_unit(raw, base: PerUnitBase, kind: str):
    """Convert a physical quantity to per-unit. Round-trips with from_per_unit."""
    return np.asarray(raw, dtype=float) / _base_for(base, kind)


def from_per_unit(pu, base: PerUnitBase, kind: str):
    """Inverse of to_per_unit."""
    return np.asarray(pu, dtype=float) * _base_for(base, kind)


@dataclass(frozen=True)
class Bus:
    """A bus of the network.

    Loads are per-interval sequences in per-unit; a single-entry sequence is
    used for static (peak) data, and the scenario layer materializes full
    daily profiles from it.  curtailment_penalty is the cost per energy unit
    of shedding load at this bus.
    """

    id: int
    has_microgrid: bool
    p_load: np.ndarray
    q_load: np.ndarray
    curtailment_penalty: float = 0.0
    source_id: int = -1

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p_load, dtype=float))
        q = np.atleast_1d(np.asarray(self.q_load, dtype=float))
        if p.shape != q.shape or not (np.isfinite(p).all() and np.isfinite(q).all()):
            raise NetworkError(f"bus {self.id}: loads must be finite, equal-length")
        if self.curtailment_penalty < 0:
            raise NetworkError(f"bus {self.id}: curtailment penalty must be >= 0")
        object.__setattr__(self, "p_load", p)
        object.__setattr__(self, "q_load", q)


@dataclass(frozen=True)
class Line:
    """A distribution line; line i feeds bus to_bus from its ancestor."""

    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    s_max: float

    def __post_init__(self):
        if self.r < 0 or self.x < 0:
            raise NetworkError(f"line {self.id}: r and x must be >= 0")
        if not self.s_max > 0:
            raise NetworkError(f"line {self.id}: s_max must be > 0")


class RadialNetwork:
    """Immutable rooted-tree network with dense 0-based indices.

    Lines are stored sorted by receiving bus; ``line_of_bus[b]`` gives the
    index of the line feeding bus b (-1 for the root).  Arrays are marked
    read-only so the object can be shared across agents.
    """

    def __init__(self, buses, lines, root: int, base: PerUnitBase):
        buses = tuple(buses)
        ids = [b.id for b in buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        if sorted(ids) != list(range(len(buses))):
            raise NetworkError("bus ids must be dense 0-based after load")
        if root not in ids:
            raise MissingRoot(f"root bus {root} not present")

        n = len(buses)
        seen_to: dict[int, Line] = {}
        for ln in lines:
            if ln.to_bus in seen_to:
                raise DuplicateLine(f"two lines feed bus {ln.to_bus}")
            if ln.to_bus == root:
                raise CycleDetected(f"line {ln.from_bus}->{ln.to_bus} feeds the root")
            if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
                raise NetworkError(f"line {ln.id}: endpoint out of range")
            seen_to[ln.to_bus] = ln

        lines = tuple(
            Line(i, ln.from_bus, ln.to_bus, ln.r, ln.x, ln.s_max)
            for i, ln in enumerate(sorted(seen_to.values(), key=lambda l: l.to_bus))
        )

        ancestor = np.full(n, -1, dtype=int)
        for ln in lines:
            ancestor[ln.to_bus] = ln.from_bus

        children_lists: list[list[int]] = [[] for _ in range(n)]
        for b in range(n):
            if b != root:
                if ancestor[b] < 0:
                    raise DisconnectedBus(f"bus {b} has no feeding line")
                children_lists[ancestor[b]].append(b)

        # BFS from the root; with one line per non-root bus and none into the
        # root, any unreached bus lies on a cycle detached from the tree.
        order = [root]
        seen = np.zeros(n, dtype=bool)
        seen[root] = True
        head = 0
        while head < len(order):
            for c in children_lists[order[head]]:
                if seen[c]:
                    raise CycleDetected(f"bus {c} reached twice")
                seen[c] = True
                order.append(c)
            head += 1
        if not seen.all():
            missing = np.flatnonzero(~seen)
            raise CycleDetected(f"buses {missing.tolist()} form a cycle off the tree")

        self.buses = buses
        self.lines = lines
        self.root = int(root)
        self.base = base
        self.n_bus = n
        self.n_line = len(lines)
        self.ancestor = ancestor
        self.children = tuple(np.array(c, dtype=int) for c in children_lists)
        self.topo_order = np.array(order, dtype=int)

        self.line_to_bus = np.array([ln.to_bus for ln in lines], dtype=int)
        self.line_from_bus = np.array([ln.from_bus for ln in lines], dtype=int)
        self.line_of_bus = np.full(n, -1, dtype=int)
        self.line_of_bus[self.line_to_bus] = np.arange(self.n_line)
        self.r = np.array([ln.r for ln in lines])
        self.x = np.array([ln.x for ln in lines])
        self.s_max = np.array([ln.s_max for ln in lines])

        self.mg_buses = np.array(
            sorted(b.id for b in buses if b.has_microgrid), dtype=int
        )
        self.p_load_peak = np.array([float(b.p_load[0]) for b in buses])
        self.q_load_peak = np.array([float(b.q_load[0]) for b in buses])
        self.source_ids = np.array([b.source_id for b in buses], dtype=int)

        for arr in (
            self.ancestor, self.topo_order, self.line_to_bus, self.line_from_bus,
            self.line_of_bus, self.r, self.x, self.s_max, self.mg_buses,
            self.p_load_peak, self.q_load_peak, self.source_ids,
        ):
            arr.setflags(write=False)

    def internal_id(self, source_id: int) -> int:
        hits = np.flatnonzero(self.source_ids == source_id)
        if hits.size != 1:
            raise KeyError(f"source bus id {source_id} unknown")
        return int(hits[0])


def _split_sections(text: str) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections.setdefault(current, [])
        elif current is None:
            raise NetworkError(f"data before first section header: {raw!r}")
        else:
            sections[current].append(line)
    return sections


def _kv_pairs(rows: list[str]) -> dict[str, str]:
    out = {}
    for row in rows:
        if "=" in row:
            k, v = row.split("=", 1)
        else:
            parts = row.split(None, 1)
            if len(parts) != 2:
                raise NetworkError(f"expected 'key value' record, got {row!r}")
            k, v = parts
        out[k.strip().lower()] = v.strip()
    return out


def parse_network(text: str) -> RadialNetwork:
    """Parse a network description document (see data/ieee33.net for the format).

    Sections: [base] with v_base_kv, s_base_kva and root; [buses] with
    ``source_id p_load_kw q_load_kvar`` records; [lines] with
    ``from to r_ohm x_ohm s_max_kva``; [microgrids] listing bus source ids.
    """
    sections = _split_sections(text)
    for required in ("base", "buses", "lines"):
        if required not in sections:
            raise NetworkError(f"missing [{required}] section")

    base_kv = _kv_pairs(sections["base"])
    if "root" not in base_kv:
        raise MissingRoot("no root bus declared in [base]")
    base = PerUnitBase(
        v_base=float(base_kv["v_base_kv"]) * 1e3,
        s_base=float(base_kv["s_base_kva"]) * 1e3,
    )
    root_source = int(base_kv["root"])

    mg_sources: set[int] = set()
    for row in sections.get("microgrids", []):
        mg_sources.update(int(tok) for tok in row.split())

    bus_rows = []
    for row in sections["buses"]:
        toks = row.split()
        if len(toks) != 3:
            raise NetworkError(f"bus record needs 3 columns: {row!r}")
        bus_rows.append((int(toks[0]), float(toks[1]), float(toks[2])))
    source_order = [r[0] for r in bus_rows]
    if len(set(source_order)) != len(source_order):
        raise NetworkError("duplicate bus source id")
    remap = {src: i for i, src in enumerate(source_order)}
    if root_source not in remap:
        raise MissingRoot(f"root bus {root_source} not in [buses]")
    unknown_mgs = mg_sources - set(source_order)
    if unknown_mgs:
        raise NetworkError(f"microgrid buses {sorted(unknown_mgs)} not in [buses]")

    s_kw = base.s_base / 1e3
    buses = [
        Bus(
            id=remap[src],
            has_microgrid=src in mg_sources,
            p_load=np.array([p / s_kw]),
            q_load=np.array([q / s_kw]),
            source_id=src,
        )
        for src, p, q in bus_rows
    ]

    lines = []
    for i, row in enumerate(sections["lines"]):
        toks = row.split()
        if len(toks) != 5:
            raise NetworkError(f"line record needs 5 columns: {row!r}")
        f_src, t_src = int(toks[0]), int(toks[1])
        if f_src not in remap or t_src not in remap:
            raise NetworkError(f"line endpoints {f_src}->{t_src} unknown")
        lines.append(
            Line(
                id=i,
                from_bus=remap[f_src],
                to_bus=remap[t_src],
                r=float(toks[2]) / base.z_base,
                x=float(toks[3]) / base.z_base,
                s_max=float(toks[4]) * 1e3 / base.s_base,
            )
        )

    return RadialNetwork(buses, lines, root=remap[root_source], base=base)


def load_network(doc) -> RadialNetwork:
    """Load a network from a file path or from literal document text."""
    if hasattr(doc, "read_text"):
        text = doc.read_text(encoding="utf-8")
    elif isinstance(doc, str):
        if "\n" in doc:
            text = doc
        else:
            with open(doc, "r", encoding="utf-8") as fh:
                text = fh.read()
    else:
        raise TypeError("doc must be a path or document text")
    return parse_network(text)
