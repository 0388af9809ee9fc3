"""Scenario file parsing: a flat sectioned text format describing one run.

Sections and keys (durations accept ms/s/m suffixes, bare numbers are ms):

    [scenario]  id, seed, duration, tour?, note* (repeatable)
    [cluster]   nodes, initial_master?, heartbeat_period?, heartbeat_timeout?,
                connectivity_check?, cycle_period?, base_port?
    [visitors]  rooms, and either total= or matrix cells like Man.room0=27;
                reducers? sets the reducer count
    [faults]    one fault per line, e.g.:
                    at=30s crash=0
                    at=60s recover=0
                    at=10s partition=0,1,2|3,4,5
                    at=90s heal
                    at=5s  drop=all:0.3        (or 1->2:0.5)
    [link]      delay?, jitter?, drop?, duplicate?

Parse errors carry the offending line number and field so operators can fix
files quickly.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .domain import parse_category
from .membership import ClusterConfig, default_endpoints
from .simnet import (
    CrashNode,
    DropRate,
    FaultEvent,
    Heal,
    LinkModel,
    Partition,
    RecoverNode,
    ScenarioSpec,
)


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


def parse_duration(token: str, line: int | None = None) -> int:
    """'250ms' / '5s' / '2m' / bare integer (ms) -> milliseconds."""
    token = token.strip()
    for suffix, factor in (("ms", 1), ("s", 1000), ("m", 60_000)):
        if token.endswith(suffix):
            body = token[: -len(suffix)]
            break
    else:
        body, factor = token, 1
    try:
        value = int(body)
    except ValueError:
        raise ScenarioError(f"bad duration {token!r}", line) from None
    if value < 0:
        raise ScenarioError(f"negative duration {token!r}", line)
    return value * factor


def _parse_sections(text: str) -> dict[str, list[tuple[int, str]]]:
    sections: dict[str, list[tuple[int, str]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections.setdefault(current, [])
            continue
        if current is None:
            raise ScenarioError(f"entry before any [section]: {line!r}", lineno)
        sections[current].append((lineno, line))
    return sections


def _kv(entries: list[tuple[int, str]], section: str) -> dict[str, tuple[int, str]]:
    out: dict[str, tuple[int, str]] = {}
    for lineno, line in entries:
        key, sep, value = line.partition("=")
        if not sep:
            raise ScenarioError(f"[{section}] entry is not key=value: {line!r}", lineno)
        out[key.strip()] = (lineno, value.strip())
    return out


def _parse_fault_line(lineno: int, line: str) -> FaultEvent:
    fields: dict[str, str] = {}
    order: list[str] = []
    for token in line.split():
        key, sep, value = token.partition("=")
        fields[key] = value if sep else ""
        order.append(key)
    if "at" not in fields:
        raise ScenarioError("fault line needs at=<time>", lineno)
    at = parse_duration(fields["at"], lineno)
    kinds = [k for k in order if k != "at"]
    if len(kinds) != 1:
        raise ScenarioError(f"fault line needs exactly one fault kind, got {kinds}", lineno)
    kind, value = kinds[0], fields[kinds[0]]
    try:
        if kind == "crash":
            return CrashNode(at, int(value))
        if kind == "recover":
            return RecoverNode(at, int(value))
        if kind == "heal":
            return Heal(at)
        if kind == "partition":
            a_txt, sep, b_txt = value.partition("|")
            if not sep:
                raise ValueError("partition needs A|B")
            side_a = frozenset(int(t) for t in a_txt.split(",") if t)
            side_b = frozenset(int(t) for t in b_txt.split(",") if t)
            if side_a & side_b:
                raise ValueError("partition sides overlap")
            return Partition(at, side_a, side_b)
        if kind == "drop":
            link_txt, sep, prob_txt = value.rpartition(":")
            if not sep:
                raise ValueError("drop needs <link>:<probability>")
            prob = float(prob_txt)
            if link_txt == "all":
                return DropRate(at, "all", prob)
            src_txt, sep, dst_txt = link_txt.partition("->")
            if not sep:
                raise ValueError("link must be 'all' or 'src->dst'")
            return DropRate(at, (int(src_txt), int(dst_txt)), prob)
    except ValueError as exc:
        raise ScenarioError(f"bad fault {kind}={value!r}: {exc}", lineno) from None
    raise ScenarioError(f"unknown fault kind {kind!r}", lineno)


def parse_scenario_text(text: str, default_id: str = "scenario") -> ScenarioSpec:
    sections = _parse_sections(text)

    scenario_entries = sections.get("scenario", [])
    meta = _kv(scenario_entries, "scenario")
    notes = []
    for lineno, line in scenario_entries:
        key, sep, value = line.partition("=")
        if key.strip() == "note" and sep:
            notes.append(value.strip())

    cluster_kv = _kv(sections.get("cluster", []), "cluster")
    if "nodes" not in cluster_kv:
        raise ScenarioError("[cluster] must set nodes=<count>")
    lineno, nodes_txt = cluster_kv["nodes"]
    try:
        node_count = int(nodes_txt)
    except ValueError:
        raise ScenarioError(f"bad node count {nodes_txt!r}", lineno) from None

    def dur(section_kv, key, default):
        if key not in section_kv:
            return default
        lineno, value = section_kv[key]
        return parse_duration(value, lineno)

    base_port = int(cluster_kv.get("base_port", (0, "47000"))[1])
    try:
        cluster = ClusterConfig(
            node_count=node_count,
            endpoints=default_endpoints(node_count, base_port),
            initial_master=int(cluster_kv.get("initial_master", (0, "0"))[1]),
            heartbeat_period=dur(cluster_kv, "heartbeat_period", 1_000),
            heartbeat_timeout=dur(cluster_kv, "heartbeat_timeout", 5_000),
            connectivity_check_period=dur(cluster_kv, "connectivity_check", 60_000),
            cycle_period=dur(cluster_kv, "cycle_period", 300_000),
        )
    except ValueError as exc:
        raise ScenarioError(f"[cluster] invalid: {exc}") from None

    visitors_entries = sections.get("visitors", [])
    visitors_kv = _kv(visitors_entries, "visitors")
    if "rooms" not in visitors_kv:
        raise ScenarioError("[visitors] must set rooms=<count>")
    rooms = int(visitors_kv["rooms"][1])
    total: int | None = None
    if "total" in visitors_kv:
        lineno, total_txt = visitors_kv["total"]
        try:
            total = int(total_txt)
        except ValueError:
            raise ScenarioError(f"bad visitor total {total_txt!r}", lineno) from None
    matrix: dict[tuple, int] = {}
    for lineno, line in visitors_entries:
        key, sep, value = line.partition("=")
        key = key.strip()
        if "." not in key:
            continue
        cat_txt, _, room_txt = key.partition(".")
        if not room_txt.startswith("room"):
            raise ScenarioError(f"matrix key must look like Man.room0, got {key!r}", lineno)
        try:
            cat = parse_category(cat_txt)
            room = int(room_txt[len("room"):])
            matrix[(cat, room)] = int(value.strip())
        except ValueError as exc:
            raise ScenarioError(f"bad matrix cell {key!r}: {exc}", lineno) from None

    link_kv = _kv(sections.get("link", []), "link")
    try:
        link = LinkModel(
            base_delay=dur(link_kv, "delay", 10),
            jitter=dur(link_kv, "jitter", 5),
            drop_probability=float(link_kv.get("drop", (0, "0"))[1]),
            duplicate_probability=float(link_kv.get("duplicate", (0, "0"))[1]),
        )
    except ValueError as exc:
        raise ScenarioError(f"[link] invalid: {exc}") from None

    faults = tuple(
        _parse_fault_line(lineno, line) for lineno, line in sections.get("faults", [])
    )
    for fault in faults:
        node = getattr(fault, "node", None)
        if node is not None and node not in cluster.endpoints:
            raise ScenarioError(f"fault names unknown node {node}")

    scenario_id = meta.get("id", (0, default_id))[1]
    seed = int(meta.get("seed", (0, "0"))[1])
    duration = dur(meta, "duration", 0)
    if duration <= 0:
        raise ScenarioError("[scenario] must set duration=<time>")
    tour = dur(meta, "tour", None)

    try:
        return ScenarioSpec(
            scenario_id=scenario_id,
            seed=seed,
            cluster=cluster,
            rooms=rooms,
            visitors=total,
            matrix=matrix or None,
            tour=tour,
            duration=duration,
            reducer_count=int(visitors_kv.get("reducers", (0, "3"))[1]),
            faults=faults,
            link=link,
            notes=tuple(notes),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


def load_scenario(path: str | Path, seed_override: int | None = None) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from None
    spec = parse_scenario_text(text, default_id=path.stem)
    if seed_override is not None:
        spec = replace(spec, seed=seed_override)
    return spec
