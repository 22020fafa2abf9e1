"""Deterministic discrete-event engine, topologies, links and drop-tail queues.

Time is an integer count of nanoseconds.  Events fire in ``(time, seq)``
order where ``seq`` is the insertion counter, so a run is a pure function
of its configuration and seed.

Links are modelled analytically: a FIFO link knows when it becomes free,
so a packet's departure time is fixed at enqueue time and only the arrival
at the far end needs an event.
"""

from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000

MSS = 1448
HEADER_BYTES = 52
WIRE_BYTES = MSS + HEADER_BYTES
ACK_BYTES = HEADER_BYTES
MTU = 1500

DEFAULT_QUEUE_CAPACITY = 16


class InvalidTopologyParams(ValueError):
    pass


class CausalityError(RuntimeError):
    pass


def seconds(value: float) -> int:
    return int(round(value * NS_PER_S))


def millis(value: float) -> int:
    return int(round(value * NS_PER_MS))


# --------------------------------------------------------------------------
# packets and events
# --------------------------------------------------------------------------


class PacketKind(IntEnum):
    DATA = 0
    ACK = 1
    CONTROL = 2


class Packet:
    __slots__ = ("flow_id", "seq", "size", "kind", "send_time", "src", "dst", "ack", "echo")

    def __init__(self, flow_id, seq, size, kind, send_time, src, dst, ack=0, echo=0):
        if size > MTU:
            raise ValueError(f"packet of {size} B exceeds the {MTU} B MTU")
        self.flow_id = flow_id
        self.seq = seq
        self.size = size
        self.kind = kind
        self.send_time = send_time
        self.src = src
        self.dst = dst
        self.ack = ack
        self.echo = echo

    def __repr__(self):
        return (f"Packet({self.kind.name} flow={self.flow_id} seq={self.seq} "
                f"ack={self.ack} size={self.size})")


class EventKind(IntEnum):
    PACKET_ARRIVAL = 0
    TIMER_EXPIRY = 1
    DRL_STEP = 2
    STATE_REPORT_DUE = 3
    CONTROL = 4


@dataclass(frozen=True)
class TraceEntry:
    time: int
    kind: str
    flow: int
    detail: str


class EventTrace(list):
    """List of :class:`TraceEntry` with a CSV exporter."""

    def to_csv(self, path) -> None:
        write_trace_csv(self, path)

    def count(self, kind=None):  # type: ignore[override]
        if kind is None:
            return len(self)
        name = kind.name if isinstance(kind, EventKind) else str(kind)
        return sum(1 for e in self if e.kind == name)


def write_trace_csv(trace: Iterable[TraceEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_ns", "event_kind", "flow", "detail"])
        for e in trace:
            writer.writerow([e.time, e.kind, e.flow, e.detail])


class Engine:
    """Single-threaded event loop.

    Handlers are called as ``handler(arg)``; ``engine.now`` holds the
    firing time while a handler runs.
    """

    def __init__(self, record_trace: bool = True):
        self.now = 0
        self._queue: list = []
        self._seq = 0
        self.record_trace = record_trace
        self.events_processed = 0

    def __len__(self):
        return len(self._queue)

    def schedule(self, at: int, kind: EventKind, handler: Callable, arg=None, flow: int = -1) -> None:
        if at < self.now:
            raise CausalityError(f"event at {at} scheduled from t={self.now}")
        heapq.heappush(self._queue, (at, self._seq, kind, handler, arg, flow))
        self._seq += 1

    def schedule_in(self, delay: int, kind: EventKind, handler: Callable, arg=None, flow: int = -1) -> None:
        self.schedule(self.now + delay, kind, handler, arg, flow)

    def run_until(self, t_end: int) -> EventTrace:
        if t_end < self.now:
            raise ValueError(f"t_end={t_end} is before now={self.now}")
        trace = EventTrace()
        queue = self._queue
        record = self.record_trace
        pop = heapq.heappop
        n = 0
        while queue and queue[0][0] <= t_end:
            at, _, kind, handler, arg, flow = pop(queue)
            self.now = at
            if record:
                trace.append(TraceEntry(at, kind.name, flow, _describe(arg)))
            handler(arg)
            n += 1
        self.events_processed += n
        self.now = t_end
        return trace


def _describe(arg) -> str:
    if arg is None:
        return ""
    if isinstance(arg, tuple) and len(arg) == 2 and isinstance(arg[1], Packet):
        node, pkt = arg
        return f"{node}:{pkt.kind.name}:seq={pkt.seq}:ack={pkt.ack}"
    if isinstance(arg, (int, float, str)):
        return str(arg)
    if hasattr(arg, "flow_id"):
        return f"flow={arg.flow_id}"
    # never leak object addresses into traces
    return type(arg).__name__


# --------------------------------------------------------------------------
# topology description
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkSpec:
    bandwidth: int  # bits per second
    propagation_delay: int  # ns
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise InvalidTopologyParams("bandwidth must be positive")
        if self.queue_capacity < 1:
            raise InvalidTopologyParams("queue capacity must be at least one packet")
        if self.propagation_delay < 0:
            raise InvalidTopologyParams("propagation delay must be non-negative")


BOTTLENECK_SPEC = LinkSpec(2_000_000, millis(40))
EDGE_SPEC = LinkSpec(10_000_000, millis(5))


class TopologyKind(str, Enum):
    DUMBBELL = "dumbbell"
    LEAF_SPINE = "leaf_spine"
    FAT_TREE = "fat_tree"
    CUSTOM = "custom"


@dataclass(frozen=True)
class TopoLink:
    a: str
    b: str
    spec: LinkSpec
    bottleneck: bool = False


@dataclass
class Topology:
    kind: TopologyKind
    nodes: list
    hosts: list
    links: list
    senders: list = field(default_factory=list)
    receivers: list = field(default_factory=list)

    @property
    def bottlenecks(self) -> list:
        return [l for l in self.links if l.bottleneck]

    def adjacency(self) -> dict:
        adj = {n: [] for n in self.nodes}
        for link in self.links:
            adj[link.a].append(link.b)
            adj[link.b].append(link.a)
        return adj

    def validate(self) -> "Topology":
        if not self.nodes:
            raise InvalidTopologyParams("topology has no nodes")
        names = set(self.nodes)
        if len(names) != len(self.nodes):
            raise InvalidTopologyParams("duplicate node names")
        for link in self.links:
            if link.a not in names or link.b not in names:
                raise InvalidTopologyParams(f"link {link.a}-{link.b} references unknown node")
            if link.spec is None:
                raise InvalidTopologyParams(f"link {link.a}-{link.b} has no LinkSpec")
        for h in list(self.senders) + list(self.receivers):
            if h not in self.hosts:
                raise InvalidTopologyParams(f"{h} is not a host")
        adj = self.adjacency()
        seen = {self.nodes[0]}
        todo = [self.nodes[0]]
        while todo:
            for nb in adj[todo.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        if len(seen) != len(self.nodes):
            raise InvalidTopologyParams("topology is not connected")
        if self.kind is TopologyKind.DUMBBELL and len(self.bottlenecks) != 1:
            raise InvalidTopologyParams("a dumbbell has exactly one bottleneck link")
        return self

    def path(self, src: str, dst: str) -> list:
        """Fixed shortest path (BFS, neighbours in declaration order)."""
        adj = self.adjacency()
        prev = {src: None}
        todo = deque([src])
        while todo:
            node = todo.popleft()
            if node == dst:
                break
            for nb in adj[node]:
                if nb not in prev:
                    # hosts never forward traffic
                    if nb != dst and nb in self._host_set():
                        continue
                    prev[nb] = node
                    todo.append(nb)
        if dst not in prev:
            raise InvalidTopologyParams(f"no path {src} -> {dst}")
        out = [dst]
        while out[-1] != src:
            out.append(prev[out[-1]])
        return out[::-1]

    def _host_set(self):
        return set(self.hosts)

    def base_rtt(self, src: str, dst: str, data_bytes: int = WIRE_BYTES, ack_bytes: int = ACK_BYTES) -> int:
        """Unloaded round trip in ns: propagation plus serialization both ways."""
        specs = {}
        for link in self.links:
            specs[(link.a, link.b)] = link.spec
            specs[(link.b, link.a)] = link.spec
        fwd = self.path(src, dst)
        back = self.path(dst, src)
        total = 0
        for hops, size in ((fwd, data_bytes), (back, ack_bytes)):
            for a, b in zip(hops, hops[1:]):
                spec = specs[(a, b)]
                total += spec.propagation_delay + transmit_delay(spec.bandwidth, size)
        return total


def _check_count(name, value, minimum=1):
    if not isinstance(value, int) or value < minimum:
        raise InvalidTopologyParams(f"{name} must be an integer >= {minimum}, got {value!r}")


def _check_spec(name, spec):
    if not isinstance(spec, LinkSpec):
        raise InvalidTopologyParams(f"{name} LinkSpec missing")


def dumbbell(n: int, bottleneck: LinkSpec = BOTTLENECK_SPEC, edge: LinkSpec = EDGE_SPEC) -> Topology:
    _check_count("n", n)
    _check_spec("bottleneck", bottleneck)
    _check_spec("edge", edge)
    senders = [f"s{i}" for i in range(n)]
    receivers = [f"r{i}" for i in range(n)]
    links = [TopoLink(s, "swL", edge) for s in senders]
    links.append(TopoLink("swL", "swR", bottleneck, bottleneck=True))
    links += [TopoLink("swR", r, edge) for r in receivers]
    topo = Topology(TopologyKind.DUMBBELL, senders + ["swL", "swR"] + receivers,
                    senders + receivers, links, senders, receivers)
    return topo.validate()


def leaf_spine(leaves: int = 2, spines: int = 2, hosts_per_leaf: int = 3,
               fabric: LinkSpec = BOTTLENECK_SPEC, edge: LinkSpec = EDGE_SPEC) -> Topology:
    """Two-tier Clos.  Leaf-spine uplinks are the bottleneck links.

    Senders live on the first half of the leaves and receivers on the rest.
    """
    _check_count("leaves", leaves, 2)
    _check_count("spines", spines)
    _check_count("hosts_per_leaf", hosts_per_leaf)
    _check_spec("fabric", fabric)
    _check_spec("edge", edge)
    leaf_names = [f"leaf{i}" for i in range(leaves)]
    spine_names = [f"spine{i}" for i in range(spines)]
    hosts, links = [], []
    by_leaf = []
    for li, leaf in enumerate(leaf_names):
        hs = [f"h{li}_{j}" for j in range(hosts_per_leaf)]
        by_leaf.append(hs)
        hosts += hs
        links += [TopoLink(h, leaf, edge) for h in hs]
    for leaf in leaf_names:
        for spine in spine_names:
            links.append(TopoLink(leaf, spine, fabric, bottleneck=True))
    half = leaves // 2
    senders = [h for hs in by_leaf[:half] for h in hs]
    receivers = [h for hs in by_leaf[half:] for h in hs][:len(senders)]
    senders = senders[:len(receivers)]
    topo = Topology(TopologyKind.LEAF_SPINE, hosts + leaf_names + spine_names, hosts, links,
                    senders, receivers)
    return topo.validate()


def fat_tree(k: int = 4, core: LinkSpec = BOTTLENECK_SPEC, edge: LinkSpec = EDGE_SPEC) -> Topology:
    """k-ary fat tree: (k/2)^2 core switches, k pods of k/2 aggregation and
    k/2 edge switches, k/2 hosts per edge switch.  Aggregation-core links
    are the bottleneck links.
    """
    if not isinstance(k, int) or k < 2 or k % 2:
        raise InvalidTopologyParams(f"fat-tree k must be an even integer >= 2, got {k!r}")
    _check_spec("core", core)
    _check_spec("edge", edge)
    half = k // 2
    cores = [f"core{i}" for i in range(half * half)]
    nodes, hosts, links = [], [], []
    pod_hosts = []
    aggs_all, edges_all = [], []
    for p in range(k):
        aggs = [f"agg{p}_{i}" for i in range(half)]
        edges = [f"edge{p}_{i}" for i in range(half)]
        aggs_all += aggs
        edges_all += edges
        this_pod = []
        for ei, e in enumerate(edges):
            for h in range(half):
                name = f"h{p}_{ei}_{h}"
                this_pod.append(name)
                links.append(TopoLink(name, e, edge))
            for a in aggs:
                links.append(TopoLink(e, a, edge))
        for ai, a in enumerate(aggs):
            for c in range(half):
                links.append(TopoLink(a, cores[ai * half + c], core, bottleneck=True))
        hosts += this_pod
        pod_hosts.append(this_pod)
    nodes = hosts + edges_all + aggs_all + cores
    pods_half = max(1, k // 2)
    senders = [h for hs in pod_hosts[:pods_half] for h in hs]
    receivers = [h for hs in pod_hosts[pods_half:] for h in hs]
    n = min(len(senders), len(receivers))
    topo = Topology(TopologyKind.FAT_TREE, nodes, hosts, links, senders[:n], receivers[:n])
    return topo.validate()


def build_topology(kind, **params) -> Topology:
    kind = TopologyKind(kind)
    try:
        if kind is TopologyKind.DUMBBELL:
            return dumbbell(**params)
        if kind is TopologyKind.LEAF_SPINE:
            return leaf_spine(**params)
        if kind is TopologyKind.FAT_TREE:
            return fat_tree(**params)
    except TypeError as exc:
        raise InvalidTopologyParams(str(exc)) from exc
    return custom_topology(**params)


def custom_topology(nodes, hosts, links, senders=(), receivers=()) -> Topology:
    tlinks = []
    for entry in links:
        if isinstance(entry, TopoLink):
            tlinks.append(entry)
            continue
        a, b, spec = entry[0], entry[1], entry[2]
        if isinstance(spec, dict):
            spec = LinkSpec(**spec)
        bottleneck = bool(entry[3]) if len(entry) > 3 else False
        tlinks.append(TopoLink(a, b, spec, bottleneck))
    topo = Topology(TopologyKind.CUSTOM, list(nodes), list(hosts), tlinks,
                    list(senders), list(receivers))
    return topo.validate()


# --------------------------------------------------------------------------
# runtime network
# --------------------------------------------------------------------------


def transmit_delay(bandwidth, size: int) -> int:
    """Serialization delay in ns of ``size`` bytes at ``bandwidth`` bit/s."""
    if isinstance(bandwidth, (Link, LinkSpec)):
        bandwidth = bandwidth.bandwidth
    return (size * 8 * NS_PER_S + bandwidth // 2) // bandwidth


class EnqueueResult(Enum):
    ENQUEUED = "enqueued"
    DROPPED = "dropped"


class Link:
    """One direction of a physical link with a drop-tail FIFO.

    Occupancy counts every accepted packet that has not finished
    serialization, including the one on the wire.
    """

    __slots__ = ("name", "src", "dst", "bandwidth", "prop", "capacity", "bottleneck",
                 "busy_until", "_finish", "in_flight", "delivered_bytes", "delivered_packets",
                 "dropped", "enqueued", "network", "log")

    def __init__(self, src, dst, spec: LinkSpec, bottleneck=False, network=None):
        self.name = f"{src}->{dst}"
        self.src = src
        self.dst = dst
        self.bandwidth = spec.bandwidth
        self.prop = spec.propagation_delay
        self.capacity = spec.queue_capacity
        self.bottleneck = bottleneck
        self.busy_until = 0
        self._finish = deque()
        self.in_flight = 0
        self.delivered_bytes = 0
        self.delivered_packets = 0
        self.dropped = 0
        self.enqueued = 0
        self.network = network
        self.log = None  # optional list of (finish_time, size) for audits

    def __repr__(self):
        return self.name

    def occupancy(self, now: int) -> int:
        fin = self._finish
        while fin and fin[0] <= now:
            fin.popleft()
        return len(fin)

    def set_bandwidth(self, bandwidth: int) -> None:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.bandwidth = bandwidth

    def enqueue(self, packet: Packet, now: int) -> EnqueueResult:
        if packet.size <= 0:
            raise ValueError("packet size must be positive")
        if self.occupancy(now) >= self.capacity:
            self.dropped += 1
            if self.network is not None:
                self.network.on_drop(self, packet)
            return EnqueueResult.DROPPED
        start = now if now > self.busy_until else self.busy_until
        finish = start + transmit_delay(self.bandwidth, packet.size)
        self.busy_until = finish
        self._finish.append(finish)
        self.enqueued += 1
        self.in_flight += 1
        if self.log is not None:
            self.log.append((finish, packet.size))
        if self.network is not None:
            self.network.engine.schedule(finish + self.prop, EventKind.PACKET_ARRIVAL,
                                         self.network._arrive, (self, packet), packet.flow_id)
        return EnqueueResult.ENQUEUED


def enqueue(link: Link, packet: Packet, now: int) -> EnqueueResult:
    return link.enqueue(packet, now)


class Network:
    """Runtime instantiation of a :class:`Topology` on an :class:`Engine`."""

    def __init__(self, topology: Topology, engine: Engine):
        self.topology = topology
        self.engine = engine
        self.links = {}
        for tl in topology.links:
            self.links[(tl.a, tl.b)] = Link(tl.a, tl.b, tl.spec, tl.bottleneck, self)
            self.links[(tl.b, tl.a)] = Link(tl.b, tl.a, tl.spec, tl.bottleneck, self)
        self._routes = {}
        self._hosts = {}
        self.injected = 0
        self.delivered = 0
        self.dropped = 0
        self.drop_listeners = []

    def attach(self, host: str, handler: Callable) -> None:
        if host not in self.topology.hosts:
            raise InvalidTopologyParams(f"{host} is not a host")
        self._hosts[host] = handler

    def route(self, src: str, dst: str) -> dict:
        key = (src, dst)
        hops = self._routes.get(key)
        if hops is None:
            path = self.topology.path(src, dst)
            hops = {a: self.links[(a, b)] for a, b in zip(path, path[1:])}
            self._routes[key] = hops
        return hops

    def send(self, packet: Packet) -> EnqueueResult:
        self.injected += 1
        link = self.route(packet.src, packet.dst)[packet.src]
        return link.enqueue(packet, self.engine.now)

    def on_drop(self, link: Link, packet: Packet) -> None:
        self.dropped += 1
        for fn in self.drop_listeners:
            fn(link, packet)

    def _arrive(self, arg) -> None:
        link, packet = arg
        link.in_flight -= 1
        link.delivered_bytes += packet.size
        link.delivered_packets += 1
        node = link.dst
        if node == packet.dst:
            self.delivered += 1
            self._hosts[node](packet)
            return
        self.route(packet.src, packet.dst)[node].enqueue(packet, self.engine.now)

    def packets_in_network(self) -> int:
        return sum(l.in_flight for l in self.links.values())

    def bottleneck_links(self, direction_from=None) -> list:
        out = [l for l in self.links.values() if l.bottleneck]
        if direction_from is not None:
            out = [l for l in out if l.src in direction_from]
        return out

    def set_bottleneck_bandwidth(self, bandwidth: int) -> None:
        for link in self.links.values():
            if link.bottleneck:
                link.set_bandwidth(bandwidth)
