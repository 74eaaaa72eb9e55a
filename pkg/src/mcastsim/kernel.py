"""Deterministic discrete-event kernel: clock, node registry, radio, one-hop delivery.

Time is kept as integer microseconds so event ordering and traces are exact.
Links are unit-disk (inclusive boundary); the path-loss formula is only used
to produce received-power samples, never to drop packets.
"""

import heapq
import math
import random
from dataclasses import dataclass, field

US = 1_000_000  # microseconds per second


class SimError(Exception):
    pass


class ConfigError(SimError):
    """Bad configuration or precondition violation (exit code 1 territory)."""


class FatalSimError(SimError):
    """Unrecoverable runtime error (exit code 2 territory)."""


# Packet kinds (wire-visible names, also used as control-packet counter keys)
HELLO = "hello"
ZONE_LINK_STATE = "zone_link_state"
BORDERCAST_QUERY = "bordercast_query"
BORDERCAST_REPLY = "bordercast_reply"
CONTACT_MAINT = "contact_maint"
CONTACT_QUERY = "contact_query"
CONTACT_REPLY = "contact_reply"
ADV = "adv"
JOIN_QUERY = "join_query"
JOIN_REPLY = "join_reply"
JOIN_REQUEST = "join_request"
MESH_LEAVE = "mesh_leave"
BRANCH_BREAK = "branch_break"
DATA = "data"
SDS_ADVERT = "sds_advert"
SDS_LEAVE = "sds_leave"
SDS_SYNC = "sds_sync"
SESSION_REGISTER = "session_register"
SESSION_REPLY = "session_reply"
SESSION_ANNOUNCE = "session_announce"
GROUP_QUERY = "group_query"
GROUP_QUERY_REPLY = "group_query_reply"
LAR_FORWARD = "lar_forward"
GEOCAST = "geocast"

DATA_KINDS = {DATA}


@dataclass
class RadioModel:
    tx_power_w: float = 0.1
    range_m: float = 250.0
    path_loss_exp: float = 2.0
    ref_distance_m: float = 1.0

    def __post_init__(self):
        if self.range_m <= 0:
            raise ConfigError("radio range must be positive")
        if self.path_loss_exp < 2:
            raise ConfigError("path loss exponent must be >= 2")

    def received_power(self, distance_m):
        """Received power at the given distance; flat inside the reference distance."""
        if distance_m < self.ref_distance_m:
            return self.tx_power_w
        return self.tx_power_w * (self.ref_distance_m / distance_m) ** self.path_loss_exp


@dataclass(slots=True)
class Packet:
    kind: str
    src: int
    ttl_hops: int
    payload: dict = field(default_factory=dict)
    path_record: list = field(default_factory=list)
    dst: int | None = None  # None = broadcast processing at every neighbor
    pid: tuple = None       # (origin, seq) set by Kernel.new_packet

    def hop_copy(self):
        """Copy for relaying: shared payload, own ttl/path_record."""
        return Packet(self.kind, self.src, self.ttl_hops, self.payload,
                      list(self.path_record), self.dst, self.pid)


class Node:
    """One mobile node. Protocol layers hang their per-node state off this object."""

    __slots__ = ("nid", "x", "y", "energy_j", "drain_w", "alive",
                 "zone", "contacts", "mob", "sds", "mcast", "sds_capable")

    def __init__(self, nid, x, y, energy_j=1000.0, drain_w=1.0):
        self.nid = nid
        self.x = x
        self.y = y
        self.energy_j = energy_j
        self.drain_w = drain_w
        self.alive = True
        self.sds_capable = True
        self.zone = None
        self.contacts = None
        self.mob = None
        self.sds = None
        self.mcast = None

    def pos(self):
        return (self.x, self.y)


class Kernel:
    """Single-threaded event loop owning all node state."""

    def __init__(self, area_w, area_h, radio=None, seed=0, one_hop_latency_s=0.001,
                 trace_packets=False):
        self.area_w = float(area_w)
        self.area_h = float(area_h)
        self.radio = radio or RadioModel()
        self.rng = random.Random(seed)
        self.seed = seed
        self.latency_us = int(round(one_hop_latency_s * US))
        self.now_us = 0
        self.trace_packets = trace_packets

        self.nodes = {}
        self._queue = []           # (t_us, seq, handle)
        self._seq = 0
        self._handles = {}         # handle -> (fn, args)
        self._next_handle = 0
        self._pkt_seq = 0

        self._nbr_sets = {}        # nid -> frozenset of neighbor ids
        self._nbr_sorted = {}      # nid -> tuple, rebuilt (not mutated) per rebuild
        self._link_listeners = []
        self.handlers = {}         # packet kind -> fn(nid, packet, rx_power, sender)
        self.power_kinds = {HELLO}  # kinds whose deliveries carry power samples
        self.packet_counts = {}    # kind -> transmissions
        self.trace_events = []     # (t_us, node, kind, detail)
        self.debug_hook = None     # called after every processed event

    # -- time ---------------------------------------------------------------

    @property
    def now_s(self):
        return self.now_us / US

    # -- nodes and links ----------------------------------------------------

    def add_node(self, nid, x, y, energy_j=1000.0, drain_w=1.0):
        if nid in self.nodes:
            raise ConfigError(f"duplicate node id {nid}")
        if not (0 <= x <= self.area_w and 0 <= y <= self.area_h):
            raise ConfigError(f"node {nid} position outside area")
        node = Node(nid, x, y, energy_j, drain_w)
        self.nodes[nid] = node
        self._nbr_sets[nid] = frozenset()
        self._nbr_sorted[nid] = ()
        return node

    def node(self, nid):
        try:
            return self.nodes[nid]
        except KeyError:
            raise FatalSimError(f"unknown node {nid}") from None

    def energy_left(self, nid):
        node = self.node(nid)
        return max(0.0, node.energy_j - node.drain_w * self.now_s)

    def kill_node(self, nid):
        """Remove a node from the radio graph (failure/partition directives)."""
        self.node(nid).alive = False
        self.rebuild_links()

    def on_link_change(self, fn):
        """Register fn(nid, added, removed), called per affected node after rebuilds."""
        self._link_listeners.append(fn)

    def rebuild_links(self):
        """Recompute the unit-disk graph via a grid index; notify listeners of diffs."""
        cell = self.radio.range_m
        grid = {}
        live = [n for n in self.nodes.values() if n.alive]
        for n in live:
            grid.setdefault((int(n.x // cell), int(n.y // cell)), []).append(n)
        r2 = self.radio.range_m ** 2
        changes = []
        for n in live:
            cx, cy = int(n.x // cell), int(n.y // cell)
            found = []
            for gx in (cx - 1, cx, cx + 1):
                for gy in (cy - 1, cy, cy + 1):
                    for m in grid.get((gx, gy), ()):
                        if m.nid == n.nid:
                            continue
                        dx = m.x - n.x
                        dy = m.y - n.y
                        if dx * dx + dy * dy <= r2:
                            found.append(m.nid)
            new = frozenset(found)
            old = self._nbr_sets[n.nid]
            if new != old:
                changes.append((n.nid, sorted(new - old), sorted(old - new)))
                self._nbr_sets[n.nid] = new
                self._nbr_sorted[n.nid] = tuple(sorted(new))
        for n in self.nodes.values():
            if not n.alive and self._nbr_sets[n.nid]:
                changes.append((n.nid, [], sorted(self._nbr_sets[n.nid])))
                self._nbr_sets[n.nid] = frozenset()
                self._nbr_sorted[n.nid] = ()
        changes.sort()
        for nid, added, removed in changes:
            for fn in self._link_listeners:
                fn(nid, added, removed)
        return changes

    def neighbors(self, nid):
        self.node(nid)
        return self._nbr_sets[nid]

    def sorted_neighbors(self, nid):
        return self._nbr_sorted[nid]

    def are_neighbors(self, a, b):
        return b in self._nbr_sets[a]

    def distance(self, a, b):
        na, nb = self.node(a), self.node(b)
        return math.hypot(na.x - nb.x, na.y - nb.y)

    # -- events ---------------------------------------------------------------

    def schedule_at(self, t_us, fn, *args):
        if t_us < self.now_us:
            raise ConfigError(f"scheduling in the past: {t_us} < {self.now_us}")
        handle = self._next_handle
        self._next_handle += 1
        self._handles[handle] = (fn, args)
        heapq.heappush(self._queue, (t_us, self._seq, handle))
        self._seq += 1
        return handle

    def schedule_in(self, dt_us, fn, *args):
        return self.schedule_at(self.now_us + int(dt_us), fn, *args)

    def cancel(self, handle):
        self._handles.pop(handle, None)

    def run_until(self, t_us):
        """Process all events with time <= t_us; advance the clock to t_us."""
        if t_us < self.now_us:
            raise ConfigError("run_until target is in the past")
        while self._queue and self._queue[0][0] <= t_us:
            ev_t, _, handle = heapq.heappop(self._queue)
            entry = self._handles.pop(handle, None)
            if entry is None:
                continue  # cancelled
            self.now_us = ev_t
            fn, args = entry
            fn(*args)
            if self.debug_hook is not None:
                self.debug_hook()
        self.now_us = t_us

    # -- radio ----------------------------------------------------------------

    def register_handler(self, kind, fn):
        self.handlers[kind] = fn

    def new_packet(self, kind, src, ttl_hops, payload=None, dst=None):
        self._pkt_seq += 1
        return Packet(kind, src, ttl_hops, payload or {}, [], dst,
                      pid=(src, self._pkt_seq))

    def transmit(self, sender, packet):
        """Broadcast one hop. Returns the delivery set [(nid, rx_power), ...].

        Every current neighbor receives a copy after the one-hop latency;
        handler dispatch is limited to packet.dst when set (unicast processing).
        Received power is computed for kinds in power_kinds (hellos, which feed
        the mobility metric); other deliveries carry None.
        """
        snode = self.node(sender)
        if packet.ttl_hops <= 0:
            raise ConfigError("transmit requires ttl_hops > 0")
        self.packet_counts[packet.kind] = self.packet_counts.get(packet.kind, 0) + 1
        receivers = self._nbr_sorted[sender]
        powers = None
        if packet.kind in self.power_kinds:
            received = self.radio.received_power
            sx, sy = snode.x, snode.y
            nodes = self.nodes
            powers = [received(math.hypot(nodes[nid].x - sx, nodes[nid].y - sy))
                      for nid in receivers]
        if self.trace_packets:
            self.trace(sender, "packet_send",
                       {"pkt": packet.kind, "to": list(receivers)})
        if receivers:
            self.schedule_in(self.latency_us, self._deliver, sender, packet,
                             receivers, powers)
        if powers is not None:
            return list(zip(receivers, powers))
        return [(nid, None) for nid in receivers]

    def forward(self, nid, pkt, dst):
        """Relay a unicast-chained packet one hop; drops it on TTL exhaustion."""
        pkt.ttl_hops -= 1
        if pkt.ttl_hops > 0:
            pkt.dst = dst
            self.transmit(nid, pkt)

    def _deliver(self, sender, packet, receivers, powers):
        # Handlers receive the transmitted object itself. A dst-directed packet
        # dispatches exactly once, so its handler may mutate it; broadcast
        # handlers must hop_copy() before mutating (after their dedup checks).
        dst = packet.dst
        if dst is not None and not self.trace_packets:
            if dst not in receivers:
                return
            node = self.nodes.get(dst)
            if node is None or not node.alive:
                return
            handler = self.handlers.get(packet.kind)
            if handler is not None:
                rx = powers[receivers.index(dst)] if powers else None
                handler(dst, packet, rx, sender)
            return
        for i, nid in enumerate(receivers):
            node = self.nodes.get(nid)
            if node is None or not node.alive:
                continue
            if self.trace_packets:
                self.trace(nid, "packet_recv",
                           {"pkt": packet.kind, "from": sender, "dst": dst})
            if dst is not None and dst != nid:
                continue
            handler = self.handlers.get(packet.kind)
            if handler is not None:
                rx = powers[i] if powers else None
                handler(nid, packet, rx, sender)

    # -- trace ------------------------------------------------------------

    def trace(self, node, kind, detail):
        self.trace_events.append((self.now_us, node, kind, detail))
