"""Multicast service: sender push (Adv with backward learning), staged receiver
pull (zone SDS, contacts, local member broadcast, RR fallback), mesh forwarding
with exactly-one-active upstream per receiver, local recovery and handoff, and
popularity-driven local SDS promotion.

Mesh state is kept per (node, group) as refcounted links: a link carries the
set of receiver ids whose active path traverses it (down toward the member,
up toward the sender) plus standby sets for precomputed alternate paths. A
link is active while any active reference exists, so the no-black-hole rule
(members below imply an active branch) holds by construction, and a leave
deactivates branches exactly as the emptied subtree unwinds.
"""

import math
from dataclasses import dataclass

from .kernel import (US, ADV, BRANCH_BREAK, DATA, GROUP_QUERY,
                     GROUP_QUERY_REPLY, JOIN_QUERY, JOIN_REPLY, JOIN_REQUEST,
                     MESH_LEAVE, SDS_ADVERT)
from .rendezvous import GeoGrid, GroupAddress, WELL_KNOWN_PREFIX


@dataclass
class MulticastConfig:
    adv_ttl: int | None = None          # None: R + 2
    adv_period_s: float = 5.0
    max_paths: int = 3
    pop_query_th: float = 3.0
    pop_th: float = 2.0
    pop_half_life_s: float = 30.0
    member_expiry_s: float | None = None  # None: 3 * adv_period
    route_quality_floor: float = 0.0
    data_ttl: int = 64
    stage_rr_timeout_s: float = 1.5
    join_backoff_s: float = 2.0
    join_max_backoff_s: float = 30.0
    group_query_window_s: float = 0.5


class Link:
    """One mesh adjacency for a group at a node."""

    __slots__ = ("down_members", "up_for", "standby_down", "standby_up",
                 "override", "last_us")

    def __init__(self, now_us):
        self.down_members = set()   # receiver ids actively served below via this peer
        self.up_for = set()         # receiver ids whose active path continues above
        self.standby_down = set()
        self.standby_up = set()
        self.override = False
        self.last_us = now_us

    def active(self):
        return bool(self.down_members) or bool(self.up_for) or self.override

    def empty(self):
        return not (self.down_members or self.up_for or self.standby_down
                    or self.standby_up or self.override)


class MeshEntry:
    __slots__ = ("roles", "links", "upstream_paths", "last_data_us", "seen_data",
                 "adv_seq")

    def __init__(self):
        self.roles = set()          # {"sender", "receiver", "forwarder"}
        self.links = {}             # peer -> Link
        self.upstream_paths = []    # receiver side: {"path","stability","active"}
        self.last_data_us = 0
        self.seen_data = set()      # (src, seq)
        self.adv_seq = 0


class JoinState:
    __slots__ = ("key", "stage", "attempts", "timer", "resolved", "query_kind",
                 "on_sessions")

    def __init__(self, key, query_kind):
        self.key = key
        self.stage = 0
        self.attempts = 0
        self.timer = None
        self.resolved = False
        self.query_kind = query_kind   # "group_info" or "session_registry"
        self.on_sessions = None


class McastState:
    def __init__(self):
        self.groups = {}        # group key -> MeshEntry
        self.adv_cache = {}     # group key -> {sender -> {"path","stab","t_us","pos"}}
        self.joins = {}         # join id -> JoinState
        self.pop = {}           # group key -> popularity bookkeeping
        self.seen = set()       # flood dedup tokens
        self.sessions_found = {}


class MulticastService:
    def __init__(self, kernel, config, zone_mgr, contacts_mgr, rendezvous_mgr,
                 mobility_mgr):
        self.kernel = kernel
        self.config = config
        self.zone = zone_mgr
        self.contacts = contacts_mgr
        self.rr = rendezvous_mgr
        self.mobility = mobility_mgr
        R = zone_mgr.config.radius_R
        if config.adv_ttl is None:
            config.adv_ttl = R + 2
        if config.member_expiry_s is None:
            config.member_expiry_s = 3.0 * config.adv_period_s
        lat = kernel.latency_us / US
        self._stage_timeouts = {
            1: 4 * R * lat + 0.05,
            2: 4 * (2 * R + 1) * lat + 0.05,
            3: 2 * R * lat + 0.05,
            4: config.stage_rr_timeout_s,
        }
        self.mesh_nodes = {}     # group key -> set of node ids holding entries
        self.receivers = {}      # group key -> set of joined receiver ids
        for node in kernel.nodes.values():
            node.mcast = McastState()
        kernel.register_handler(ADV, self._on_adv)
        kernel.register_handler(JOIN_QUERY, self._on_join_query)
        kernel.register_handler(JOIN_REQUEST, self._on_join_request)
        kernel.register_handler(MESH_LEAVE, self._on_mesh_walk)
        kernel.register_handler(BRANCH_BREAK, self._on_branch_break)
        kernel.register_handler(DATA, self._on_data)
        kernel.register_handler(GROUP_QUERY, self._dispatch_group_query)
        kernel.register_handler(GROUP_QUERY_REPLY, self.rr._on_source_routed)
        kernel.register_handler(JOIN_REPLY, self.rr._on_source_routed)
        kernel.register_handler(SDS_ADVERT, self._on_local_sds_advert)
        kernel.on_link_change(self._on_link_change)
        zone_mgr.register_evaluator(self._eval_group_info)
        zone_mgr.register_evaluator(self._eval_session_registry)
        rendezvous_mgr.register_rr_handler("join_query", self._rr_join_query)
        rendezvous_mgr.register_rr_handler("rr_update", self._rr_sender_update)
        rendezvous_mgr.register_rr_handler("group_sync", self._rr_group_sync)
        rendezvous_mgr.register_rr_handler("session_query", self._rr_session_query)
        rendezvous_mgr._source_route_terminals[JOIN_REPLY] = self._terminal_join_reply
        rendezvous_mgr._source_route_terminals[GROUP_QUERY_REPLY] = \
            self._terminal_group_reply

    def start(self):
        self.kernel.schedule_in(int(self.config.adv_period_s * US),
                                self._maintenance)

    # -- state helpers -----------------------------------------------------------

    def entry(self, nid, key, create=False):
        groups = self.kernel.nodes[nid].mcast.groups
        ent = groups.get(key)
        if ent is None and create:
            ent = MeshEntry()
            groups[key] = ent
            self.mesh_nodes.setdefault(key, set()).add(nid)
        return ent

    def _gc_entry(self, nid, key):
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return
        for peer in [p for p, l in ent.links.items() if l.empty()]:
            del ent.links[peer]
        if not ent.links and not ent.roles and not ent.upstream_paths:
            del self.kernel.nodes[nid].mcast.groups[key]
            self.mesh_nodes.get(key, set()).discard(nid)

    def mesh_active(self, nid, key):
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return False
        if "sender" in ent.roles:
            return True
        return any(l.active() for l in ent.links.values())

    def _link(self, nid, key, peer):
        ent = self.entry(nid, key, create=True)
        link = ent.links.get(peer)
        if link is None:
            link = Link(self.kernel.now_us)
            ent.links[peer] = link
        return link

    def _note_activity(self, nid):
        self.contacts.record_discovery(nid)

    # -- sender side ----------------------------------------------------------------

    def start_sender(self, nid, addr, scope_ttl=None):
        """Make nid an advertising sender of the group (idempotent)."""
        key = addr.key()
        ent = self.entry(nid, key, create=True)
        if "sender" in ent.roles:
            return
        ent.roles.add("sender")
        self._advertise(nid, key, first=True, scope_ttl=scope_ttl)

    def _advertise(self, nid, key, first=False, scope_ttl=None):
        node = self.kernel.nodes[nid]
        if not node.alive:
            return
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None or "sender" not in ent.roles:
            return
        ent.adv_seq += 1
        ttl = min(self.config.adv_ttl, scope_ttl) if scope_ttl else self.config.adv_ttl
        payload = {"group": list(key), "sender": nid, "seq": ent.adv_seq,
                   "pos": node.pos(), "stab": 1.0}
        pkt = self.kernel.new_packet(ADV, nid, ttl, payload)
        node.mcast.seen.add(("adv", nid, ent.adv_seq))
        self.kernel.trace(nid, "adv_send", {"g": list(key), "seq": ent.adv_seq})
        self.kernel.transmit(nid, pkt)
        rect = self.rr.grid.rect_of_prefix(key[0])
        dist = GeoGrid.distance_to_rect(node.pos(), rect)
        if first or dist > self.rr.config.l_limit_m:
            self.rr.lar_send(nid, key[0], "rr_update",
                             {"group": list(key), "sender": nid, "pos": node.pos()})
        self.kernel.schedule_in(int(self.config.adv_period_s * US),
                                self._advertise, nid, key, False, scope_ttl)

    def _on_adv(self, nid, pkt, rx_power, sender):
        state = self.kernel.nodes[nid].mcast
        key = tuple(pkt.payload["group"])
        origin = pkt.payload["sender"]
        dedup = ("adv", origin, pkt.payload["seq"])
        if dedup in state.seen:
            return
        state.seen.add(dedup)
        record = pkt.path_record + [nid]
        stab = min(pkt.payload["stab"], self.mobility.stability(nid, sender))
        route = list(reversed(record[:-1])) + [origin]
        cache = state.adv_cache.setdefault(key, {})
        cache[origin] = {"path": route, "stab": stab, "t_us": self.kernel.now_us,
                         "pos": tuple(pkt.payload["pos"])}
        sds = self.kernel.nodes[nid].sds
        if key[0] in sds.prefixes or key in sds.local_groups:
            self.rr.record_sender(nid, key, origin, pkt.payload["pos"], route)
        self._pop_observe(nid, key)
        if pkt.ttl_hops > 1:
            relay = pkt.hop_copy()
            relay.path_record = record
            relay.payload = dict(pkt.payload, stab=stab)
            relay.ttl_hops -= 1
            self.kernel.transmit(nid, relay)

    # -- receiver discovery ------------------------------------------------------------

    def receiver_join(self, nid, addr):
        """Run the staged discovery and join the group; progress is async."""
        key = addr.key()
        state = self.kernel.nodes[nid].mcast
        existing = state.joins.get(key)
        if existing is not None and not existing.resolved:
            return existing
        join = JoinState(key, "group_info")
        state.joins[key] = join
        ent = self.entry(nid, key, create=True)
        ent.roles.add("receiver")
        self.receivers.setdefault(key, set()).add(nid)
        self._note_activity(nid)
        self._stage_advance(nid, join)
        return join

    def bootstrap_discover_sessions(self, nid, on_done=None):
        """Discover active sessions via the well-known session-advertisement group."""
        key = (WELL_KNOWN_PREFIX, 0)
        join = JoinState(key, "session_registry")
        join.on_sessions = on_done
        self.kernel.nodes[nid].mcast.joins[("bootstrap",) + key] = join
        self._note_activity(nid)
        self._stage_advance(nid, join)
        return join

    def _trace_stage(self, nid, join, status, hops=None):
        detail = {"g": list(join.key), "stage": join.stage, "status": status,
                  "q": join.query_kind}
        if hops is not None:
            detail["hops"] = hops
        self.kernel.trace(nid, "join_stage", detail)

    def _stage_advance(self, nid, join):
        if join.resolved or not self.kernel.nodes[nid].alive:
            return
        join.stage += 1
        if join.stage > 4:
            self._trace_stage(nid, join, "pending")
            backoff = min(self.config.join_backoff_s * (2 ** join.attempts),
                          self.config.join_max_backoff_s)
            join.attempts += 1
            join.stage = 0
            self.kernel.schedule_in(int(backoff * US), self._stage_advance, nid, join)
            return
        self._trace_stage(nid, join, "attempt")
        fn = (self._stage_zone, self._stage_contacts, self._stage_local,
              self._stage_rr)[join.stage - 1]
        fn(nid, join)

    def _arm_timeout(self, nid, join):
        t = self._stage_timeouts[join.stage]
        join.timer = self.kernel.schedule_in(int(t * US), self._stage_timeout,
                                             nid, join, join.stage)

    def _stage_timeout(self, nid, join, stage):
        if join.resolved or join.stage != stage:
            return
        self._trace_stage(nid, join, "timeout")
        self._stage_advance(nid, join)

    def _stage_zone(self, nid, join):
        key = join.key
        if join.query_kind == "group_info":
            detail = self._local_group_info(nid, key)
        else:
            detail = self._eval_session_registry(nid, {"kind": "session_registry"})
        if detail is not None:
            self._stage_success(nid, join, detail, [])
            return
        sds = self._known_zone_sds(nid, key)
        route = self.zone.intra_zone_route(nid, sds) if sds is not None else None
        if not route:
            self._trace_stage(nid, join, "miss")
            self._stage_advance(nid, join)
            return
        pred = {"kind": join.query_kind, "group": key}
        payload = {"pred": pred, "origin": nid, "route": tuple(route),
                   "join_key": list(key), "stage": join.stage}
        pkt = self.kernel.new_packet(GROUP_QUERY, nid, len(route) + 1, payload,
                                     dst=route[0])
        self.kernel.transmit(nid, pkt)
        self._arm_timeout(nid, join)

    def _local_group_info(self, nid, key):
        """Stage-1 knowledge: own adv cache, then own SDS records."""
        cache = self._live_adv_senders(nid, key)
        if cache:
            return {"senders": {sid: {"pos": meta["pos"], "route": meta["path"],
                                      "stab": meta["stab"]}
                                for sid, meta in cache.items()}}
        sds = self.kernel.nodes[nid].sds
        if key[0] in sds.prefixes or key in sds.local_groups:
            senders = self.rr.live_senders(nid, key)
            if senders:
                return {"senders": {sid: {"pos": m["pos"], "route": m["route"],
                                          "stab": None}
                                    for sid, m in senders.items()}}
        return None

    def _live_adv_senders(self, nid, key):
        cache = self.kernel.nodes[nid].mcast.adv_cache.get(key, {})
        horizon = self.kernel.now_us - int(self.config.member_expiry_s * US)
        return {sid: m for sid, m in cache.items() if m["t_us"] >= horizon}

    def _known_zone_sds(self, nid, key):
        node = self.kernel.nodes[nid]
        members = node.zone.table.members
        horizon = self.kernel.now_us - int(self.rr.config.peer_ttl_s * US)
        local = node.sds.known_local_sds.get(key, {})
        for sid in sorted(local):
            if local[sid] >= horizon and sid in members:
                return sid
        detail = self.rr._eval_sds_for(nid, {"kind": "sds_for", "prefix": key[0]})
        if detail is not None and detail["sds"] != nid:
            return detail["sds"]
        return None

    def _stage_contacts(self, nid, join):
        if not self.kernel.nodes[nid].contacts.entries:
            self._trace_stage(nid, join, "miss")
            self._stage_advance(nid, join)
            return
        pred = {"kind": join.query_kind, "group": join.key}
        stage = join.stage

        def on_reply(detail, qpath, _nid=nid, _join=join, _stage=stage):
            if not _join.resolved and _join.stage == _stage:
                self._stage_success(_nid, _join, detail, qpath)

        self.contacts.contact_query(nid, pred, on_reply,
                                    timeout_s=self._stage_timeouts[2])
        self._arm_timeout(nid, join)

    def _stage_local(self, nid, join):
        R = self.zone.config.radius_R
        payload = {"group": list(join.key), "origin": nid, "stab": 1.0,
                   "q": join.query_kind, "stage": join.stage}
        pkt = self.kernel.new_packet(JOIN_QUERY, nid, R, payload)
        self.kernel.nodes[nid].mcast.seen.add(("jq",) + pkt.pid)
        self.kernel.transmit(nid, pkt)
        self._arm_timeout(nid, join)

    def _stage_rr(self, nid, join):
        kind = "join_query" if join.query_kind == "group_info" else "session_query"
        self.rr.lar_send(nid, join.key[0], kind,
                         {"group": list(join.key), "origin": nid,
                          "stage": join.stage})
        self._arm_timeout(nid, join)

    def _stage_success(self, nid, join, detail, query_path):
        if join.resolved:
            return
        if join.query_kind == "session_registry":
            join.resolved = True
            if join.timer is not None:
                self.kernel.cancel(join.timer)
            self._trace_stage(nid, join, "success", hops=len(query_path))
            found = {name: GroupAddress(*meta["addr"])
                     for name, meta in detail.get("sessions", {}).items()}
            self.kernel.nodes[nid].mcast.sessions_found.update(found)
            for name, meta in detail.get("sessions", {}).items():
                self.kernel.nodes[nid].sds.announcements.setdefault(name, dict(meta))
            if join.on_sessions is not None:
                join.on_sessions(found)
            return
        candidates = self._candidates_from_detail(nid, detail, query_path)
        launched = self.send_join_request(nid, join.key, candidates)
        if launched == 0:
            # the answer offered nothing joinable (e.g. stale paths); keep looking
            self._trace_stage(nid, join, "unusable")
            if join.timer is not None:
                self.kernel.cancel(join.timer)
            self._stage_advance(nid, join)
            return
        join.resolved = True
        if join.timer is not None:
            self.kernel.cancel(join.timer)
        self._trace_stage(nid, join, "success", hops=len(query_path))

    # -- query evaluation (runs at remote nodes) --------------------------------------

    def _eval_group_info(self, nid, pred):
        if pred.get("kind") != "group_info":
            return None
        key = tuple(pred["group"])
        detail = self._local_group_info(nid, key)
        if detail is not None:
            return detail
        if self.mesh_active(nid, key):
            return {"graft": nid}
        return None

    def _eval_session_registry(self, nid, pred):
        if pred.get("kind") != "session_registry":
            return None
        ann = self.kernel.nodes[nid].sds.announcements
        if not ann:
            return None
        return {"sessions": {name: dict(meta) for name, meta in sorted(ann.items())}}

    def _dispatch_group_query(self, nid, pkt, rx_power, sender):
        if pkt.payload.get("q") == "pop":
            self._flood_pop_query(nid, pkt)
        else:
            self._on_group_query(nid, pkt, rx_power, sender)

    def _on_group_query(self, nid, pkt, rx_power, sender):
        pkt.path_record.append(nid)
        route = pkt.payload["route"]
        pos = route.index(nid)
        if pos + 1 < len(route):
            self.kernel.forward(nid, pkt.hop_copy(), route[pos + 1])
            return
        self._note_activity(nid)
        detail = self.zone.evaluate(nid, pkt.payload["pred"])
        if detail is None:
            return
        inner = {"detail": detail, "join_key": pkt.payload.get("join_key"),
                 "stage": pkt.payload.get("stage"),
                 "qpath": list(pkt.path_record)}
        self.rr._reply_source_routed(nid, pkt, GROUP_QUERY_REPLY, inner,
                                     pkt.payload["origin"])

    def _terminal_group_reply(self, nid, pkt):
        inner = pkt.payload["inner"]
        if inner.get("pop") is not None:
            self._collect_pop_reply(nid, inner)
            return
        if inner.get("sync_for") is not None:
            self._absorb_group_sync(nid, inner)
            return
        key = tuple(inner["join_key"]) if inner.get("join_key") else None
        join = self._find_join(nid, key, inner.get("stage"))
        if join is not None and not join.resolved:
            self._stage_success(nid, join, inner["detail"], inner.get("qpath", []))

    def _find_join(self, nid, key, stage):
        state = self.kernel.nodes[nid].mcast
        for j in state.joins.values():
            if j.key == key and not j.resolved and j.stage == stage:
                return j
        return None

    def _on_join_query(self, nid, pkt, rx_power, sender):
        if pkt.payload.get("q") == "probe":
            self._probe_step(nid, pkt, sender)
            return
        state = self.kernel.nodes[nid].mcast
        dd = ("jq",) + pkt.pid
        if dd in state.seen:
            return
        state.seen.add(dd)
        pkt = pkt.hop_copy()
        pkt.path_record.append(nid)
        self._note_activity(nid)
        key = tuple(pkt.payload["group"])
        stab = min(pkt.payload["stab"], self.mobility.stability(nid, sender))
        if pkt.payload["q"] == "group_info":
            self._pop_observe(nid, key)
            detail = self._eval_group_info(nid, {"kind": "group_info", "group": key})
        else:
            detail = self._eval_session_registry(nid, {"kind": "session_registry"})
        if detail is not None:
            inner = {"detail": detail, "join_key": list(key), "stab": stab,
                     "stage": pkt.payload.get("stage"),
                     "qpath": list(pkt.path_record)}
            self.rr._reply_source_routed(nid, pkt, GROUP_QUERY_REPLY, inner,
                                         pkt.payload["origin"])
            return
        if pkt.ttl_hops > 1:
            pkt.payload = dict(pkt.payload, stab=stab)
            pkt.ttl_hops -= 1
            self.kernel.transmit(nid, pkt)

    def _rr_join_query(self, nid, pkt):
        inner = pkt.payload["inner"]
        key = tuple(inner["group"])
        senders = self.rr.live_senders(nid, key)
        if senders:
            detail = {"senders": {sid: {"pos": m["pos"], "route": m["route"],
                                        "stab": None}
                                  for sid, m in senders.items()}}
        elif self.mesh_active(nid, key):
            detail = {"graft": nid}
        else:
            return  # nothing to offer; the querier times out and retries
        reply = {"detail": detail, "join_key": list(key),
                 "stage": inner.get("stage"), "qpath": list(pkt.path_record)}
        self.rr._reply_source_routed(nid, pkt, JOIN_REPLY, reply, inner["origin"])

    def _terminal_join_reply(self, nid, pkt):
        inner = pkt.payload["inner"]
        key = tuple(inner["join_key"])
        if inner.get("probe"):
            self._probe_result(nid, key, inner)
            return
        join = self._find_join(nid, key, inner.get("stage"))
        if join is not None and not join.resolved:
            self._stage_success(nid, join, inner["detail"], inner.get("qpath", []))

    def _rr_sender_update(self, nid, pkt):
        inner = pkt.payload["inner"]
        self.rr.record_sender(nid, tuple(inner["group"]), inner["sender"],
                              inner["pos"], None)

    def _rr_session_query(self, nid, pkt):
        inner = pkt.payload["inner"]
        ann = self.kernel.nodes[nid].sds.announcements
        detail = {"sessions": {name: dict(meta) for name, meta in sorted(ann.items())}}
        reply = {"detail": detail, "join_key": list(inner["group"]),
                 "stage": inner.get("stage"), "qpath": list(pkt.path_record)}
        self.rr._reply_source_routed(nid, pkt, JOIN_REPLY, reply, inner["origin"])

    # -- join requests and mesh construction -------------------------------------------

    def _candidates_from_detail(self, nid, detail, query_path):
        out = []
        to_replier = list(query_path)
        if detail.get("graft") is not None:
            path = to_replier if to_replier else None
            if detail["graft"] in self.kernel.neighbors(nid):
                path = [detail["graft"]]
            if path:
                out.append({"path": path, "stability": detail.get("stab", 0.5),
                            "sender": None, "pos": None})
        for sid in sorted(detail.get("senders", {})):
            meta = detail["senders"][sid]
            stab = meta.get("stab")
            path = None
            if meta.get("route"):
                path = to_replier + list(meta["route"])
                if len(set(path)) != len(path) or nid in path:
                    path = None
            out.append({"path": path,
                        "stability": stab if stab is not None else 0.5,
                        "sender": sid,
                        "pos": tuple(meta["pos"]) if meta.get("pos") else None})
        return out

    def send_join_request(self, nid, key, candidates):
        """Join along up to max_paths candidates; the most stable one is active."""
        floor = self.config.route_quality_floor
        concrete = []
        probes = []
        for c in candidates:
            if c["path"] and c["stability"] >= floor:
                concrete.append(c)
            elif c["pos"] is not None:
                probes.append(c)
        concrete.sort(key=lambda c: (-c["stability"], len(c["path"]), tuple(c["path"])))
        ent = self.entry(nid, key, create=True)
        ent.roles.add("receiver")
        self.receivers.setdefault(key, set()).add(nid)
        launched = 0
        if concrete:
            picked = concrete[:self.config.max_paths]
            self.kernel.trace(nid, "join_request",
                              {"g": list(key), "n": len(picked)})
            for c in picked:
                want_active = launched == 0 and not self._has_active(nid, key)
                if self._install_upstream(nid, key, c["path"], c["stability"],
                                          active=want_active):
                    launched += 1
        if launched:
            return launched
        seen_senders = set()
        for c in probes:
            if c["sender"] in seen_senders:
                continue
            seen_senders.add(c["sender"])
            if len(seen_senders) > self.config.max_paths:
                break
            self._send_probe(nid, key, c["sender"], c["pos"])
            launched += 1
        return launched

    def _has_active(self, nid, key):
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return False
        return any(p["active"] for p in ent.upstream_paths)

    def _install_upstream(self, nid, key, path, stability, active):
        """Record a candidate path at the receiver and walk a join along it.

        Returns False when the path is unusable (first hop not adjacent)."""
        if not path or not self.kernel.are_neighbors(nid, path[0]):
            return False
        ent = self.entry(nid, key, create=True)
        for p in ent.upstream_paths:
            if p["path"] == list(path):
                if active and not p["active"]:
                    self._activate_path(nid, key, p)
                return True
        ent.upstream_paths.append({"path": list(path), "stability": stability,
                                   "active": active})
        if active:
            self.kernel.trace(nid, "branch_activate",
                              {"g": list(key), "via": path[0]})
        self._walk_join(nid, key, path, active)
        return True

    def _walk_join(self, nid, key, path, active):
        if not path:
            return
        link = self._link(nid, key, path[0])
        if active:
            link.up_for.add(nid)
        else:
            link.standby_up.add(nid)
        link.last_us = self.kernel.now_us
        payload = {"group": list(key), "receiver": nid, "active": active,
                   "route": tuple(path), "from": nid}
        pkt = self.kernel.new_packet(JOIN_REQUEST, nid, len(path) + 1, payload,
                                     dst=path[0])
        self.kernel.transmit(nid, pkt)

    def _on_join_request(self, nid, pkt, rx_power, sender):
        pkt.path_record.append(nid)
        route = pkt.payload["route"]
        key = tuple(pkt.payload["group"])
        r = pkt.payload["receiver"]
        active = pkt.payload["active"]
        pos = route.index(nid)
        prev = route[pos - 1] if pos > 0 else pkt.payload.get("from", r)
        link_down = self._link(nid, key, prev)
        if active:
            link_down.down_members.add(r)
        else:
            link_down.standby_down.add(r)
        link_down.last_us = self.kernel.now_us
        ent = self.entry(nid, key)
        if not ent.roles:
            ent.roles.add("forwarder")
        if pos + 1 < len(route):
            nxt_peer = route[pos + 1]
            link_up = self._link(nid, key, nxt_peer)
            if active:
                link_up.up_for.add(r)
            else:
                link_up.standby_up.add(r)
            link_up.last_us = self.kernel.now_us
            if not self.kernel.are_neighbors(nid, nxt_peer):
                self.kernel.schedule_in(0, self._notify_join_break, r, key,
                                        list(route))
                return
            self.kernel.forward(nid, pkt.hop_copy(), nxt_peer)
        else:
            ent.last_data_us = self.kernel.now_us
            self._ensure_upstream(nid, key)

    def _notify_join_break(self, receiver, key, route):
        """A join walk hit a vanished hop: discard the branch at the receiver."""
        node = self.kernel.nodes.get(receiver)
        if node is None:
            return
        ent = node.mcast.groups.get(key)
        if ent is None:
            return
        dead = [p for p in ent.upstream_paths if p["path"] == route]
        for p in dead:
            was_active = p["active"]
            ent.upstream_paths.remove(p)
            self._walk_mode(receiver, key, route, "leave_path")
            if was_active:
                self._failover(receiver, key)

    # -- mesh walks: explicit-route mark moves ------------------------------------------

    def _walk_mode(self, nid, key, path, mode):
        """Apply a mark move locally then walk it along the explicit path."""
        if not path:
            return
        self._apply_mode(nid, key, nid, mode, prev=None, nxt=path[0])
        payload = {"group": list(key), "receiver": nid, "mode": mode,
                   "route": tuple(path)}
        pkt = self.kernel.new_packet(MESH_LEAVE, nid, len(path) + 1, payload,
                                     dst=path[0])
        self.kernel.transmit(nid, pkt)

    def _on_mesh_walk(self, nid, pkt, rx_power, sender):
        route = pkt.payload["route"]
        r = pkt.payload["receiver"]
        key = tuple(pkt.payload["group"])
        mode = pkt.payload["mode"]
        if mode == "ref_leave":
            ent = self.kernel.nodes[nid].mcast.groups.get(key)
            if ent is None:
                return
            link = ent.links.get(sender)
            if link is not None:
                link.down_members.discard(r)
                link.standby_down.discard(r)
            self._ref_leave_up(nid, key, r)
            return
        pos = route.index(nid)
        prev = route[pos - 1] if pos > 0 else r
        nxt = route[pos + 1] if pos + 1 < len(route) else None
        self._apply_mode(nid, key, r, mode, prev=prev, nxt=nxt)
        if nxt is not None and self.kernel.are_neighbors(nid, nxt):
            self.kernel.forward(nid, pkt.hop_copy(), nxt)

    def _apply_mode(self, nid, key, r, mode, prev, nxt):
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return
        def move(link, down):
            was = link.active()
            act = link.down_members if down else link.up_for
            sby = link.standby_down if down else link.standby_up
            if mode == "upgrade":
                sby.discard(r)
                act.add(r)
            elif mode == "downgrade":
                act.discard(r)
                sby.add(r)
            elif mode == "leave_path":
                act.discard(r)
                sby.discard(r)
            if was and not link.active():
                self.kernel.trace(nid, "branch_deactivate", {"g": list(key)})
            elif not was and link.active():
                self.kernel.trace(nid, "branch_activate", {"g": list(key)})
        if prev is not None and prev in ent.links:
            move(ent.links[prev], down=True)
        if nxt is not None:
            if mode == "upgrade":
                move(self._link(nid, key, nxt), down=False)
            elif nxt in ent.links:
                move(ent.links[nxt], down=False)
        self._gc_entry(nid, key)
        if mode in ("downgrade", "leave_path"):
            self._ensure_upstream(nid, key)

    def receiver_leave(self, nid, addr):
        key = addr.key()
        node = self.kernel.nodes[nid]
        ent = node.mcast.groups.get(key)
        if ent is None:
            return
        ent.roles.discard("receiver")
        self.receivers.get(key, set()).discard(nid)
        for p in list(ent.upstream_paths):
            ent.upstream_paths.remove(p)
            self._walk_mode(nid, key, p["path"], "leave_path")
        node.mcast.joins.pop(key, None)
        self._gc_entry(nid, key)

    # -- branch activation rules ----------------------------------------------------

    def set_branch_activation(self, nid, key, peer, active):
        """Explicit (de)activation; deactivating a branch with members is refused."""
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None or peer not in ent.links:
            return False
        link = ent.links[peer]
        if active:
            link.override = True
            self.kernel.trace(nid, "branch_activate", {"g": list(key), "via": peer})
            return True
        if link.down_members or link.up_for:
            return False
        link.override = False
        self.kernel.trace(nid, "branch_deactivate", {"g": list(key), "peer": peer})
        self._gc_entry(nid, key)
        return True

    def _activate_path(self, nid, key, path_entry):
        """Make-before-break switch of the receiver's active upstream path."""
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        old = [p for p in ent.upstream_paths if p["active"] and p is not path_entry]
        path_entry["active"] = True
        self._walk_mode(nid, key, path_entry["path"], "upgrade")
        self.kernel.trace(nid, "branch_activate",
                          {"g": list(key), "via": path_entry["path"][0]})
        for p in old:
            p["active"] = False
            self._walk_mode(nid, key, p["path"], "downgrade")

    # -- data plane -----------------------------------------------------------------

    def send_data(self, nid, addr, seq, size=512):
        key = addr.key()
        ent = self.entry(nid, key, create=True)
        if "sender" not in ent.roles:
            self.start_sender(nid, addr)
        payload = {"group": list(key), "src": nid, "seq": seq, "size": size}
        self.kernel.trace(nid, "data_send", {"g": list(key), "seq": seq})
        pkt = self.kernel.new_packet(DATA, nid, self.config.data_ttl, payload)
        self.forward_data(nid, pkt, arrival_from=None)

    def _on_data(self, nid, pkt, rx_power, sender):
        self.forward_data(nid, pkt, arrival_from=sender)

    def forward_data(self, nid, pkt, arrival_from):
        """Deliver locally and copy along every other active mesh link (deduped)."""
        key = tuple(pkt.payload["group"])
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return 0
        dd = (pkt.payload["src"], pkt.payload["seq"])
        if dd in ent.seen_data:
            return 0
        ent.seen_data.add(dd)
        ent.last_data_us = self.kernel.now_us
        if "receiver" in ent.roles and nid != pkt.payload["src"]:
            self.kernel.trace(nid, "data_deliver",
                              {"g": list(key), "src": pkt.payload["src"],
                               "seq": pkt.payload["seq"]})
        if pkt.ttl_hops <= 1:
            return 0
        copies = 0
        for peer in sorted(ent.links):
            if peer == arrival_from or not ent.links[peer].active():
                continue
            out = pkt.hop_copy()
            out.ttl_hops -= 1
            out.dst = peer
            self.kernel.transmit(nid, out)
            copies += 1
        return copies

    # -- recovery and handoff ----------------------------------------------------------

    def _on_link_change(self, nid, added, removed):
        node = self.kernel.nodes[nid]
        if node.mcast is None or not node.alive:
            return
        state = node.mcast
        for key in sorted(state.groups):
            ent = state.groups.get(key)
            if ent is None:
                continue
            for peer in removed:
                link = ent.links.get(peer)
                if link is None:
                    continue
                if link.up_for or ("receiver" in ent.roles and link.standby_up):
                    self.local_recovery(nid, key, peer)
                elif link.down_members:
                    self._upstream_side_break(nid, key, peer)
                else:
                    del ent.links[peer]
                    self._gc_entry(nid, key)
            ent = state.groups.get(key)
            if ent is not None and "receiver" in ent.roles:
                for peer in added:
                    self.handoff_on_move(nid, key, peer)
                if added or removed:
                    self.kernel.trace(nid, "mesh_distance",
                                      {"g": list(key),
                                       "hops": self._hops_to_mesh(nid, key)})

    def local_recovery(self, nid, key, broken_peer):
        """Active upstream vanished: splice to a zone mesh node or fail over."""
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return "failed"
        link = ent.links.get(broken_peer)
        if link is not None:
            link.up_for.clear()
            link.standby_up.clear()
            if link.empty():
                del ent.links[broken_peer]
        subtree = self._downstream_members(nid, key)
        if "receiver" in ent.roles:
            subtree.add(nid)
        patch, route = self._find_zone_splice(nid, key,
                                              exclude={broken_peer} | subtree | {nid})
        if patch is not None:
            for r in sorted(subtree):
                self._splice_join(nid, key, route, r)
            self.kernel.trace(nid, "local_repair",
                              {"g": list(key), "ok": True, "via": patch})
            return "repaired"
        self.kernel.trace(nid, "local_repair", {"g": list(key), "ok": False})
        if "receiver" in ent.roles:
            self._failover(nid, key)
        for peer in sorted(ent.links):
            l = ent.links[peer]
            if l.down_members and self.kernel.are_neighbors(nid, peer):
                payload = {"group": list(key), "from": nid}
                pkt = self.kernel.new_packet(BRANCH_BREAK, nid, 2, payload, dst=peer)
                self.kernel.transmit(nid, pkt)
        return "failed"

    def _splice_join(self, nid, key, route, r):
        link = self._link(nid, key, route[0])
        link.up_for.add(r)
        link.last_us = self.kernel.now_us
        payload = {"group": list(key), "receiver": r, "active": True,
                   "route": tuple(route), "from": nid}
        pkt = self.kernel.new_packet(JOIN_REQUEST, nid, len(route) + 1, payload,
                                     dst=route[0])
        self.kernel.transmit(nid, pkt)

    def _downstream_members(self, nid, key):
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        out = set()
        if ent is not None:
            for link in ent.links.values():
                out |= link.down_members
        return out

    def _find_zone_splice(self, nid, key, exclude):
        """Nearest mesh-active zone member with a route that still probes through."""
        members = self.kernel.nodes[nid].zone.table.members
        for m in sorted(members):
            if m in exclude:
                continue
            mn = self.kernel.nodes.get(m)
            if mn is None or not mn.alive:
                continue
            if not self.mesh_active(m, key):
                continue
            route = self.zone.intra_zone_route(nid, m)
            if not route:
                continue
            prev = nid
            ok = True
            for hop in route:
                if not self.kernel.are_neighbors(prev, hop):
                    ok = False
                    break
                prev = hop
            if ok:
                return m, route
        return None, None

    def _upstream_side_break(self, nid, key, peer):
        """Downstream subtree detached; clear its marks from our up-chain."""
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        link = ent.links.get(peer)
        if link is None:
            return
        ids = sorted(link.down_members | link.standby_down)
        del ent.links[peer]
        for r in ids:
            self._ref_leave_up(nid, key, r)
        self._gc_entry(nid, key)

    def _ref_leave_up(self, nid, key, r):
        """Remove r's marks from this node's upstream links and propagate up."""
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return
        for peer in sorted(ent.links):
            link = ent.links[peer]
            if r not in link.up_for and r not in link.standby_up:
                continue
            was = link.active()
            link.up_for.discard(r)
            link.standby_up.discard(r)
            if was and not link.active():
                self.kernel.trace(nid, "branch_deactivate", {"g": list(key)})
            if self.kernel.are_neighbors(nid, peer):
                payload = {"group": list(key), "receiver": r, "mode": "ref_leave"}
                pkt = self.kernel.new_packet(MESH_LEAVE, nid, 2, payload, dst=peer)
                pkt.payload["route"] = ()
                self.kernel.transmit(nid, pkt)
        self._gc_entry(nid, key)
        self._ensure_upstream(nid, key)

    def _ensure_upstream(self, nid, key):
        """A node still serving members below must keep an upstream; repair if lost."""
        node = self.kernel.nodes.get(nid)
        if node is None or not node.alive:
            return
        ent = node.mcast.groups.get(key)
        if ent is None or "sender" in ent.roles:
            return
        if any(l.up_for for l in ent.links.values()):
            return
        if "receiver" in ent.roles and any(p["active"] for p in ent.upstream_paths):
            return
        if not any(l.down_members for l in ent.links.values()):
            return
        self.local_recovery(nid, key, broken_peer=None)

    def _on_branch_break(self, nid, pkt, rx_power, sender):
        key = tuple(pkt.payload["group"])
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return
        link = ent.links.get(sender)
        if link is not None:
            link.up_for.clear()
            link.standby_up.clear()
            if link.empty():
                del ent.links[sender]
        if "receiver" in ent.roles:
            self._failover(nid, key)
            return
        self.local_recovery(nid, key, sender)

    def _failover(self, nid, key):
        """Receiver lost its active path: activate the next-best standby or rejoin."""
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None:
            return
        live, dead = [], []
        for p in ent.upstream_paths:
            first = p["path"][0] if p["path"] else None
            if first is not None and self.kernel.are_neighbors(nid, first):
                live.append(p)
            else:
                dead.append(p)
        for p in dead:
            ent.upstream_paths.remove(p)
            self._walk_mode(nid, key, p["path"], "leave_path")
        if any(p["active"] for p in live):
            return
        standby = sorted((p for p in live if not p["active"]),
                         key=lambda p: (-p["stability"], len(p["path"])))
        if standby:
            self._activate_path(nid, key, standby[0])
            return
        state = self.kernel.nodes[nid].mcast
        join = state.joins.get(key)
        if join is None or join.resolved:
            fresh = JoinState(key, "group_info")
            state.joins[key] = fresh
            self._stage_advance(nid, fresh)

    def handoff_on_move(self, nid, key, new_peer):
        """Graft through a newly adjacent mesh node; make-before-break."""
        ent = self.kernel.nodes[nid].mcast.groups.get(key)
        if ent is None or "receiver" not in ent.roles:
            return
        if not self.mesh_active(new_peer, key):
            return
        active = [p for p in ent.upstream_paths if p["active"]]
        if active and active[0]["path"] and active[0]["path"][0] == new_peer:
            return
        if active and len(active[0]["path"]) <= 1:
            return
        if any(p["path"] == [new_peer] for p in ent.upstream_paths):
            return
        hops = self._hops_to_mesh(nid, key)
        new_entry = {"path": [new_peer], "stability": 1.0, "active": True}
        ent.upstream_paths.append(new_entry)
        self._walk_join(nid, key, [new_peer], active=True)
        for p in active:
            p["active"] = False
            self._walk_mode(nid, key, p["path"], "downgrade")
        self.kernel.trace(nid, "handoff",
                          {"g": list(key), "via": new_peer, "hops_to_mesh": hops})

    def _hops_to_mesh(self, nid, key, max_depth=8):
        """BFS distance to the nearest active mesh node (harness statistic)."""
        holders = self.mesh_nodes.get(key, set())
        seen = {nid}
        frontier = [nid]
        for depth in range(1, max_depth + 1):
            nxt = []
            for u in frontier:
                for v in self.kernel.sorted_neighbors(u):
                    if v in seen:
                        continue
                    seen.add(v)
                    if v in holders and self.mesh_active(v, key):
                        return depth
                    nxt.append(v)
            frontier = nxt
        return max_depth + 1

    # -- probes toward a located sender ------------------------------------------------

    def _send_probe(self, nid, key, sender_id, pos):
        payload = {"group": list(key), "origin": nid, "target": sender_id,
                   "pos": tuple(pos), "stab": 1.0, "q": "probe"}
        pkt = self.kernel.new_packet(JOIN_QUERY, nid, self.config.data_ttl, payload)
        self._probe_forward(nid, pkt)

    def _probe_step(self, nid, pkt, sender):
        pkt.path_record.append(nid)
        key = tuple(pkt.payload["group"])
        stab = min(pkt.payload["stab"], self.mobility.stability(nid, sender))
        pkt.payload = dict(pkt.payload, stab=stab)
        if self.mesh_active(nid, key) or nid == pkt.payload["target"]:
            inner = {"detail": {"graft": nid, "stab": stab},
                     "join_key": list(key), "probe": True,
                     "qpath": list(pkt.path_record)}
            self.rr._reply_source_routed(nid, pkt, JOIN_REPLY, inner,
                                         pkt.payload["origin"])
            return
        self._probe_forward(nid, pkt)

    def _probe_forward(self, nid, pkt):
        if pkt.ttl_hops <= 1:
            return
        goal = pkt.payload["pos"]
        me = self.kernel.nodes[nid]
        my_d = math.hypot(me.x - goal[0], me.y - goal[1])
        best, best_d = None, my_d
        for nbr in self.kernel.sorted_neighbors(nid):
            n = self.kernel.nodes[nbr]
            d = math.hypot(n.x - goal[0], n.y - goal[1])
            if d < best_d:
                best, best_d = nbr, d
        if best is None:
            target = pkt.payload["target"]
            if target in self.kernel.neighbors(nid):
                best = target
            else:
                return
        out = pkt.hop_copy()
        out.ttl_hops -= 1
        out.dst = best
        self.kernel.transmit(nid, out)

    def _probe_result(self, nid, key, inner):
        path = list(inner.get("qpath", []))
        if not path:
            return
        ent = self.entry(nid, key, create=True)
        if any(p["path"] == path for p in ent.upstream_paths):
            return
        active = not self._has_active(nid, key)
        if not active and len(ent.upstream_paths) >= self.config.max_paths:
            return
        self._install_upstream(nid, key, path, inner["detail"].get("stab", 0.5),
                               active=active)

    # -- popularity adaptation ----------------------------------------------------------

    def _pop_observe(self, nid, key):
        """Count Advs/queries heard; over threshold, measure and maybe promote."""
        node = self.kernel.nodes[nid]
        if not self.rr.eligible(nid):
            return
        sds = node.sds
        if key in sds.local_groups or key[0] in sds.prefixes:
            return
        state = node.mcast
        pop = state.pop.get(key)
        if pop is None:
            pop = {"count": 0.0, "last_us": self.kernel.now_us, "pending": False,
                   "replies": None, "promoted": False}
            state.pop[key] = pop
        dt = (self.kernel.now_us - pop["last_us"]) / US
        if dt > 0:
            pop["count"] *= 2.0 ** (-dt / self.config.pop_half_life_s)
            pop["last_us"] = self.kernel.now_us
        pop["count"] += 1.0
        if pop["promoted"] or pop["pending"]:
            return
        if pop["count"] > self.config.pop_query_th:
            pop["pending"] = True
            self._pop_group_query(nid, key)

    def _pop_group_query(self, nid, key):
        pop = self.kernel.nodes[nid].mcast.pop[key]
        pop["replies"] = {"members": set(), "sds": set()}
        mine = self._pop_eval(nid, key)
        if mine is not None:
            if mine.get("member") is not None:
                pop["replies"]["members"].add(nid)
            if mine.get("sds") is not None:
                pop["replies"]["sds"].add(nid)
        R = self.zone.config.radius_R
        payload = {"group": list(key), "origin": nid, "q": "pop", "stab": 1.0}
        pkt = self.kernel.new_packet(GROUP_QUERY, nid, R, payload)
        self.kernel.nodes[nid].mcast.seen.add(("pq",) + pkt.pid)
        self.kernel.transmit(nid, pkt)
        pred = {"kind": "pop_query", "group": key}
        self.contacts.contact_query(nid, pred, self._pop_contact_reply(nid, key),
                                    timeout_s=self.config.group_query_window_s)
        self.kernel.schedule_in(int(self.config.group_query_window_s * US),
                                self.popularity_update, nid, key)

    def _flood_pop_query(self, nid, pkt, rx_power=None, sender=None):
        state = self.kernel.nodes[nid].mcast
        dd = ("pq",) + pkt.pid
        if dd in state.seen:
            return
        state.seen.add(dd)
        pkt = pkt.hop_copy()
        pkt.path_record.append(nid)
        key = tuple(pkt.payload["group"])
        detail = self._pop_eval(nid, key)
        if detail is not None:
            inner = {"pop": detail, "join_key": list(key)}
            self.rr._reply_source_routed(nid, pkt, GROUP_QUERY_REPLY, inner,
                                         pkt.payload["origin"])
        if pkt.ttl_hops > 1:
            pkt.ttl_hops -= 1
            self.kernel.transmit(nid, pkt)

    def _pop_eval(self, nid, key):
        node = self.kernel.nodes[nid]
        ent = node.mcast.groups.get(key)
        out = {}
        if ent is not None and ("receiver" in ent.roles or "sender" in ent.roles):
            out["member"] = nid
        sds = node.sds
        if key in sds.local_groups or (key[0] in sds.prefixes
                                       and self.rr.live_senders(nid, key)):
            out["sds"] = nid
        return out or None

    def _pop_contact_reply(self, nid, key):
        def cb(detail, qpath):
            pop = self.kernel.nodes[nid].mcast.pop.get(key)
            if pop is None or not pop.get("pending"):
                return
            if detail.get("member") is not None:
                pop["replies"]["members"].add(detail["member"])
            if detail.get("sds") is not None:
                pop["replies"]["sds"].add(detail["sds"])
        return cb

    def _collect_pop_reply(self, nid, inner):
        key = tuple(inner["join_key"])
        pop = self.kernel.nodes[nid].mcast.pop.get(key)
        if pop is None or not pop.get("pending"):
            return
        det = inner["pop"]
        if det.get("member") is not None:
            pop["replies"]["members"].add(det["member"])
        if det.get("sds") is not None:
            pop["replies"]["sds"].add(det["sds"])

    def popularity_update(self, nid, key):
        """Close the group query window; promote when pop_est exceeds the threshold."""
        pop = self.kernel.nodes[nid].mcast.pop.get(key)
        if pop is None or not pop.get("pending"):
            return
        pop["pending"] = False
        grp_est = len(pop["replies"]["members"])
        sds_est = max(1, len(pop["replies"]["sds"]))
        pop_est = grp_est / sds_est
        if pop_est <= self.config.pop_th:
            return
        pop["promoted"] = True
        sds = self.kernel.nodes[nid].sds
        sds.local_groups.add(key)
        sds.known_local_sds.setdefault(key, {})[nid] = self.kernel.now_us
        self.kernel.trace(nid, "pop_promote",
                          {"g": list(key), "grp": grp_est, "sds": sds_est,
                           "pop": pop_est})
        self._advertise_local_sds(nid, key)
        self.rr.lar_send(nid, key[0], "group_sync",
                         {"group": list(key), "origin": nid,
                          "pos": self.kernel.nodes[nid].pos()})

    def _advertise_local_sds(self, nid, key):
        R = self.zone.config.radius_R
        payload = {"origin": nid, "group": list(key)}
        pkt = self.kernel.new_packet(SDS_ADVERT, nid, R, payload)
        self.kernel.nodes[nid].mcast.seen.add(("lsa",) + pkt.pid)
        self.kernel.transmit(nid, pkt)
        for cid in sorted(self.kernel.nodes[nid].contacts.entries):
            entry = self.kernel.nodes[nid].contacts.entries[cid]
            out = self.kernel.new_packet(SDS_ADVERT, nid, len(entry.route) + 1,
                                         dict(payload, route=tuple(entry.route)),
                                         dst=entry.route[0])
            self.kernel.transmit(nid, out)

    def _on_local_sds_advert(self, nid, pkt, rx_power, sender):
        state = self.kernel.nodes[nid].mcast
        route = pkt.payload.get("route")
        if route:
            pkt.path_record.append(nid)
            pos = route.index(nid)
            if pos + 1 < len(route):
                self.kernel.forward(nid, pkt.hop_copy(), route[pos + 1])
                return
        dd = ("lsa",) + pkt.pid
        if dd in state.seen:
            return
        state.seen.add(dd)
        key = tuple(pkt.payload["group"])
        self.kernel.nodes[nid].sds.known_local_sds.setdefault(key, {})[
            pkt.payload["origin"]] = self.kernel.now_us
        if not route and pkt.ttl_hops > 1:
            relay = pkt.hop_copy()
            relay.ttl_hops -= 1
            self.kernel.transmit(nid, relay)

    def _rr_group_sync(self, nid, pkt):
        """A popularity-promoted local SDS pulls the region's sender records."""
        inner = pkt.payload["inner"]
        key = tuple(inner["group"])
        senders = self.rr.live_senders(nid, key)
        detail = {"senders": {sid: {"pos": m["pos"], "route": m["route"],
                                    "stab": None}
                              for sid, m in senders.items()}}
        reply = {"detail": detail, "join_key": list(key),
                 "sync_for": inner["origin"]}
        self.rr._reply_source_routed(nid, pkt, GROUP_QUERY_REPLY, reply,
                                     inner["origin"])

    def _absorb_group_sync(self, nid, inner):
        key = tuple(inner["join_key"])
        for sid in sorted(inner["detail"].get("senders", {})):
            meta = inner["detail"]["senders"][sid]
            self.rr.record_sender(nid, key, int(sid), meta["pos"], meta["route"])

    # -- maintenance / debug -----------------------------------------------------------

    def _maintenance(self):
        horizon = self.kernel.now_us - int(self.config.member_expiry_s * US)
        for nid in sorted(self.kernel.nodes):
            node = self.kernel.nodes[nid]
            if not node.alive:
                continue
            for key in sorted(node.mcast.groups):
                ent = node.mcast.groups[key]
                stale = [p for p, l in ent.links.items()
                         if l.empty() or (not l.active() and l.last_us < horizon)]
                for p in stale:
                    del ent.links[p]
                self._gc_entry(nid, key)
        self.kernel.schedule_in(int(self.config.adv_period_s * US), self._maintenance)

    def sweep_invariants(self):
        """Debug-mode global mesh sweep: no black holes, exactly one active path."""
        problems = []
        for key in sorted(self.mesh_nodes):
            for nid in sorted(self.mesh_nodes[key]):
                node = self.kernel.nodes.get(nid)
                if node is None or not node.alive:
                    continue
                ent = node.mcast.groups.get(key)
                if ent is None:
                    continue
                for peer, link in ent.links.items():
                    if link.down_members and not link.active():
                        problems.append((nid, key, peer, "black_hole"))
                if "receiver" in ent.roles and ent.upstream_paths:
                    n_active = sum(1 for p in ent.upstream_paths if p["active"])
                    if n_active != 1:
                        problems.append((nid, key, None, f"active={n_active}"))
        return problems
