"""Per-host executor: prep, enqueue, transfers, and buffer lifecycles.

A host serializes its control work (prep and kernel enqueue run one task at
a time), mirrors its slice of every running program instance, launches DMA
transfers once it holds both the producer data and the consumer addresses,
and keeps the store's logical refcounts honest via drain reports.

Dispatch triggers per node come from the instance plan:
  "go"  - enqueue when the scheduler grants (parallel dispatch),
  "fut" - home host submits the gang after every predecessor announced its
          output futures (sequential dispatch of a regular node),
  "dat" - same, but gated on predecessor data completion (irregular node).
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import BatchingConfig, CostModel
from .coord import DataTuple, MessageBatcher, ProgressTracker, Punctuation, edge_id
from .hardware import Cluster, KernelExec
from .ir import ArgNode, ComputeNode, LoweredProgram, ResultNode, ShardPair
from .simcore import Process, Simulator
from .store import HostStore


class ExecError(Exception):
    pass


# -- static program tables ---------------------------------------------------

@dataclass
class EdgeInfo:
    eid: str
    src: str
    dst: str
    src_port: int
    dst_port: int
    src_shards: int
    to_result: bool
    pairs: tuple[ShardPair, ...]
    consumer_hosts: tuple[int, ...]              # hosts holding >=1 dst pair
    pairs_by_chost: dict[int, tuple[ShardPair, ...]]
    remote_by_chost: dict[int, tuple[ShardPair, ...]]
    src_hosts: tuple[int, ...]
    src_shards_by_host: dict[int, tuple[int, ...]]
    cross_host: bool
    ext_arg: bool                                 # source is a handle-bound arg
    from_arg: bool                                # source is any arg node


@dataclass
class NodeInfo:
    nid: str
    fn_name: str
    devices: tuple[int, ...]
    hosts: tuple[int, ...]
    home_host: int
    local_shards: dict[int, tuple[int, ...]]     # host -> shard indices
    shard_device: dict[int, int]
    duration_ns: int
    collective: bool
    regular: bool
    apply_count: int
    out_bytes: tuple[int, ...]
    in_edges: tuple[str, ...]
    out_edges: tuple[str, ...]
    expected_inputs: dict[int, int]              # shard -> remote arrivals
    input_sources: dict[int, tuple[int, ...]]
    recv_bytes: dict[int, int]                   # shard -> landing bytes
    hbm_by_device: dict[int, int]                # gang reservation ask
    kernel_count: dict[int, int]                 # host -> kernels to enqueue
    args_created: tuple[str, ...]


@dataclass
class ArgInfo:
    nid: str
    shards: int
    bytes_per_shard: int
    placement: tuple[int, ...]
    creator: str                                  # compute node that allocates
    home_host: int
    out_edges: tuple[str, ...]
    ext: bool


@dataclass
class ProgramInfo:
    pid: str
    lowered: LoweredProgram
    order: tuple[str, ...]                        # compute nodes, trace order
    nodes: dict[str, NodeInfo]
    args: dict[str, ArgInfo]
    edges: dict[str, EdgeInfo]
    results: tuple[tuple[str, str, int], ...]     # (result id, src node, port)
    result_shards: int
    all_hosts: tuple[int, ...]
    all_devices: tuple[int, ...]

    def out_handle(self, instance: str, nid: str, port: int) -> str:
        return f"o.{instance}.{nid}.{port}"

    def result_handles(self, instance: str) -> list[str]:
        return [self.out_handle(instance, src, port)
                for _rid, src, port in self.results]


def build_program_info(pid: str, lp: LoweredProgram, cluster: Cluster) -> ProgramInfo:
    p = lp.program
    host_of = {d.device_id: d.host_id for d in cluster.devices}
    nodes: dict[str, NodeInfo] = {}
    args: dict[str, ArgInfo] = {}
    edges: dict[str, EdgeInfo] = {}
    order = tuple(n.id for n in p.nodes.values() if isinstance(n, ComputeNode))

    for le in lp.edges:
        e = le.edge
        eid = edge_id(e.src, e.dst, e.dst_port)
        src_n = p.node(e.src)
        ext = isinstance(src_n, ArgNode) and src_n.handle is not None
        pairs = le.reshard.pairs
        by_chost: dict[int, list[ShardPair]] = {}
        remote: dict[int, list[ShardPair]] = {}
        for pr in pairs:
            ch = host_of[pr.dst_dev]
            by_chost.setdefault(ch, []).append(pr)
            if pr.src_dev != pr.dst_dev:
                remote.setdefault(ch, []).append(pr)
        sdevs = lp.placement[e.src]
        sbh: dict[int, list[int]] = {}
        for shard, dev in enumerate(sdevs):
            sbh.setdefault(host_of[dev], []).append(shard)
        cross = any(host_of[pr.src_dev] != host_of[pr.dst_dev] for pr in pairs)
        edges[eid] = EdgeInfo(
            eid=eid, src=e.src, dst=e.dst, src_port=e.src_port,
            dst_port=e.dst_port, src_shards=len(sdevs),
            to_result=isinstance(p.node(e.dst), ResultNode), pairs=pairs,
            consumer_hosts=tuple(sorted(by_chost)),
            pairs_by_chost={h: tuple(v) for h, v in sorted(by_chost.items())},
            remote_by_chost={h: tuple(v) for h, v in sorted(remote.items())},
            src_hosts=tuple(sorted(sbh)),
            src_shards_by_host={h: tuple(v) for h, v in sorted(sbh.items())},
            cross_host=cross, ext_arg=ext,
            from_arg=isinstance(src_n, ArgNode))

    for n in p.nodes.values():
        if not isinstance(n, ArgNode):
            continue
        consumers = sorted({e.dst for e in p.edges if e.src == n.id},
                           key=order.index)
        placement = lp.placement[n.id]
        args[n.id] = ArgInfo(
            nid=n.id, shards=n.shards, bytes_per_shard=n.bytes_per_shard,
            placement=placement, creator=consumers[0],
            home_host=host_of[placement[0]],
            out_edges=tuple(eid for eid, ei in edges.items() if ei.src == n.id),
            ext=n.handle is not None)

    for n in p.nodes.values():
        if not isinstance(n, ComputeNode):
            continue
        devs = lp.placement[n.id]
        local: dict[int, list[int]] = {}
        for shard, dev in enumerate(devs):
            local.setdefault(host_of[dev], []).append(shard)
        in_eids = tuple(eid for eid, ei in edges.items() if ei.dst == n.id)
        out_eids = tuple(eid for eid, ei in edges.items() if ei.src == n.id)
        expected: dict[int, int] = {}
        sources: dict[int, list[int]] = {}
        recv: dict[int, int] = {}
        for eid in in_eids:
            ei = edges[eid]
            if ei.ext_arg:
                continue   # data already resident, held by the client
            for pr in ei.pairs:
                if pr.src_dev != pr.dst_dev:
                    s = pr.dst_shard
                    expected[s] = expected.get(s, 0) + 1
                    sources.setdefault(s, []).append(pr.src_dev)
                    recv[s] = recv.get(s, 0) + pr.nbytes
        created = tuple(a.nid for a in args.values()
                        if a.creator == n.id and not a.ext)
        hbm: dict[int, int] = {}
        out_total = sum(n.fn.out_bytes)
        for shard, dev in enumerate(devs):
            hbm[dev] = hbm.get(dev, 0) + out_total + recv.get(shard, 0)
        for aid in created:
            a = args[aid]
            for shard in range(a.shards):
                dev = a.placement[shard]
                hbm[dev] = hbm.get(dev, 0) + a.bytes_per_shard
        nodes[n.id] = NodeInfo(
            nid=n.id, fn_name=n.fn.name, devices=devs,
            hosts=tuple(sorted(local)), home_host=host_of[devs[0]],
            local_shards={h: tuple(v) for h, v in sorted(local.items())},
            shard_device=dict(enumerate(devs)),
            duration_ns=n.fn.duration_ns, collective=n.fn.collective,
            regular=n.fn.regular, apply_count=n.fn.apply_count,
            out_bytes=n.fn.out_bytes, in_edges=in_eids, out_edges=out_eids,
            expected_inputs=expected,
            input_sources={s: tuple(v) for s, v in sorted(sources.items())},
            recv_bytes=recv, hbm_by_device=hbm,
            kernel_count={h: len(v) for h, v in sorted(local.items())},
            args_created=created)

    results = []
    nshards = 0
    for rid in p.results:
        e = next(ei for ei in edges.values() if ei.dst == rid)
        results.append((rid, e.src, e.src_port))
        nshards += len(lp.placement[e.src])
    all_hosts = tuple(sorted({h for ni in nodes.values() for h in ni.hosts}))
    return ProgramInfo(
        pid=pid, lowered=lp, order=order, nodes=nodes, args=args, edges=edges,
        results=tuple(results), result_shards=nshards, all_hosts=all_hosts,
        all_devices=lp.all_devices())


@dataclass
class InstanceMeta:
    instance: str
    client: str
    program: ProgramInfo
    modes: dict[str, str]                        # node -> go | fut | dat
    stages: list[list[str]]                      # client-submitted groups
    arg_bindings: dict[str, str] = field(default_factory=dict)  # arg -> handle
    reply_to_client: bool = True


# -- the host process --------------------------------------------------------

@dataclass
class _InstState:
    meta: InstanceMeta
    prep: dict[str, str] = field(default_factory=dict)    # node -> queued/done
    enq: dict[str, str] = field(default_factory=dict)
    ticket: dict[str, int] = field(default_factory=dict)
    ready_shards: dict[str, int] = field(default_factory=dict)
    kdone: dict[str, int] = field(default_factory=dict)   # node -> local done
    src_done: dict[str, set] = field(default_factory=dict)      # eid -> shards
    addr: dict[str, dict] = field(default_factory=dict)   # eid -> {(s,d): ...}
    launched: dict[str, set] = field(default_factory=dict)
    arr_pending: dict[str, dict] = field(default_factory=dict)  # nid -> {shard: n}
    drain_pending: dict[str, int] = field(default_factory=dict)
    drain_seen: dict[str, set] = field(default_factory=dict)    # home side
    failed: bool = False


class HostExecutor(Process):
    """One per host. pid is "host<N>"."""

    def __init__(self, sim: Simulator, cluster: Cluster, host_id: int,
                 costs: CostModel, batching: BatchingConfig,
                 control_latency_ns: int, audit: list, runtime):
        super().__init__(sim, f"host{host_id}")
        self.cluster = cluster
        self.host_id = host_id
        self.costs = costs
        self.control_latency_ns = control_latency_ns
        self.runtime = runtime
        self.store = HostStore(host_id, cluster, audit)
        self.batcher = MessageBatcher(sim, self.pid, batching, control_latency_ns)
        self.tracker = ProgressTracker(ready_cb=self._on_shard_ready)
        self.inst: dict[str, _InstState] = {}
        self._tasks: list[tuple] = []
        self._working = False
        self._consumers_by_handle: dict[str, list[tuple[str, str]]] = {}
        self.stats = {"ctrl_msgs": 0, "preps": 0, "enqueues": 0}

    # -- plumbing ----------------------------------------------------------

    def install(self, meta: InstanceMeta) -> None:
        """Out-of-band instance registration (program metadata is resident)."""
        st = _InstState(meta)
        self.inst[meta.instance] = st
        info = meta.program
        for nid, ni in info.nodes.items():
            mode = meta.modes[nid]
            if mode in ("fut", "dat") and self.host_id in ni.hosts:
                n_edges = 0
                for eid in ni.in_edges:
                    ei = info.edges[eid]
                    # arg-fed edges cannot gate dispatch: no predecessor gang
                    # hands their futures over
                    if ei.from_arg:
                        continue
                    self.tracker.expect(meta.instance, nid, f"{mode}:{eid}",
                                        ei.src_shards)
                    n_edges += 1
                if n_edges == 0:
                    raise ExecError(
                        f"{nid}: host-driven dispatch with nothing to wait on")
                st.ready_shards[nid] = 0
        for aid, handle in meta.arg_bindings.items():
            for eid in info.args[aid].out_edges:
                self._consumers_by_handle.setdefault(handle, []).append(
                    (meta.instance, info.edges[eid].dst))

    def _send(self, dst: str, kind: str, payload: dict, critical: bool) -> None:
        self.stats["ctrl_msgs"] += 1
        lat = None
        if dst == self.pid:
            lat = 0                              # local handoff, no wire
        elif dst.startswith("client"):
            lat = self.costs.client_rpc_ns
        self.batcher.send(dst, kind, payload, critical, latency_ns=lat)

    # -- serialized host work ----------------------------------------------

    def _push_task(self, task: tuple) -> None:
        self._tasks.append(task)
        if not self._working:
            self._start_next()

    def _start_next(self) -> None:
        if not self._tasks:
            self._working = False
            return
        self._working = True
        kind, instance, nid = self._tasks[0]
        if kind == "prep":
            cost = self.costs.host_prep_ns
        else:
            ni = self.inst[instance].meta.program.nodes[nid]
            cost = self.costs.pcie_enqueue_ns * ni.kernel_count[self.host_id]
        self.sim.schedule_in(cost, self.pid, "task_done",
                             {"start": self.sim.now()})

    def _finish_task(self, payload: dict) -> None:
        kind, instance, nid = self._tasks.pop(0)
        self.sim.trace_span(self.host_id, 100_000 + self.host_id,
                            f"{kind} {nid}", payload["start"], self.sim.now(),
                            kind, instance)
        if instance in self.inst:
            if kind == "prep":
                self._prep_effects(instance, nid)
            else:
                self._enqueue_effects(instance, nid)
        self._start_next()

    # -- dispatch triggers -------------------------------------------------

    def handle(self, kind: str, payload: dict, src: str | None) -> None:
        if kind == "go":
            self._on_go(payload)
        elif kind == "task_done":
            self._finish_task(payload)
        elif kind == "edge_fut":
            self._on_edge_update("fut", payload)
        elif kind == "edge_dat":
            self._on_edge_update("dat", payload)
        elif kind == "addr":
            self._on_addr(payload)
        elif kind == "kernel_done":
            self._on_kernel_done(payload)
        elif kind == "xfer_arrived":
            self._on_xfer_arrived(payload)
        elif kind == "drain":
            self._on_drain(payload)
        elif kind == "release":
            self.store.release(payload["handle"])
        elif kind == "instance_done":
            self._on_instance_done(payload)
        elif kind == "client_failed":
            self._on_client_failed(payload)
        elif kind == "buffer_lost":
            self._propagate_loss(payload["handle"])
        elif kind == "batch":
            for m in payload["messages"]:
                self.handle(m["kind"], m["payload"], src)
        elif kind == "batch_timeout":
            self.batcher.on_timeout(payload)
        else:
            raise ValueError(f"host{self.host_id}: unknown message {kind}")

    def _on_go(self, payload: dict) -> None:
        instance, nid = payload["instance"], payload["node"]
        st = self.inst.get(instance)
        if st is None or st.failed:
            # grant raced an abort: the scheduler reserved memory for a gang
            # that will never be prepped; give back the parts whose buffers
            # this host would have created
            if st is not None and st.meta.modes[nid] == "go":
                self._release_grant_reservation(instance, nid)
            return
        st.ticket[nid] = payload["ticket"]
        if st.prep.get(nid) is None:
            st.prep[nid] = "queued"
            self._push_task(("prep", instance, nid))
        st.enq[nid] = "queued"
        self._push_task(("enqueue", instance, nid))

    def _on_shard_ready(self, instance: str, nid: str, shard: int) -> None:
        st = self.inst[instance]
        ni = st.meta.program.nodes[nid]
        st.ready_shards[nid] = st.ready_shards.get(nid, 0) + 1
        if st.ready_shards[nid] < len(ni.local_shards[self.host_id]):
            return
        if st.prep.get(nid) is None and not st.failed:
            st.prep[nid] = "queued"
            self._push_task(("prep", instance, nid))

    # -- prep: allocate buffers, exchange addresses, maybe submit ----------

    def _prep_effects(self, instance: str, nid: str) -> None:
        st = self.inst[instance]
        if st.failed:
            return
        info = st.meta.program
        ni = info.nodes[nid]
        self.stats["preps"] += 1
        st.prep[nid] = "done"
        # scheduler-dispatched gangs had their memory reserved atomically at
        # grant time; host-paced nodes allocate as they prepare
        rsv = st.meta.modes[nid] != "go"

        if self.host_id == ni.home_host:
            for port, nbytes in enumerate(ni.out_bytes):
                rc, held = self._initial_refcount(info, nid, port)
                self.store.put(
                    [(ni.shard_device[s], nbytes)
                     for s in range(len(ni.devices))],
                    owner=(st.meta.client if held else instance),
                    refcount=rc, reserve=rsv,
                    handle=info.out_handle(instance, nid, port))
        local = ni.local_shards[self.host_id]
        if sum(ni.recv_bytes.get(s, 0) for s in local):
            self.store.put(
                [(ni.shard_device[s], ni.recv_bytes.get(s, 0)) for s in local],
                owner=instance, refcount=1, reserve=rsv,
                handle=f"r.{instance}.{nid}.h{self.host_id}")
        pend = st.arr_pending.setdefault(nid, {})
        for s in local:
            if ni.expected_inputs.get(s, 0):
                pend[s] = ni.expected_inputs[s]

        for aid in ni.args_created:
            a = info.args[aid]
            if self.host_id == a.home_host:
                self.store.put(
                    [(a.placement[s], a.bytes_per_shard)
                     for s in range(a.shards)],
                    owner=instance, refcount=max(len(a.out_edges), 1),
                    reserve=rsv, handle=f"a.{instance}.{aid}")
            mine = [s for s in range(a.shards)
                    if self.cluster.device(a.placement[s]).host_id == self.host_id]
            for eid in a.out_edges:
                self._mark_src_ready(instance, eid, mine, emit_fut=True)

        for eid in ni.in_edges:
            ei = info.edges[eid]
            if ei.ext_arg:
                continue
            self._register_consumer(info, instance, eid, nid)
            my_pairs = ei.pairs_by_chost.get(self.host_id, ())
            if my_pairs:
                st.drain_pending[eid] = st.drain_pending.get(eid, 0) + len(my_pairs)
            by_src_host: dict[int, list] = {}
            for pr in ei.remote_by_chost.get(self.host_id, ()):
                sh = self.cluster.device(pr.src_dev).host_id
                by_src_host.setdefault(sh, []).append(
                    [pr.src_shard, pr.dst_shard, pr.dst_dev, pr.nbytes])
            for sh in sorted(by_src_host):
                self._send(f"host{sh}", "addr",
                           {"instance": instance, "edge": eid,
                            "pairs": by_src_host[sh],
                            "from_host": self.host_id}, critical=True)

        if (st.meta.modes[nid] in ("fut", "dat")
                and self.host_id == ni.home_host and nid not in st.ticket):
            self.runtime.submit_gangs(instance, [nid], src_pid=self.pid,
                                      latency_ns=self.control_latency_ns)

    def _initial_refcount(self, info: ProgramInfo, nid: str,
                          port: int) -> tuple[int, bool]:
        """Consuming edges hold one ref each; a result adds a client hold."""
        rc = 0
        held = False
        for eid in info.nodes[nid].out_edges:
            ei = info.edges[eid]
            if ei.src_port != port:
                continue
            rc += 1
            if ei.to_result:
                held = True
        return max(rc, 1), held

    def _release_grant_reservation(self, instance: str, nid: str) -> None:
        """Undo the slices of a gang reservation this host's prep would have
        turned into store rows: outputs if we are the home host, our recv
        landings, and any args we would have created."""
        st = self.inst[instance]
        info = st.meta.program
        ni = info.nodes[nid]
        out_total = sum(ni.out_bytes)
        if self.host_id == ni.home_host and out_total:
            for s in range(len(ni.devices)):
                self.cluster.device(ni.shard_device[s]).hbm_release(out_total)
        for s in ni.local_shards.get(self.host_id, ()):
            nb = ni.recv_bytes.get(s, 0)
            if nb:
                self.cluster.device(ni.shard_device[s]).hbm_release(nb)
        for aid in ni.args_created:
            a = info.args[aid]
            if self.host_id == a.home_host:
                for s in range(a.shards):
                    self.cluster.device(a.placement[s]).hbm_release(
                        a.bytes_per_shard)

    def _register_consumer(self, info: ProgramInfo, instance: str, eid: str,
                           nid: str) -> None:
        ei = info.edges[eid]
        if ei.src in info.args:
            handle = f"a.{instance}.{ei.src}"
        else:
            handle = info.out_handle(instance, ei.src, ei.src_port)
        self._consumers_by_handle.setdefault(handle, []).append((instance, nid))

    # -- enqueue: kernels to devices, future handoff downstream -------------

    def _enqueue_effects(self, instance: str, nid: str) -> None:
        st = self.inst[instance]
        if st.failed:
            return
        info = st.meta.program
        ni = info.nodes[nid]
        self.stats["enqueues"] += 1
        st.enq[nid] = "done"
        key = f"{instance}/{nid}"
        collective = ni.collective and len(ni.devices) > 1
        if collective:
            self.cluster.set_collective_group(key, ni.devices)
        pcie = self.cluster.spec.pcie.latency_ns
        for s in ni.local_shards[self.host_id]:
            k = KernelExec(
                instance=instance, node=nid, shard=s,
                duration_ns=ni.duration_ns,
                expected_inputs=ni.expected_inputs.get(s, 0),
                collective_key=key if collective else None,
                group_size=len(ni.devices),
                input_sources=ni.input_sources.get(s, ()))
            self.sim.send(self.pid, f"dev{ni.shard_device[s]}",
                          "enqueue_kernel", {"kernel": k}, latency=pcie)
        local = list(ni.local_shards[self.host_id])
        for eid in ni.out_edges:
            self._emit_edge_update(instance, eid, local, "fut")
        if st.meta.modes[nid] == "dat" and self.host_id == ni.home_host:
            # irregular boundary passed: the next statically plannable stage
            # can be submitted now
            self.runtime.notify_stage_ready(instance, nid, self.pid)

    # -- edge updates (tuples plus punctuation in one message) --------------

    def _emit_edge_update(self, instance: str, eid: str, src_shards: list[int],
                          cls: str) -> None:
        st = self.inst[instance]
        info = st.meta.program
        ei = info.edges[eid]
        if ei.to_result:
            if cls == "dat":
                for s in src_shards:
                    self.runtime.result_tuple(instance, ei, s, self.pid)
            return
        dst_mode = st.meta.modes.get(ei.dst)
        for ch in ei.consumer_hosts:
            if not (dst_mode == cls or ei.cross_host):
                continue
            tuples = []
            puncts: dict[str, dict[str, int]] = {}
            for pr in ei.pairs_by_chost[ch]:
                if pr.src_shard in src_shards:
                    tuples.append([pr.src_shard, pr.dst_shard])
                    c = puncts.setdefault(str(pr.src_shard), {})
                    c[str(pr.dst_shard)] = c.get(str(pr.dst_shard), 0) + 1
            for s in src_shards:
                puncts.setdefault(str(s), {})
            self._send(f"host{ch}", f"edge_{cls}",
                       {"instance": instance, "edge": eid,
                        "tuples": tuples, "puncts": puncts}, critical=True)

    def _on_edge_update(self, cls: str, payload: dict) -> None:
        instance, eid = payload["instance"], payload["edge"]
        st = self.inst.get(instance)
        if st is None or st.failed:
            return
        info = st.meta.program
        ei = info.edges[eid]
        nid = ei.dst
        ni = info.nodes[nid]
        if (ei.from_arg or st.meta.modes.get(nid) != cls
                or self.host_id not in ni.hosts):
            return
        teid = f"{cls}:{eid}"
        local = list(ni.local_shards[self.host_id])
        for s, d in payload["tuples"]:
            if d in local:
                self.tracker.on_tuple(nid, DataTuple(teid, instance, s, d))
        for s_str, counts in payload["puncts"].items():
            self.tracker.on_punctuation(
                nid, Punctuation(teid, instance, int(s_str), counts), local)

    # -- producer-side data movement ---------------------------------------

    def _mark_src_ready(self, instance: str, eid: str, shards: list[int],
                        emit_fut: bool = False) -> None:
        st = self.inst[instance]
        st.src_done.setdefault(eid, set()).update(shards)
        self._launch_ready(instance, eid)
        if shards:
            if emit_fut:
                self._emit_edge_update(instance, eid, shards, "fut")
            self._emit_edge_update(instance, eid, shards, "dat")

    def _on_addr(self, payload: dict) -> None:
        instance, eid = payload["instance"], payload["edge"]
        st = self.inst.get(instance)
        if st is None:
            return
        amap = st.addr.setdefault(eid, {})
        for src_shard, dst_shard, dst_dev, nbytes in payload["pairs"]:
            amap[(src_shard, dst_shard)] = (dst_dev, nbytes)
        self._launch_ready(instance, eid)

    def _launch_ready(self, instance: str, eid: str) -> None:
        """Start every pair whose data exists and whose address is known."""
        st = self.inst[instance]
        info = st.meta.program
        ei = info.edges[eid]
        done = st.src_done.get(eid, set())
        launched = st.launched.setdefault(eid, set())
        for (src_shard, dst_shard), (dst_dev, nbytes) in sorted(
                st.addr.get(eid, {}).items()):
            if (src_shard, dst_shard) in launched or src_shard not in done:
                continue
            pr = next(p for p in ei.pairs if p.src_shard == src_shard
                      and p.dst_shard == dst_shard)
            if self.cluster.device(pr.src_dev).host_id != self.host_id:
                continue
            launched.add((src_shard, dst_shard))
            self.cluster.transfer(pr.src_dev, dst_dev, nbytes, instance,
                                  ei.dst, dst_shard,
                                  extra={"edge": eid, "src_shard": src_shard})

    # -- completions -------------------------------------------------------

    def _on_kernel_done(self, payload: dict) -> None:
        instance, nid, shard = payload["instance"], payload["node"], payload["shard"]
        st = self.inst.get(instance)
        if st is None or st.failed:
            return
        info = st.meta.program
        ni = info.nodes[nid]
        st.kdone[nid] = st.kdone.get(nid, 0) + 1
        for eid in ni.out_edges:
            self._mark_src_ready(instance, eid, [shard])
        for eid in ni.in_edges:
            ei = info.edges[eid]
            if ei.ext_arg:
                continue
            n_local = sum(1 for pr in ei.pairs_by_chost.get(self.host_id, ())
                          if pr.dst_shard == shard and pr.src_dev == pr.dst_dev)
            if n_local:
                self._drain(instance, eid, n_local)
        if st.kdone[nid] == len(ni.local_shards[self.host_id]):
            if sum(ni.recv_bytes.get(s, 0)
                   for s in ni.local_shards[self.host_id]):
                self.store.release(f"r.{instance}.{nid}.h{self.host_id}")

    def _drain(self, instance: str, eid: str, n: int) -> None:
        st = self.inst[instance]
        st.drain_pending[eid] = st.drain_pending.get(eid, 0) - n
        if st.drain_pending[eid] == 0:
            info = st.meta.program
            ei = info.edges[eid]
            home = (info.args[ei.src].home_host if ei.src in info.args
                    else info.nodes[ei.src].home_host)
            self._send(f"host{home}", "drain",
                       {"instance": instance, "edge": eid,
                        "from_host": self.host_id}, critical=False)

    def _on_drain(self, payload: dict) -> None:
        instance, eid = payload["instance"], payload["edge"]
        st = self.inst.get(instance)
        if st is None:
            return
        info = st.meta.program
        ei = info.edges[eid]
        seen = st.drain_seen.setdefault(eid, set())
        seen.add(payload["from_host"])
        if len(seen) == len(ei.consumer_hosts):
            if ei.src in info.args:
                handle = f"a.{instance}.{ei.src}"
            else:
                handle = info.out_handle(instance, ei.src, ei.src_port)
            self.store.release(handle)

    def _on_xfer_arrived(self, payload: dict) -> None:
        instance, nid = payload["instance"], payload["node"]
        shard, eid = payload["shard"], payload["edge"]
        st = self.inst.get(instance)
        if st is None:
            return
        pend = st.arr_pending.get(nid)
        if pend and shard in pend:
            pend[shard] -= 1
            if pend[shard] == 0:
                del pend[shard]
                recv = f"r.{instance}.{nid}.h{self.host_id}"
                if recv in self.store.buffers:
                    local = st.meta.program.nodes[nid].local_shards[self.host_id]
                    self.store.resolve_shard(recv, local.index(shard))
        self._drain(instance, eid, 1)

    # -- teardown ----------------------------------------------------------

    def _on_instance_done(self, payload: dict) -> None:
        instance = payload["instance"]
        st = self.inst.get(instance)
        if st is None:
            return
        for nid in st.meta.program.nodes:
            self.tracker.forget(instance, nid)
        self.store.gc_owner(instance)
        del self.inst[instance]

    def _on_client_failed(self, payload: dict) -> None:
        client = payload["client"]
        for instance in sorted(self.inst):
            if self.inst[instance].meta.client == client:
                self._fail_instance(instance, notify_client=False)
        for handle in self.store.gc_owner(client):
            self._propagate_loss(handle)

    def _propagate_loss(self, handle: str) -> None:
        for instance, nid in self._consumers_by_handle.get(handle, []):
            st = self.inst.get(instance)
            if st is None or st.failed:
                continue
            ni = st.meta.program.nodes[nid]
            mine = ni.local_shards.get(self.host_id, ())
            if mine and st.kdone.get(nid, 0) >= len(mine):
                continue   # consumption already finished; data was copied out
            self._fail_instance(instance, notify_client=True)

    def _fail_instance(self, instance: str, notify_client: bool) -> None:
        st = self.inst.get(instance)
        if st is None or st.failed:
            return
        st.failed = True
        info = st.meta.program
        pcie = self.cluster.spec.pcie.latency_ns
        for nid in info.nodes:
            # granted but never prepped here: the grant-time reservation is
            # not represented by any store row yet
            if (st.meta.modes[nid] == "go" and nid in st.ticket
                    and st.prep.get(nid) != "done"):
                self._release_grant_reservation(instance, nid)
        for nid, ni in info.nodes.items():
            mine = ni.local_shards.get(self.host_id, ())
            if not mine or st.enq.get(nid) != "done":
                continue
            if st.kdone.get(nid, 0) >= len(mine):
                continue
            for s in mine:
                self.sim.send(self.pid, f"dev{ni.shard_device[s]}",
                              "abort_kernel",
                              {"instance": instance, "node": nid, "shard": s},
                              latency=pcie)
        for handle in self.store.gc_owner(instance):
            self._propagate_loss(handle)
        if notify_client:
            self._send(f"client.{st.meta.client}", "instance_failed",
                       {"instance": instance}, critical=True)

    # -- introspection -----------------------------------------------------

    def obligations(self) -> list[str]:
        out = []
        if self._tasks:
            out.append(f"{len(self._tasks)} queued host tasks")
        for instance in sorted(self.inst):
            st = self.inst[instance]
            if st.failed:
                continue
            for nid, ni in st.meta.program.nodes.items():
                mine = ni.local_shards.get(self.host_id, ())
                if not mine:
                    continue
                done = st.kdone.get(nid, 0)
                if done < len(mine):
                    out.append(f"{instance}/{nid}: {done} of {len(mine)} "
                               "kernels done")
        return out
