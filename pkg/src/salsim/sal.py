"""Semantic aggregation layer: sessions, buffering, composition, delivery.

The transmit side keeps one freshest-wins buffer per registered id plus
a bounded FIFO for opaque compound packets. Selection packs buffered
units into one transport block per slot, most urgent first, where
urgency is the staleness cost of the receiver's last acknowledged
snapshot. The receive side decomposes blocks, routes entries to
subscribers and acknowledges every entry it saw.
"""

from collections import deque
from enum import Enum
from heapq import nsmallest
from typing import NamedTuple

from .mdu import (
    CapacityError,
    Mdu,
    PDU_ENTRY_OVERHEAD,
    PDU_HEADER_SIZE,
    SalPdu,
)
from .plant import aoi_cost


class AlreadyRegistered(Exception):
    """Raised when a label is registered twice within one session."""


class UnknownMdu(Exception):
    """Raised for ids or labels that were never registered."""


class Policy(Enum):
    AOI_COST = "AOI_COST"
    FIFO = "FIFO"
    ROUND_ROBIN = "ROUND_ROBIN"


class AckMessage(NamedTuple):
    mdu_id: int
    gen_time: int


class PullRequest(NamedTuple):
    mdu_id: int


class Buffered(NamedTuple):
    mdu_id: int
    gen_time: int
    payload: object
    payload_len: int
    admitted: bool


class SessionHandler:
    """Registers labels to dense ids and tracks subscriptions."""

    def __init__(self):
        self._ids = {}
        self._labels = []
        self._sources = []
        self._subs = []
        self._sub_tuples = []

    @property
    def n_ids(self):
        return len(self._labels)

    def register(self, label, source=None):
        if not label or len(label.encode("utf-8")) > 255:
            raise ValueError("label must encode to 1..255 bytes of UTF-8")
        if label in self._ids:
            raise AlreadyRegistered(f"label {label!r} already registered")
        mdu_id = len(self._labels)
        self._ids[label] = mdu_id
        self._labels.append(label)
        self._sources.append(source)
        self._subs.append({})
        self._sub_tuples.append(())
        return mdu_id

    def subscribe(self, mdu_id, subscriber):
        self._check_id(mdu_id)
        self._subs[mdu_id][subscriber] = None
        self._sub_tuples[mdu_id] = tuple(self._subs[mdu_id])

    def subscribers(self, mdu_id):
        self._check_id(mdu_id)
        return self._sub_tuples[mdu_id]

    def id_of(self, label):
        try:
            return self._ids[label]
        except KeyError:
            raise UnknownMdu(f"label {label!r} not registered") from None

    def label_of(self, mdu_id):
        self._check_id(mdu_id)
        return self._labels[mdu_id]

    def source_of(self, mdu_id):
        self._check_id(mdu_id)
        return self._sources[mdu_id]

    def _check_id(self, mdu_id):
        if not 0 <= mdu_id < len(self._labels):
            raise UnknownMdu(f"id {mdu_id} not registered")


class DataHandler:
    """Transmit-side ingest, prioritization and block-filling selection.

    Atomic units land in per-id buffers where the freshest generation
    time wins (every displaced unit counts as a discard). Compound
    packets queue in arrival order in a bounded FIFO that drops its
    oldest entry on overflow. The per-id staleness estimate follows the
    acknowledged generation times: estimate(now) = now - last acked gen,
    which grows by one per slot and resets on each acknowledgement.
    """

    def __init__(
        self,
        session,
        policy=Policy.AOI_COST,
        gains=None,
        tis_enabled=False,
        compound_maxlen=8,
        stale_drop_slots=None,
    ):
        n = session.n_ids
        self.session = session
        self.policy = policy
        self.tis_enabled = tis_enabled
        self.stale_drop_slots = stale_drop_slots
        self._gen = [-1] * n
        self._payload = [None] * n
        self._plen = [0] * n
        self._admitted = [False] * n
        self._seq = [0] * n
        self._anchor = [-1] * n
        self._pulled = set()
        self._queue = deque()
        self._compound_maxlen = compound_maxlen
        self._counter = 0
        self._rr_next = 0
        self.replaced_discards = 0
        self.overflow_drops = 0
        self.stale_drops = 0
        if gains is not None:
            if len(gains) != n:
                raise ValueError("need one (a, sigma_w2) pair per registered id")
            self._a2 = [a * a for a, _ in gains]
            self._s2 = [s2 for _, s2 in gains]
            # staleness cost tables, grown on demand via
            # g(d+1) = a^2 g(d) + sigma_w2
            self._g_tables = [[0.0] for _ in range(n)]
        else:
            self._a2 = None

    # ---------------------------------------------------------- ingest

    def ingest(self, mdu_id, gen_time, payload, payload_len=None, admitted=True):
        if payload_len is None:
            payload_len = len(payload)
        self._counter += 1
        if self._gen[mdu_id] >= 0:
            self.replaced_discards += 1
            if gen_time < self._gen[mdu_id]:
                return
        self._gen[mdu_id] = gen_time
        self._payload[mdu_id] = payload
        self._plen[mdu_id] = payload_len
        self._admitted[mdu_id] = admitted
        self._seq[mdu_id] = self._counter

    def ingest_fresh_all(self, gen_time, values, payload_len):
        """Batch form of ingest: one admitted unit per id, shared gen_time.

        Equivalent to ingest(i, gen_time, values[i], payload_len) for
        every id in order; a single call per slot keeps wide unfiltered
        simulations off the per-call overhead.
        """
        gen = self._gen
        payload = self._payload
        plen = self._plen
        admitted = self._admitted
        seq = self._seq
        counter = self._counter
        replaced = 0
        for i, value in enumerate(values):
            counter += 1
            if gen[i] >= 0:
                replaced += 1
                if gen_time < gen[i]:
                    continue
            gen[i] = gen_time
            payload[i] = value
            plen[i] = payload_len
            admitted[i] = True
            seq[i] = counter
        self._counter = counter
        self.replaced_discards += replaced

    def ingest_flagged(self, gen_time, values, payload_len, admit_flags, keep_suppressed):
        """Batch ingest for filtered publishers.

        Ids whose flag is set arrive admitted; the rest arrive as
        suppressed hand-downs when keep_suppressed is true and are
        skipped entirely otherwise. Equivalent to the per-id ingest
        calls a filtered publisher would make.
        """
        gen = self._gen
        payload = self._payload
        plen = self._plen
        admitted = self._admitted
        seq = self._seq
        counter = self._counter
        replaced = 0
        for i, value in enumerate(values):
            flag = admit_flags[i]
            if not flag and not keep_suppressed:
                continue
            counter += 1
            if gen[i] >= 0:
                replaced += 1
                if gen_time < gen[i]:
                    continue
            gen[i] = gen_time
            payload[i] = value
            plen[i] = payload_len
            admitted[i] = flag
            seq[i] = counter
        self._counter = counter
        self.replaced_discards += replaced

    def ingest_compound(self, packet):
        if len(self._queue) >= self._compound_maxlen:
            self._queue.popleft()
            self.overflow_drops += 1
        self._queue.append(packet)

    def next_compound(self):
        return self._queue.popleft() if self._queue else None

    def occupant(self, mdu_id):
        if self._gen[mdu_id] < 0:
            return None
        return Buffered(
            mdu_id,
            self._gen[mdu_id],
            self._payload[mdu_id],
            self._plen[mdu_id],
            self._admitted[mdu_id],
        )

    # ------------------------------------------------------- estimates

    def estimate(self, mdu_id, now):
        return now - self._anchor[mdu_id]

    def handle_ack(self, ack):
        # estimates only move forward: a stale ack never regresses one
        if ack.gen_time > self._anchor[ack.mdu_id]:
            self._anchor[ack.mdu_id] = ack.gen_time

    def handle_pull(self, pull):
        # the pull outranks everything at the next selection that finds
        # the id buffered; it is consumed by selecting the id
        self._pulled.add(pull.mdu_id)

    def priority(self, mdu_id, now):
        if self.policy is not Policy.AOI_COST:
            raise ValueError("priority is defined for the AOI_COST policy only")
        if self._gen[mdu_id] < 0:
            return float("-inf")
        return self._staleness_cost(mdu_id, now - self._anchor[mdu_id])

    def _staleness_cost(self, mdu_id, delta):
        table = self._g_tables[mdu_id]
        if delta < len(table):
            return table[delta]
        a2 = self._a2[mdu_id]
        s2 = self._s2[mdu_id]
        g = table[-1]
        for _ in range(len(table), delta + 1):
            g = a2 * g + s2
            table.append(g)
        return g

    # ------------------------------------------------------- selection

    def _apply_stale_drop(self, now):
        limit = self.stale_drop_slots
        for i in range(len(self._gen)):
            if self._gen[i] >= 0 and now - self._gen[i] > limit:
                self._gen[i] = -1
                self._payload[i] = None
                self.stale_drops += 1

    def _candidates(self, now):
        """Rank occupied buffers; id sits last in each tuple."""
        gen = self._gen
        admitted = self._admitted
        tis = self.tis_enabled
        pulled = self._pulled
        candidates = []
        if self.policy is Policy.AOI_COST:
            anchor = self._anchor
            cost = self._staleness_cost
            for i in range(len(gen)):
                if gen[i] < 0 or not (admitted[i] or tis):
                    continue
                tier = 2 if i in pulled else (1 if admitted[i] else 0)
                candidates.append((-tier, -cost(i, now - anchor[i]), i))
        elif self.policy is Policy.FIFO:
            seq = self._seq
            for i in range(len(gen)):
                if gen[i] < 0 or not (admitted[i] or tis):
                    continue
                tier = 2 if i in pulled else (1 if admitted[i] else 0)
                candidates.append((-tier, seq[i], i))
        else:
            n = len(gen)
            start = self._rr_next
            for i in range(n):
                if gen[i] < 0 or not (admitted[i] or tis):
                    continue
                tier = 2 if i in pulled else (1 if admitted[i] else 0)
                candidates.append((-tier, (i - start) % n, i))
        candidates.sort()
        return candidates

    def _take(self, mdu_id):
        entry = Buffered(
            mdu_id,
            self._gen[mdu_id],
            self._payload[mdu_id],
            self._plen[mdu_id],
            self._admitted[mdu_id],
        )
        self._gen[mdu_id] = -1
        self._payload[mdu_id] = None
        self._pulled.discard(mdu_id)
        return entry

    def select(self, capacity, now):
        """Fill one transport block, most urgent first.

        Candidates are the occupied buffers, pulled ids topmost, then
        application-admitted entries, then (with transmit-if-space)
        suppressed ones; within a tier the configured policy orders by
        falling staleness cost, arrival order, or round robin, with the
        lower id breaking ties. Entries that no longer fit the remaining
        space are skipped. Selected entries leave their buffers.
        """
        if self.stale_drop_slots is not None:
            self._apply_stale_drop(now)
        size = PDU_HEADER_SIZE
        picked = []
        plen = self._plen
        for cand in self._candidates(now):
            i = cand[-1]
            entry = PDU_ENTRY_OVERHEAD + plen[i]
            if size + entry > capacity:
                continue
            size += entry
            picked.append(self._take(i))
        if picked and self.policy is Policy.ROUND_ROBIN:
            self._rr_next = (picked[-1].mdu_id + 1) % len(self._gen)
        return picked

    def select_uniform(self, capacity, now, entry_len):
        """select() specialized to a single shared payload length.

        With equal-size entries the skip-fill scan degenerates to
        taking the top k of the ranking, so the block fill reduces to a
        partial sort. Returns exactly what select() would.
        """
        if self.stale_drop_slots is not None:
            self._apply_stale_drop(now)
        k = (capacity - PDU_HEADER_SIZE) // (PDU_ENTRY_OVERHEAD + entry_len)
        if k <= 0:
            return []
        gen = self._gen
        admitted = self._admitted
        if self.policy is Policy.AOI_COST and not self._pulled:
            # running top-k scan, one ordered shortlist per tier; a
            # candidate that cannot beat the worst shortlisted cost is
            # rejected in one compare, and cost ties keep the earlier
            # (lower) id by rejecting non-strict improvements
            anchor = self._anchor
            tables = self._g_tables
            a2s = self._a2
            s2s = self._s2
            tis = self.tis_enabled
            adm_cost = []
            adm_id = []
            sup_cost = []
            sup_id = []
            adm_total = 0
            for i in range(len(gen)):
                if gen[i] < 0:
                    continue
                adm = admitted[i]
                if adm:
                    adm_total += 1
                elif not tis:
                    continue
                delta = now - anchor[i]
                table = tables[i]
                if delta < len(table):
                    cost = table[delta]
                else:
                    cost = table[-1]
                    a2 = a2s[i]
                    s2 = s2s[i]
                    for _ in range(len(table), delta + 1):
                        cost = a2 * cost + s2
                        table.append(cost)
                costs = adm_cost if adm else sup_cost
                ids = adm_id if adm else sup_id
                if len(costs) == k:
                    if cost <= costs[-1]:
                        continue
                    costs.pop()
                    ids.pop()
                pos = 0
                while pos < len(costs) and costs[pos] >= cost:
                    pos += 1
                costs.insert(pos, cost)
                ids.insert(pos, i)
            order = adm_id
            if adm_total < k and sup_id:
                order = adm_id + sup_id[: k - adm_total]
            return [self._take(i) for i in order]
        candidates = self._candidates(now)
        if len(candidates) > k:
            candidates = nsmallest(k, candidates)
        else:
            candidates.sort()
        picked = [self._take(cand[-1]) for cand in candidates]
        if picked and self.policy is Policy.ROUND_ROBIN:
            self._rr_next = (picked[-1].mdu_id + 1) % len(gen)
        return picked


def compose_pdu(entries, capacity):
    """Frame selected entries into a PDU padded out to the block size."""
    size = PDU_HEADER_SIZE + sum(
        PDU_ENTRY_OVERHEAD + len(m.payload) for m in entries
    )
    if size > capacity:
        raise CapacityError(f"{size} byte PDU exceeds the {capacity} byte block")
    return SalPdu(list(entries), capacity - size)


class DataReader:
    """Receive-side decomposition, routing and acknowledgement."""

    def __init__(self, session):
        self.session = session
        self.unsubscribed_drops = 0

    def process(self, pdu, now):
        """Route entries to subscribers; acknowledge every entry.

        Entries without subscribers are dropped (and counted) but still
        acknowledged, since the transmitter's staleness estimate tracks
        what crossed the link, not what anyone consumed.
        """
        deliveries = []
        acks = []
        subscribers = self.session.subscribers
        for m in pdu.entries:
            acks.append(AckMessage(m.id, m.gen_time))
            subs = subscribers(m.id)
            if subs:
                deliveries.append((m, subs))
            else:
                self.unsubscribed_drops += 1
        return deliveries, acks

    def pull(self, mdu_id):
        self.session._check_id(mdu_id)
        return PullRequest(mdu_id)
