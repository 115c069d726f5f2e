"""Slotted closed-loop simulator.

Wires N scalar plants through publishers, the aggregation layer and the
erasure link, and closes each loop with a certainty-equivalent LQR on
top of a delivery-driven state estimate. One pass over the horizon per
run; everything downstream of the seed is deterministic.

Slot order, per slot t: plants step with the previous controls and
fresh noise; publishers sample and hand data down; one transport block
is (maybe) sent and (maybe) delivered; controllers update estimates and
apply new inputs; metrics accumulate once the warmup window has passed.
Freshness ages and stage costs are therefore measured on the post-update
state of slot t.

The slot loop is written for throughput: the controller update of slot
t and the plant step of slot t+1 share one pass over the loops, ingest
and selection go through the aggregation layer's batch entry points,
freshness age totals are integrated from delivery events instead of
per-slot counters, and stage costs come from a vectorized end pass over
the recorded state and input trajectories. Deadband semantics follow
DeadbandFilter (first sample always admits, strict threshold, reference
moves only on admission); the filter is inlined here and pinned to the
reference implementation by the filtered-vs-unfiltered equivalence
tests.
"""

import dataclasses
from array import array
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from statistics import fmean
from typing import NamedTuple, Optional

import numpy as np

from .channel import FRAGMENT_HEADER_SIZE, LinkConfig
from .mdu import PDU_ENTRY_OVERHEAD, PDU_HEADER_SIZE, Mdu
from .plant import PlantParams, solve_riccati
from .publisher import (
    STRATEGY_ORDER,
    Strategy,
    StrategyConfig,
    decode_value,
    encode_value,
    parse_strategy,
    strategy_label,
)
from .sal import DataHandler, DataReader, Policy, SessionHandler, compose_pdu

ATOMIC_MIN_CAPACITY_SLACK = 10  # PDU header plus one entry header


class ConfigError(Exception):
    """Raised for unusable simulation parameters."""


@dataclass
class SimConfig:
    n_loops: int = 5
    horizon: int = 100_000
    strategy: str = "UA"
    loss_prob: float = 0.10
    tb_capacity: int = 64
    deadband: float = 0.5
    seed: int = 1
    repetitions: int = 20
    a_min: float = 1.0
    a_max: float = 1.2
    sigma_w2: float = 1.0
    q: float = 1.0
    r: float = 1.0
    tis: bool = False
    policy: str = "AOI_COST"
    warmup: int = 1_000
    payload_size: int = 20
    slot_duration_ms: float = 10.0
    per_packet_loss: bool = False
    compound_maxlen: int = 8
    plants: Optional[list] = None

    def resolved_strategy(self):
        try:
            strat = parse_strategy(self.strategy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.tis:
            strat = StrategyConfig(strat.kind, True)
        try:
            strat.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return strat

    def link(self):
        return LinkConfig(
            slot_duration_ms=self.slot_duration_ms,
            tb_capacity=self.tb_capacity,
            loss_prob=self.loss_prob,
            per_packet_loss=self.per_packet_loss,
        )

    def make_plants(self):
        if self.plants is not None:
            made = list(self.plants)
        else:
            grid = np.linspace(self.a_min, self.a_max, self.n_loops)
            made = [
                PlantParams(a=float(ai), b=1.0, sigma_w2=self.sigma_w2, q=self.q, r=self.r)
                for ai in grid
            ]
        for plant in made:
            plant.validate()
        return made

    def validate(self):
        if not isinstance(self.n_loops, int) or self.n_loops < 1:
            raise ConfigError(f"n_loops must be a positive integer, got {self.n_loops}")
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ConfigError(f"horizon must be a positive integer, got {self.horizon}")
        if not isinstance(self.warmup, int) or not 0 <= self.warmup < self.horizon:
            raise ConfigError(
                f"warmup must lie in [0, horizon), got {self.warmup} for horizon {self.horizon}"
            )
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be positive, got {self.repetitions}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.deadband < 0.0:
            raise ConfigError(f"deadband must be non-negative, got {self.deadband}")
        if self.payload_size < 8:
            raise ConfigError(f"payload_size must hold a float64, got {self.payload_size}")
        if self.compound_maxlen < 1:
            raise ConfigError(f"compound_maxlen must be positive, got {self.compound_maxlen}")
        strat = self.resolved_strategy()
        if not strat.compound:
            atomic_min = ATOMIC_MIN_CAPACITY_SLACK + self.payload_size
            if self.tb_capacity < atomic_min:
                raise ConfigError(
                    f"tb_capacity {self.tb_capacity} cannot carry one "
                    f"{self.payload_size} byte value (needs {atomic_min})"
                )
        else:
            if self.n_loops > 255:
                raise ConfigError(
                    f"compound packets count entries in one byte, "
                    f"n_loops={self.n_loops} cannot fit"
                )
            packed = 1 + self.n_loops * (PDU_ENTRY_OVERHEAD + self.payload_size)
            chunk = self.tb_capacity - FRAGMENT_HEADER_SIZE
            if chunk > 0 and -(-packed // chunk) > 255:
                raise ConfigError(
                    f"a full compound packet of {packed} bytes needs more "
                    f"than 255 fragments at tb_capacity {self.tb_capacity}"
                )
        if self.policy not in Policy.__members__:
            raise ConfigError(f"unknown selection policy {self.policy!r}")
        try:
            self.link().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.plants is not None and len(self.plants) != self.n_loops:
            raise ConfigError(
                f"{len(self.plants)} plants supplied for n_loops={self.n_loops}"
            )
        if self.plants is None and self.a_min > self.a_max:
            raise ConfigError(f"a_min {self.a_min} exceeds a_max {self.a_max}")
        try:
            self.make_plants()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


@dataclass
class RunResult:
    n_loops: int
    strategy: str
    seed: int
    mean_aoi: float
    mean_lqg: float
    per_loop_aoi: tuple
    per_loop_lqg: tuple
    padding_fraction: float
    trigger_rate: float
    discards: int
    published: int
    delivered: int
    aoi_trace: Optional[list] = None
    delivery_log: Optional[list] = None


class SummaryRow(NamedTuple):
    n_loops: int
    strategy: str
    aoi_mean: float
    aoi_min: float
    aoi_max: float
    lqg_mean: float
    lqg_min: float
    lqg_max: float
    padding_mean: float
    trigger_mean: float


def run(config, erasure_pattern=None, record_traces=False):
    """Simulate one seeded run and return its aggregate metrics.

    erasure_pattern, when given, scripts the link (True = block erased)
    instead of the Bernoulli draws; it must cover the whole horizon.
    record_traces additionally returns the per-slot age of every loop
    and a (slot, loop, sample_time) log of controller deliveries.
    """
    config.validate()
    strat = config.resolved_strategy()
    plants = config.make_plants()
    n = config.n_loops
    horizon = config.horizon
    warmup = config.warmup
    capacity = config.tb_capacity
    value_size = config.payload_size
    per_packet = config.per_packet_loss
    if erasure_pattern is not None and len(erasure_pattern) < horizon:
        raise ConfigError(
            f"erasure pattern covers {len(erasure_pattern)} of {horizon} slots"
        )

    a = [pl.a for pl in plants]
    b = [pl.b for pl in plants]
    qs = [pl.q for pl in plants]
    rs = [pl.r for pl in plants]
    neg_gain = [-solve_riccati(pl.a, pl.b, pl.q, pl.r)[1] for pl in plants]

    # one normal per loop per slot (one spare row feeds the loop-fused
    # plant step past the horizon), then one uniform per slot, all from
    # a single seeded stream so compared strategies share realizations
    rng = np.random.default_rng(config.seed)
    noise = rng.standard_normal((horizon + 1, n))
    noise *= np.sqrt([pl.sigma_w2 for pl in plants])
    noise = noise.tolist()
    if erasure_pattern is not None:
        arrives = [not erased for erased in erasure_pattern[:horizon]]
    else:
        arrives = (rng.random(horizon) >= config.loss_prob).tolist()

    session = SessionHandler()
    for i in range(n):
        session.subscribe(session.register(f"loop/{i}"), i)
    handler = DataHandler(
        session,
        policy=Policy[config.policy],
        gains=[(pl.a, pl.sigma_w2) for pl in plants],
        tis_enabled=strat.tis,
        compound_maxlen=config.compound_maxlen,
    )
    reader = DataReader(session)

    compound_mode = strat.compound
    filtering = strat.filtered
    tis_on = strat.tis
    threshold = config.deadband

    x = [0.0] * n
    x_hat = [0.0] * n
    u = [0.0] * n
    xs = [array("d") for _ in range(n)]
    us = [array("d") for _ in range(n)]
    xs_app = [s.append for s in xs]
    us_app = [s.append for s in us]
    par = list(zip(a, b, neg_gain, us_app, xs_app))
    got_gen = [-1] * n
    got_val = [0.0] * n
    # freshness age integration: per loop, the open segment since the
    # last delivery (slot of that delivery and the age it reset to);
    # ages in between rise by one per slot, so each closed segment adds
    # an arithmetic ramp, clipped to the measured window
    seg_slot = [-1] * n
    seg_age = [0] * n
    area = [0] * n
    # deadband reference per loop; +inf admits the first sample
    last_ref = [float("inf")] * n
    trig = [False] * n
    pend = 0

    # Mirrored data path for the default staleness-cost policy: buffer
    # occupancy, the forward-only delivery anchors and the per-loop cost
    # tables are tracked inline instead of over the aggregation-layer
    # and wire-codec objects, whose behavior the mirror reproduces bit
    # for bit (see the pinned run regressions). Other policies take the
    # general object path below.
    fast_sal = Policy[config.policy] is Policy.AOI_COST
    entry_size = PDU_ENTRY_OVERHEAD + value_size
    k_fit = (capacity - PDU_HEADER_SIZE) // entry_size
    anchor = [-1] * n
    a2 = [ai * ai for ai in a]
    s2 = [pl.sigma_w2 for pl in plants]
    g_tab = [[0.0] for _ in range(n)]
    buf_gen = [-1] * n
    buf_val = [0.0] * n
    occupied = 0
    replaced_local = 0

    # compound pipeline state: the packet currently on the wire, its
    # remaining fragment budget and whether every fragment so far arrived
    frag_chunk = capacity - FRAGMENT_HEADER_SIZE
    frag_left = 0
    last_len = 0
    cur_gen = 0
    cur_vals = ()
    cur_ok = False
    packet_fate = False

    blocks = 0
    pad_total = 0
    triggered_total = 0
    published_total = 0
    delivered_total = 0
    counters_base = (0, 0, 0, 0, 0, 0)
    delivery_log = [] if record_traces else None

    ingest_fresh_all = handler.ingest_fresh_all
    ingest_flagged = handler.ingest_flagged
    select_uniform = handler.select_uniform
    handle_ack = handler.handle_ack
    process = reader.process

    # slot 0 plant step (zero state and inputs: x_0 is pure noise)
    row = noise[0]
    for i in range(n):
        xi = row[i]
        x[i] = xi
        xs_app[i](xi)
        if filtering and abs(xi - last_ref[i]) > threshold:
            trig[i] = True
            last_ref[i] = xi
            pend += 1

    for t in range(horizon):
        if t == warmup:
            counters_base = (
                blocks,
                pad_total,
                triggered_total,
                published_total,
                delivered_total,
                replaced_local
                + handler.replaced_discards
                + handler.overflow_drops
                + handler.stale_drops
                + reader.unsubscribed_drops,
            )

        # ------------------------------------------ publish and transmit
        if compound_mode:
            if filtering:
                triggered_total += pend
                if pend:
                    entries = [(i, x[i]) for i in range(n) if trig[i]]
                    handler.ingest_compound((t, entries))
                    published_total += len(entries)
            else:
                triggered_total += n
                published_total += n
                handler.ingest_compound((t, tuple(x)))
            fresh_packet = False
            if not frag_left:
                packet = handler.next_compound()
                if packet is not None:
                    cur_gen, cur_vals = packet
                    count = len(cur_vals)
                    packed_len = 1 + count * entry_size
                    frag_left = -(-packed_len // frag_chunk)
                    last_len = (
                        FRAGMENT_HEADER_SIZE
                        + packed_len
                        - (frag_left - 1) * frag_chunk
                    )
                    cur_ok = True
                    fresh_packet = True
            if frag_left:
                blocks += 1
                frag_left -= 1
                if not frag_left:
                    pad_total += capacity - last_len
                ok = arrives[t]
                if per_packet:
                    if fresh_packet:
                        packet_fate = ok
                    ok = packet_fate
                if not ok:
                    cur_ok = False
                elif not frag_left and cur_ok:
                    if filtering:
                        delivered_total += len(cur_vals)
                        for i, v in cur_vals:
                            got_gen[i] = cur_gen
                            got_val[i] = v
                            if delivery_log is not None:
                                delivery_log.append((t, i, cur_gen))
                    else:
                        delivered_total += n
                        for i in range(n):
                            got_gen[i] = cur_gen
                            got_val[i] = cur_vals[i]
                            if delivery_log is not None:
                                delivery_log.append((t, i, cur_gen))
        elif fast_sal:
            # --------------- mirrored ingest / rank / deliver, one pass
            if filtering:
                triggered_total += pend
                published_total += n if tis_on else pend
            else:
                triggered_total += n
                published_total += n
            if filtering and not tis_on:
                for i in range(n):
                    if trig[i]:
                        if buf_gen[i] >= 0:
                            replaced_local += 1
                        buf_gen[i] = t
                        buf_val[i] = x[i]
            else:
                # every buffer is rewritten each slot, so the overwrite
                # count is just the occupancy left by the last selection
                replaced_local += occupied
                occupied = n
            # rank by staleness cost, scanning ids downward so the
            # lower id wins cost ties by displacing its equal; the
            # scan variants only differ in candidate admission
            top_cost = []
            top_id = []
            if not filtering:
                for i in range(n - 1, -1, -1):
                    delta = t - anchor[i]
                    tab = g_tab[i]
                    if delta < len(tab):
                        cost = tab[delta]
                    else:
                        cost = tab[-1]
                        ai2 = a2[i]
                        si2 = s2[i]
                        for _ in range(len(tab), delta + 1):
                            cost = ai2 * cost + si2
                            tab.append(cost)
                    held = len(top_cost)
                    if held == k_fit:
                        if cost < top_cost[-1]:
                            continue
                        top_cost.pop()
                        top_id.pop()
                        held -= 1
                    pos = 0
                    while pos < held and top_cost[pos] > cost:
                        pos += 1
                    top_cost.insert(pos, cost)
                    top_id.insert(pos, i)
            elif not tis_on:
                for i in range(n - 1, -1, -1):
                    if buf_gen[i] < 0:
                        continue
                    delta = t - anchor[i]
                    tab = g_tab[i]
                    if delta < len(tab):
                        cost = tab[delta]
                    else:
                        cost = tab[-1]
                        ai2 = a2[i]
                        si2 = s2[i]
                        for _ in range(len(tab), delta + 1):
                            cost = ai2 * cost + si2
                            tab.append(cost)
                    held = len(top_cost)
                    if held == k_fit:
                        if cost < top_cost[-1]:
                            continue
                        top_cost.pop()
                        top_id.pop()
                        held -= 1
                    pos = 0
                    while pos < held and top_cost[pos] > cost:
                        pos += 1
                    top_cost.insert(pos, cost)
                    top_id.insert(pos, i)
            else:
                sup_cost = []
                sup_id = []
                adm_total = 0
                for i in range(n - 1, -1, -1):
                    if trig[i]:
                        adm_total += 1
                        costs = top_cost
                        ids = top_id
                    else:
                        costs = sup_cost
                        ids = sup_id
                    delta = t - anchor[i]
                    tab = g_tab[i]
                    if delta < len(tab):
                        cost = tab[delta]
                    else:
                        cost = tab[-1]
                        ai2 = a2[i]
                        si2 = s2[i]
                        for _ in range(len(tab), delta + 1):
                            cost = ai2 * cost + si2
                            tab.append(cost)
                    held = len(costs)
                    if held == k_fit:
                        if cost < costs[-1]:
                            continue
                        costs.pop()
                        ids.pop()
                        held -= 1
                    pos = 0
                    while pos < held and costs[pos] > cost:
                        pos += 1
                    costs.insert(pos, cost)
                    ids.insert(pos, i)
                if adm_total < k_fit and sup_id:
                    top_id = top_id + sup_id[: k_fit - adm_total]
            if top_id:
                blocks += 1
                pad_total += capacity - PDU_HEADER_SIZE - len(top_id) * entry_size
                ok = arrives[t]
                if filtering and not tis_on:
                    delivered_total += len(top_id) if ok else 0
                    for i in top_id:
                        g = buf_gen[i]
                        buf_gen[i] = -1
                        if ok:
                            got_gen[i] = g
                            got_val[i] = buf_val[i]
                            anchor[i] = g
                            if delivery_log is not None:
                                delivery_log.append((t, i, g))
                else:
                    occupied -= len(top_id)
                    if ok:
                        delivered_total += len(top_id)
                        for i in top_id:
                            got_gen[i] = t
                            got_val[i] = x[i]
                            anchor[i] = t
                            if delivery_log is not None:
                                delivery_log.append((t, i, t))
        else:
            if filtering:
                triggered_total += pend
                published_total += n if tis_on else pend
                ingest_flagged(t, x, value_size, trig, tis_on)
            else:
                triggered_total += n
                published_total += n
                ingest_fresh_all(t, x, value_size)
            picked = select_uniform(capacity, t, value_size)
            if picked:
                blocks += 1
                pdu = compose_pdu(
                    [
                        Mdu(e[0], e[1], encode_value(e[2], value_size))
                        for e in picked
                    ],
                    capacity,
                )
                pad_total += pdu.padding_bytes
                if arrives[t]:
                    deliveries, acks = process(pdu, t)
                    for ack in acks:
                        handle_ack(ack)
                    delivered_total += len(deliveries)
                    for mdu, _subs in deliveries:
                        mid = mdu.id
                        got_gen[mid] = mdu.gen_time
                        got_val[mid] = decode_value(mdu.payload, value_size)
                        if delivery_log is not None:
                            delivery_log.append((t, mid, mdu.gen_time))

        # ------------- controller update for t fused with plant step t+1
        row = noise[t + 1]
        pend = 0
        for i in range(n):
            ai, bi, ngi, us_ap, xs_ap = par[i]
            gen = got_gen[i]
            if gen >= 0:
                got_gen[i] = -1
                value = got_val[i]
                if gen == t:
                    xh = value
                else:
                    past = us[i]
                    xh = value
                    for k in range(gen, t):
                        xh = ai * xh + bi * past[k]
                prev = seg_slot[i]
                lo = prev + 1
                hi = t - 1
                if hi >= warmup and hi >= lo:
                    if lo < warmup:
                        lo = warmup
                    first_age = seg_age[i] + (lo - prev)
                    m = hi - lo + 1
                    area[i] += m * first_age + (m * (m - 1)) // 2
                age_now = t - gen
                if t >= warmup:
                    area[i] += age_now
                seg_slot[i] = t
                seg_age[i] = age_now
            else:
                xh = ai * x_hat[i] + bi * u[i]
            x_hat[i] = xh
            ui = ngi * xh
            u[i] = ui
            us_ap(ui)
            xi = ai * x[i] + bi * ui + row[i]
            x[i] = xi
            xs_ap(xi)
            if filtering:
                if abs(xi - last_ref[i]) > threshold:
                    trig[i] = True
                    last_ref[i] = xi
                    pend += 1
                else:
                    trig[i] = False

    # close each loop's open age segment at the end of the horizon
    for i in range(n):
        prev = seg_slot[i]
        lo = prev + 1
        hi = horizon - 1
        if hi >= warmup and hi >= lo:
            if lo < warmup:
                lo = warmup
            first_age = seg_age[i] + (lo - prev)
            m = hi - lo + 1
            area[i] += m * first_age + (m * (m - 1)) // 2

    slots = horizon - warmup
    per_loop_lqg = []
    for i in range(n):
        xv = np.frombuffer(xs[i])[warmup:horizon]
        uv = np.frombuffer(us[i])[warmup:horizon]
        per_loop_lqg.append(
            (qs[i] * float(np.sum(xv * xv)) + rs[i] * float(np.sum(uv * uv))) / slots
        )
    base = counters_base
    blocks -= base[0]
    pad_total -= base[1]
    discards = (
        replaced_local
        + handler.replaced_discards
        + handler.overflow_drops
        + handler.stale_drops
        + reader.unsubscribed_drops
        - base[5]
    )

    traces = None
    if record_traces:
        by_loop = [dict() for _ in range(n)]
        for slot, mid, gen in delivery_log:
            by_loop[mid][slot] = gen
        traces = []
        for i in range(n):
            lookup = by_loop[i].get
            age = 0
            trace = []
            for slot in range(horizon):
                gen = lookup(slot)
                age = slot - gen if gen is not None else age + 1
                trace.append(age)
            traces.append(trace)

    return RunResult(
        n_loops=n,
        strategy=strategy_label(strat),
        seed=config.seed,
        mean_aoi=sum(area) / (n * slots),
        mean_lqg=sum(per_loop_lqg) / n,
        per_loop_aoi=tuple(s / slots for s in area),
        per_loop_lqg=tuple(per_loop_lqg),
        padding_fraction=pad_total / (capacity * blocks) if blocks else 0.0,
        trigger_rate=(triggered_total - base[2]) / (n * slots),
        discards=discards,
        published=published_total - base[3],
        delivered=delivered_total - base[4],
        aoi_trace=traces,
        delivery_log=delivery_log,
    )


def _canonical_tokens(strategy_tokens, upgrade_tis):
    labels = []
    for token in strategy_tokens:
        strat = parse_strategy(token)
        if upgrade_tis and strat.kind is Strategy.FA and not strat.tis:
            strat = StrategyConfig(Strategy.FA, True)
        label = strategy_label(strat.validate())
        if label not in labels:
            labels.append(label)
    labels.sort(key=STRATEGY_ORDER.index)
    return labels


def sweep(base, n_values, strategy_tokens, jobs=1):
    """Run the (n_loops, strategy, seed) grid and return all results.

    Rows come back in CSV order: n_loops ascending, then strategies in
    canonical order, then seeds base.seed .. base.seed+repetitions-1.
    base.tis upgrades plain FA tokens to FA+TIS.
    """
    try:
        sizes = sorted({int(v) for v in n_values})
        labels = _canonical_tokens(strategy_tokens, base.tis)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not sizes or not labels:
        raise ConfigError("sweep needs at least one loop count and one strategy")
    configs = [
        dataclasses.replace(base, n_loops=size, strategy=label, tis=False, seed=base.seed + rep)
        for size in sizes
        for label in labels
        for rep in range(base.repetitions)
    ]
    for config in configs:
        config.validate()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, configs))
    return [run(config) for config in configs]


def summarize(results):
    """Collapse sweep rows to per (n_loops, strategy) mean/min/max bands."""
    order = []
    groups = {}
    for row in results:
        key = (row.n_loops, row.strategy)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for key in order:
        rows = groups[key]
        aoi = [r.mean_aoi for r in rows]
        lqg = [r.mean_lqg for r in rows]
        out.append(
            SummaryRow(
                n_loops=key[0],
                strategy=key[1],
                aoi_mean=fmean(aoi),
                aoi_min=min(aoi),
                aoi_max=max(aoi),
                lqg_mean=fmean(lqg),
                lqg_min=min(lqg),
                lqg_max=max(lqg),
                padding_mean=fmean(r.padding_fraction for r in rows),
                trigger_mean=fmean(r.trigger_rate for r in rows),
            )
        )
    return out
