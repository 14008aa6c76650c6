"""Single-round federated training: seed broadcast, local counts, tree all-reduce.

Parties are arranged in a binomial tree rooted at rank 0 with rank-order
pairing. In reduce round r (r = 0, 1, ...) a party whose bit r is set sends
its partial result to rank - 2**r and drops out; the others absorb the partial
result of rank + 2**r. The broadcast walks the same edges downwards. Each party
therefore sends and receives at most ceil(log2 tau) messages per phase.

Counts are combined as integers, so the federated model equals the model
trained on the pooled shards bit for bit.
"""

import struct
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .core_hash import STREAM_DP, HashParams, RngState, make_fly_hasher
from .data import Dataset
from .dp_mechanism import DPParams, add_privatized, privatize, sparse_decode, sparse_encode
from .errors import DimensionError, FederationAbort, ModelFormatError, ParameterError, StragglerTimeout, TransportError
from .fbf_classifier import ClassCounts, FlyNNModel, accumulate_counts, merge_counts, model_from_counts, parse_gamma
from .transport import (
    AGGREGATION_KINDS,
    KIND_COUNTS,
    KIND_LABEL_TABLE,
    KIND_NAMES,
    KIND_PRIVATIZED,
    KIND_SEED,
    InProcessHub,
    TcpTransport,
    Transport,
    allocate_local_addresses,
)
from .utils import decode_varint, encode_varint, get_logger, stopwatch

logger = get_logger(__name__)

TRANSPORTS = ("inprocess", "tcp")
BACKENDS = ("thread", "process")

_SEED = struct.Struct(">Q")
_SHAPE = struct.Struct(">II")


def tree_rounds(size: int) -> int:
    """ceil(log2 size), the depth of the binomial tree."""
    return (size - 1).bit_length()


def tree_broadcast(transport: Transport, body: bytes, kind: int) -> bytes:
    """Deliver the root's body to every party; non-root callers pass None."""
    rank, size = transport.rank, transport.size
    if rank == 0:
        span = 1 << tree_rounds(size)
    else:
        span = rank & -rank
        _, body = transport.recv(rank - span, expect=kind)
    step = span >> 1
    while step:
        if rank + step < size:
            transport.send(rank + step, kind, body)
        step >>= 1
    return body


def tree_reduce(transport: Transport, value, combine, encode, decode, kind: int):
    """Combine every party's value at the root; non-root parties return None."""
    rank, size = transport.rank, transport.size
    for r in range(tree_rounds(size)):
        step = 1 << r
        if rank & step:
            transport.send(rank - step, kind, encode(value))
            return None
        if rank + step < size:
            _, body = transport.recv(rank + step, expect=kind)
            value = combine(value, decode(body))
    return value


def encode_counts(counts: ClassCounts) -> bytes:
    """Dense wire form: (L, m) header then int64 big-endian entries."""
    return _SHAPE.pack(counts.L, counts.m) + counts.counts.astype(">i8").tobytes()


def decode_counts(body: bytes) -> ClassCounts:
    if len(body) < _SHAPE.size:
        raise ModelFormatError("Counts message shorter than its header")
    L, m = _SHAPE.unpack_from(body, 0)
    if len(body) != _SHAPE.size + 8 * L * m:
        raise ModelFormatError(f"Counts message of {len(body)} bytes does not hold a {L}x{m} table")
    return ClassCounts(np.frombuffer(body, dtype=">i8", offset=_SHAPE.size).astype(np.int64).reshape(L, m))


def tree_all_reduce(
    transport: Transport,
    value,
    combine=merge_counts,
    encode=encode_counts,
    decode=decode_counts,
    kind: int = KIND_COUNTS,
):
    """Reduce up the tree, broadcast the total down; every party returns the same total."""
    reduced = tree_reduce(transport, value, combine, encode, decode, kind)
    body = tree_broadcast(transport, encode(reduced) if transport.rank == 0 else None, kind)
    return reduced if transport.rank == 0 else decode(body)


def broadcast_seed(transport: Transport, seed: int = None) -> int:
    """Spread the root's 64-bit seed; tau - 1 seed messages in total."""
    body = _SEED.pack(seed) if transport.rank == 0 else None
    (value,) = _SEED.unpack(tree_broadcast(transport, body, KIND_SEED))
    return value


def encode_label_table(labels: tuple, d: int) -> bytes:
    out = bytearray(encode_varint(d))
    out += encode_varint(len(labels))
    for label in labels:
        raw = label.encode("utf-8")
        out += encode_varint(len(raw)) + raw
    return bytes(out)


def decode_label_table(body: bytes) -> tuple:
    d, offset = decode_varint(body, 0)
    count, offset = decode_varint(body, offset)
    labels = []
    for _ in range(count):
        size, offset = decode_varint(body, offset)
        labels.append(body[offset : offset + size].decode("utf-8"))
        offset += size
    return tuple(labels), d


def agree_on_label_table(transport: Transport, labels: tuple, d: int):
    """Compare every party's label table and dimension with the root's; abort on mismatch."""
    body = encode_label_table(labels, d) if transport.rank == 0 else None
    root_labels, root_d = decode_label_table(tree_broadcast(transport, body, KIND_LABEL_TABLE))
    if root_labels != labels:
        reason = f"label table mismatch: party {transport.rank} has {list(labels)}, party 0 has {list(root_labels)}"
        transport.abort(reason)
        raise FederationAbort(reason)
    if root_d != d:
        raise DimensionError(f"shard dimension mismatch: party {transport.rank} has d={d}, party 0 has d={root_d}")


@dataclass(frozen=True)
class PartyTask:
    """What a single party knows when the federation starts."""

    rank: int
    tau: int
    shard: Dataset
    params: HashParams
    gamma: str
    dp: DPParams = None
    dp_seed: int = 0


@dataclass
class PartyReport:
    rank: int
    n_rows: int
    seed: int
    train_seconds: float
    aggregation_seconds: float
    meter: dict
    model: FlyNNModel = field(repr=False, default=None)


@dataclass(frozen=True)
class FederationPlan:
    """Shards, shared hyper-parameters and the runtime to train them with.

    `params.seed` is known to the root only and reaches the others through
    the seed broadcast. With `dp` set, every party privatizes its counts with
    budget dp.epsilon / tau before aggregation.
    """

    shards: tuple
    params: HashParams
    gamma: str = "0"
    dp: DPParams = None
    dp_seed: int = 0
    transport: str = "inprocess"
    backend: str = "thread"
    timeout: float = 60.0

    @property
    def tau(self) -> int:
        return len(self.shards)

    @property
    def is_dp(self) -> bool:
        return self.dp is not None

    def validate(self):
        if self.tau < 1:
            raise ParameterError("A federation needs at least one party")
        if self.transport not in TRANSPORTS:
            raise ParameterError(f"Unknown transport '{self.transport}', expected one of {TRANSPORTS}")
        if self.backend not in BACKENDS:
            raise ParameterError(f"Unknown backend '{self.backend}', expected one of {BACKENDS}")
        if self.backend == "process" and self.transport != "tcp":
            raise ParameterError("The process backend needs the tcp transport")
        if not self.timeout > 0:
            raise ParameterError(f"timeout must be positive, got {self.timeout}")
        parse_gamma(self.gamma)
        if self.dp is not None:
            self.dp.check_size(self.params.m * len(self.shards[0].labels))

    def task(self, rank: int) -> PartyTask:
        gamma_text, _ = parse_gamma(self.gamma)
        dp = self.dp.split(self.tau) if self.dp is not None else None
        # only the root starts out with the seed
        params = self.params if rank == 0 else replace(self.params, seed=0)
        return PartyTask(rank, self.tau, self.shards[rank], params, gamma_text, dp, self.dp_seed)


@dataclass
class FederationResult:
    plan_summary: dict
    reports: list
    wall_seconds: float

    @property
    def models(self) -> list:
        return [report.model for report in self.reports]

    @property
    def model(self) -> FlyNNModel:
        return self.reports[0].model

    @property
    def train_seconds(self) -> float:
        """Parallel training time: the slowest party's local training."""
        return max(report.train_seconds for report in self.reports)


def run_party(task: PartyTask, transport: Transport) -> PartyReport:
    """Algorithm of one party; aborts the federation if anything goes wrong locally."""
    try:
        seed = broadcast_seed(transport, task.params.seed)
        shard = task.shard
        agree_on_label_table(transport, shard.labels, shard.d)
        params = replace(task.params, seed=seed)
        # matrix generation stays outside the timed region
        hasher = make_fly_hasher(params, shard.d)
        with stopwatch() as training:
            local = accumulate_counts(hasher, shard.X, shard.y, shard.L)
            if task.dp is not None:
                private = privatize(local.counts.ravel(), task.dp, RngState(task.dp_seed, STREAM_DP + task.rank))
        with stopwatch() as aggregation:
            if task.dp is not None:
                total = tree_all_reduce(
                    transport, private, add_privatized, sparse_encode, sparse_decode, KIND_PRIVATIZED
                )
                counts = ClassCounts(total.to_dense().reshape(shard.L, params.m))
            else:
                counts = tree_all_reduce(transport, local)
        model = model_from_counts(hasher, counts, task.gamma, shard.labels, seed)
    except FederationAbort:
        raise
    except Exception as e:
        transport.abort(f"{type(e).__name__}: {e}")
        raise
    return PartyReport(
        rank=task.rank,
        n_rows=task.shard.n,
        seed=seed,
        train_seconds=training["seconds"],
        aggregation_seconds=aggregation["seconds"],
        meter=transport.meter.snapshot(),
        model=model,
    )


def _run_party_process(task: PartyTask, addresses: list, timeout: float) -> PartyReport:
    transport = TcpTransport(task.rank, addresses, timeout)
    try:
        return run_party(task, transport)
    finally:
        transport.close()


def make_transports(kind: str, size: int, timeout: float) -> list:
    if kind == "inprocess":
        return InProcessHub(size).transports(timeout)
    if kind == "tcp":
        addresses = allocate_local_addresses(size)
        return [TcpTransport(rank, addresses, timeout) for rank in range(size)]
    raise ParameterError(f"Unknown transport '{kind}', expected one of {TRANSPORTS}")


def _root_cause(errors: dict) -> BaseException:
    ordered = [errors[rank] for rank in sorted(errors)]
    for error in ordered:
        if not isinstance(error, TransportError):
            return error
    for error in ordered:
        if isinstance(error, StragglerTimeout):
            return error
    return ordered[0]


def _gather(futures) -> list:
    results, errors = [], {}
    for rank, future in enumerate(futures):
        try:
            results.append(future.result())
        except Exception as e:
            errors[rank] = e
    if errors:
        cause = _root_cause(errors)
        logger.error(f"[ABORTED] federation failed at {len(errors)} of {len(futures)} parties: {cause}")
        raise cause
    return results


def train_flynn_fl(plan: FederationPlan) -> FederationResult:
    """Run the federation described by `plan` and return every party's model and report.

    Raises:
    FederationAbort
        On label-table mismatch or when a party aborts.
    StragglerTimeout
        When a party waits longer than plan.timeout for a peer.
    DimensionError
        When shards disagree on the input dimension.
    """
    plan.validate()
    tasks = [plan.task(rank) for rank in range(plan.tau)]
    logger.info(
        f"[STARTED] federated training: tau={plan.tau}, m={plan.params.m}, dp={plan.is_dp}, "
        f"transport={plan.transport}, backend={plan.backend}"
    )
    with stopwatch() as wall:
        if plan.backend == "thread":
            transports = make_transports(plan.transport, plan.tau, plan.timeout)
            try:
                with ThreadPoolExecutor(max_workers=plan.tau) as pool:
                    futures = [pool.submit(run_party, task, transport) for task, transport in zip(tasks, transports)]
                    reports = _gather(futures)
            finally:
                for transport in transports:
                    transport.close()
        else:
            addresses = allocate_local_addresses(plan.tau)
            with ProcessPoolExecutor(max_workers=plan.tau) as pool:
                futures = [pool.submit(_run_party_process, task, addresses, plan.timeout) for task in tasks]
                reports = _gather(futures)
    logger.info(f"[DONE] federated training in {wall['seconds']:.3f}s")
    summary = {
        "tau": plan.tau,
        "m": plan.params.m,
        "s": plan.params.s,
        "rho": plan.params.rho,
        "gamma": plan.gamma,
        "dp": plan.is_dp,
        "transport": plan.transport,
        "backend": plan.backend,
    }
    return FederationResult(summary, reports, wall["seconds"])


@dataclass
class CommReport:
    """Per-party and total traffic of a completed federation."""

    parties: pd.DataFrame
    total_bytes_sent: int
    total_messages_sent: int
    aggregation_bytes: int
    setup_bytes: int
    final_nonzeros: int

    def as_dict(self) -> dict:
        return {
            "total_bytes_sent": self.total_bytes_sent,
            "total_messages_sent": self.total_messages_sent,
            "aggregation_bytes": self.aggregation_bytes,
            "setup_bytes": self.setup_bytes,
            "final_nonzeros": self.final_nonzeros,
        }


def comm_report(result: FederationResult) -> CommReport:
    """Exact byte totals from the party meters.

    Aggregation bytes cover the counts messages only; setup bytes cover the
    seed and label-table messages. final_nonzeros is the density of the
    aggregated model, which in the private path can reach tau * T.
    """
    aggregation_names = [KIND_NAMES[k] for k in AGGREGATION_KINDS]
    rows = []
    for report in result.reports:
        meter = report.meter
        aggregation = meter["aggregation_bytes_sent"]
        aggregation_messages = sum(meter["sent_messages_by_kind"].get(name, 0) for name in aggregation_names)
        rows.append(
            {
                "rank": report.rank,
                "rows": report.n_rows,
                "bytes_sent": meter["bytes_sent"],
                "bytes_received": meter["bytes_received"],
                "messages_sent": meter["messages_sent"],
                "messages_received": meter["messages_received"],
                "aggregation_bytes_sent": aggregation,
                "aggregation_messages_sent": aggregation_messages,
                "seed_messages_sent": meter["sent_messages_by_kind"].get(KIND_NAMES[KIND_SEED], 0),
                "train_seconds": report.train_seconds,
            }
        )
    parties = pd.DataFrame(rows)
    total = int(parties["bytes_sent"].sum())
    aggregation = int(parties["aggregation_bytes_sent"].sum())
    return CommReport(
        parties=parties,
        total_bytes_sent=total,
        total_messages_sent=int(parties["messages_sent"].sum()),
        aggregation_bytes=aggregation,
        setup_bytes=total - aggregation,
        final_nonzeros=result.model.counts.nonzeros(),
    )


def _reduce_party(transport: Transport, value):
    try:
        return tree_all_reduce(transport, value)
    except FederationAbort:
        raise
    except Exception as e:
        transport.abort(f"{type(e).__name__}: {e}")
        raise


def run_all_reduce(values: list, transport: str = "inprocess", timeout: float = 30.0) -> tuple:
    """All-reduce ClassCounts among len(values) threads; returns (per-party results, meters)."""
    transports = make_transports(transport, len(values), timeout)
    try:
        with ThreadPoolExecutor(max_workers=len(values)) as pool:
            futures = [pool.submit(_reduce_party, t, value) for t, value in zip(transports, values)]
            results = _gather(futures)
    finally:
        for t in transports:
            t.close()
    return results, [t.meter.snapshot() for t in transports]
