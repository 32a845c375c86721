"""Process-based sandboxes: lifecycle state machine, restore model, warm pool.

Each sandbox is a real child process running the guest entry point. The
modeled snapshot-restore delay (base plus per-page cost, with the working
set shrunk by the configured fraction in offloaded modes) runs concurrently
with the actual spawn-and-attach, and the sandbox turns Ready only when both
have finished. Restore delays never block other sandboxes' provisioning.
"""

from __future__ import annotations

import asyncio
import collections
import enum
import logging
import os
import signal
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

from .config import BackendConfig
from .errors import IllegalState, SpawnError
from .proto import InputHint
from .shmem import (
    HEADER_BYTES,
    MODE_RING,
    MODE_SLOT,
    SLOT_ALIGN,
    Region,
    align_up,
)

logger = logging.getLogger(__name__)

PID_REGISTRY = "guests.pid"
CONTROL_SOCKET = "backend.sock"


class SandboxState(enum.Enum):
    RESTORING = "Restoring"
    READY = "Ready"
    BUSY = "Busy"
    DRAINING = "Draining"
    RELEASED = "Released"


# Ready<->Busy is the only re-entrant pair; Draining is the teardown path
# (from Busy on pool overflow, from Ready on eviction, from Restoring on a
# provisioning abort).
LEGAL_TRANSITIONS = {
    (SandboxState.RESTORING, SandboxState.READY),
    (SandboxState.RESTORING, SandboxState.DRAINING),
    (SandboxState.READY, SandboxState.BUSY),
    (SandboxState.BUSY, SandboxState.READY),
    (SandboxState.BUSY, SandboxState.DRAINING),
    (SandboxState.READY, SandboxState.DRAINING),
    (SandboxState.DRAINING, SandboxState.RELEASED),
}


@dataclass
class SandboxRecord:
    sandbox_id: int
    function: str
    state: SandboxState = SandboxState.RESTORING
    region: Optional[Region] = None
    process: Optional[asyncio.subprocess.Process] = None
    channel: Optional[object] = None  # bound by the backend on guest connect
    restore_us: int = 0
    restored_at_us: int = 0
    released_at_us: int = 0
    warm_hit: bool = False
    ready_event: asyncio.Event = field(default_factory=asyncio.Event)
    channel_event: asyncio.Event = field(default_factory=asyncio.Event)
    transitions: list[tuple[SandboxState, SandboxState]] = field(default_factory=list)

    @property
    def pid(self) -> Optional[int]:
        return self.process.pid if self.process else None


def now_us() -> int:
    return int(time.monotonic() * 1e6)


class SandboxManager:
    """Owns spawn, warm pools, state transitions, and crash hygiene.

    Transitions are validated against LEGAL_TRANSITIONS and recorded per
    sandbox; an illegal transition raises rather than corrupting the pool.
    """

    def __init__(self, cfg: BackendConfig, region_dir: str, mode: str,
                 store_addr: str = ""):
        self.cfg = cfg
        self.region_dir = region_dir
        self.mode = mode
        self.store_addr = store_addr
        self.control_path = os.path.join(region_dir, CONTROL_SOCKET)
        self._next_id = 1
        self._pools: dict[str, collections.deque[SandboxRecord]] = {}
        self._waiters: dict[str, collections.deque[asyncio.Future]] = {}
        self._by_pid: dict[int, SandboxRecord] = {}
        self._all: dict[int, SandboxRecord] = {}
        self._capacity: dict[str, asyncio.Semaphore] = {}
        self.transition_violations = 0
        self.cold_starts = 0
        self.warm_hits = 0
        os.makedirs(region_dir, exist_ok=True)

    # -- crash hygiene -----------------------------------------------------

    def clean_stale(self) -> int:
        """Kill guests left over from a crashed predecessor and remove their
        region files; a restarted backend starts from a clean node."""
        registry = os.path.join(self.region_dir, PID_REGISTRY)
        killed = 0
        if os.path.exists(registry):
            with open(registry) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        os.kill(int(line), signal.SIGKILL)
                        killed += 1
                    except (ProcessLookupError, ValueError, PermissionError):
                        pass
            os.unlink(registry)
        for name in os.listdir(self.region_dir):
            if name.startswith("nexus-region-") or name == CONTROL_SOCKET:
                try:
                    os.unlink(os.path.join(self.region_dir, name))
                except OSError:
                    pass
        return killed

    def _register_pid(self, pid: int) -> None:
        with open(os.path.join(self.region_dir, PID_REGISTRY), "a") as fh:
            fh.write(f"{pid}\n")

    # -- state machine -----------------------------------------------------

    def transition(self, record: SandboxRecord, new_state: SandboxState) -> None:
        edge = (record.state, new_state)
        if edge not in LEGAL_TRANSITIONS:
            self.transition_violations += 1
            raise IllegalState(f"sandbox {record.sandbox_id}: illegal {edge[0].value} -> {edge[1].value}")
        record.transitions.append(edge)
        record.state = new_state
        if new_state is SandboxState.READY and not record.restored_at_us:
            record.restored_at_us = now_us()
        if new_state is SandboxState.RELEASED:
            record.released_at_us = now_us()

    # -- provisioning --------------------------------------------------------

    def _semaphore(self, function: str) -> asyncio.Semaphore:
        if function not in self._capacity:
            self._capacity[function] = asyncio.Semaphore(self.cfg.pool.max_per_function)
        return self._capacity[function]

    def _try_acquire(self, function: str) -> bool:
        # single-threaded loop: no await between the check and the acquire
        sem = self._semaphore(function)
        if sem.locked():
            return False
        sem._value -= 1  # the non-blocking half of Semaphore.acquire()
        return True

    def _pop_pooled(self, function: str) -> Optional[SandboxRecord]:
        pool = self._pools.setdefault(function, collections.deque())
        while pool:
            record = pool.popleft()
            alive = record.process is not None and record.process.returncode is None
            if record.state is SandboxState.READY and record.channel is not None and alive:
                return record
            self._discard(record)  # process died while pooled
        return None

    def region_size_for(self, hints: tuple[InputHint, ...]) -> tuple[int, int]:
        """(size_bytes, mode) for a fresh region given the invocation hints."""
        if not hints:
            return HEADER_BYTES, MODE_RING
        total = HEADER_BYTES + self.cfg.region.slot_headroom_bytes
        for hint in hints:
            total += align_up(max(hint.size_bytes or 0, 1), SLOT_ALIGN)
        return total, MODE_SLOT

    async def assign(self, function: str, hints: tuple[InputHint, ...] = ()) -> SandboxRecord:
        """Warm-pool hit returns a Ready sandbox immediately; otherwise spawn
        within the per-function capacity, or wait for a sandbox to free up.
        A released sandbox is handed straight to the oldest waiter, so
        capacity queueing is FIFO and the wait is the queue phase of the
        invocation's breakdown."""
        while True:
            record = self._pop_pooled(function)
            if record is not None:
                record.warm_hit = True
                self.warm_hits += 1
                return record
            if self._try_acquire(function):
                self.cold_starts += 1
                return self._spawn(function, hints)
            future = asyncio.get_running_loop().create_future()
            self._waiters.setdefault(function, collections.deque()).append(future)
            try:
                handed = await future
            except asyncio.CancelledError:
                waiters = self._waiters.get(function)
                if waiters and future in waiters:
                    waiters.remove(future)
                elif future.done() and future.result() is not None:
                    # a handoff raced the cancellation; do not lose the sandbox
                    self._repool(future.result())
                raise
            if handed is not None:
                handed.warm_hit = True
                self.warm_hits += 1
                return handed
            # a permit was freed instead; loop and try to spawn

    def _spawn(self, function: str, hints: tuple[InputHint, ...]) -> SandboxRecord:
        sandbox_id = self._next_id
        self._next_id += 1
        record = SandboxRecord(sandbox_id=sandbox_id, function=function)
        if self.mode != "coupled":  # coupled guests bypass the data plane
            size_bytes, region_mode = self.region_size_for(hints)
            try:
                record.region = Region.create(
                    self.region_dir, sandbox_id, size_bytes, region_mode,
                    ring_bytes=self.cfg.region.ring_bytes,
                    cap=self.cfg.region.max_region_bytes)
            except OSError as exc:
                self._semaphore(function).release()
                self._wake_one(function)
                raise SpawnError(f"region create failed: {exc}") from None
        restore = self.cfg.restore_for(function)
        record.restore_us = restore.restore_us(self.mode)
        self._all[sandbox_id] = record
        asyncio.get_running_loop().create_task(self._provision(record))
        return record

    async def _provision(self, record: SandboxRecord) -> None:
        argv = list(self.cfg.guest_runtimes.get(record.function)
                    or [sys.executable, "-m", "nexus.guest"])
        argv += [
            "--control", self.control_path,
            "--function", record.function,
            "--mode", self.mode,
            "--idle-timeout-s", str(self.cfg.pool.idle_timeout_s),
        ]
        if self.mode != "coupled" and record.region is not None:
            argv += ["--region", record.region.path]
        if self.store_addr:
            argv += ["--store", self.store_addr]
        env = dict(os.environ)
        env["NEXUS_CONTROL"] = self.control_path
        env["NEXUS_REGION"] = record.region.path if record.region else ""
        t0 = time.monotonic()
        try:
            record.process = await asyncio.create_subprocess_exec(
                *argv, env=env, stdout=asyncio.subprocess.DEVNULL)
        except OSError as exc:
            logger.error("spawn failed for %s: %s", record.function, exc)
            self.abort(record)
            record.ready_event.set()  # wakes the waiter, which sees the state
            return
        self._by_pid[record.process.pid] = record
        self._register_pid(record.process.pid)
        remaining = record.restore_us / 1e6 - (time.monotonic() - t0)
        if remaining > 0:
            await asyncio.sleep(remaining)
        try:
            await asyncio.wait_for(record.channel_event.wait(), timeout=30.0)
        except asyncio.TimeoutError:
            logger.error("sandbox %d never attached", record.sandbox_id)
            self.abort(record)
            record.ready_event.set()
            return
        if record.state is SandboxState.RESTORING:
            self.transition(record, SandboxState.READY)
        record.ready_event.set()

    def bind_channel(self, pid: int, channel) -> Optional[SandboxRecord]:
        """Called by the backend's control server when a guest connects; the
        peer is identified by its process id."""
        record = self._by_pid.get(pid)
        if record is None:
            return None
        record.channel = channel
        record.channel_event.set()
        return record

    def record_for_pid(self, pid: int) -> Optional[SandboxRecord]:
        return self._by_pid.get(pid)

    # -- release and teardown ------------------------------------------------

    def mark_busy(self, record: SandboxRecord) -> None:
        self.transition(record, SandboxState.BUSY)

    def release(self, record: SandboxRecord) -> SandboxState:
        """Return a Busy sandbox to service: straight to the oldest waiter,
        else the warm pool, else drained; the caller never waits for pending
        writeback."""
        self.transition(record, SandboxState.READY)
        return self._repool(record)

    def _repool(self, record: SandboxRecord) -> SandboxState:
        waiters = self._waiters.get(record.function)
        while waiters:
            future = waiters.popleft()
            if not future.done():
                future.set_result(record)
                return SandboxState.READY
        pool = self._pools.setdefault(record.function, collections.deque())
        if len(pool) < self.cfg.pool.warm_capacity:
            pool.append(record)
            return SandboxState.READY
        self._discard(record)
        return SandboxState.RELEASED

    def abort(self, record: SandboxRecord) -> None:
        """Provisioning failed or the invocation is being cancelled: free the
        region and retire the sandbox."""
        self._discard(record)

    def _discard(self, record: SandboxRecord) -> None:
        if record.state is SandboxState.RELEASED:
            return
        if record.state is not SandboxState.DRAINING:
            self.transition(record, SandboxState.DRAINING)
        self.transition(record, SandboxState.RELEASED)
        if record.process is not None:
            self._by_pid.pop(record.process.pid, None)
            if record.process.returncode is None:
                try:
                    record.process.terminate()
                except ProcessLookupError:
                    pass
        if record.region is not None:
            record.region.close(unlink=True)
            record.region = None
        self._semaphore(record.function).release()
        self._wake_one(record.function)

    def _wake_one(self, function: str) -> None:
        waiters = self._waiters.get(function)
        while waiters:
            future = waiters.popleft()
            if not future.done():
                future.set_result(None)  # a capacity permit freed up
                break

    async def shutdown(self) -> None:
        for record in list(self._all.values()):
            if record.state is not SandboxState.RELEASED:
                try:
                    self._discard(record)
                except IllegalState:
                    pass
        procs = [r.process for r in self._all.values() if r.process is not None]
        for proc in procs:
            if proc.returncode is None:
                try:
                    proc.kill()
                except ProcessLookupError:
                    pass
        for proc in procs:
            try:
                await asyncio.wait_for(proc.wait(), timeout=5)
            except asyncio.TimeoutError:
                pass
        registry = os.path.join(self.region_dir, PID_REGISTRY)
        if os.path.exists(registry):
            os.unlink(registry)

    def counters(self) -> dict:
        return {
            "cold_starts": self.cold_starts,
            "warm_hits": self.warm_hits,
            "transition_violations": self.transition_violations,
            "live_sandboxes": sum(1 for r in self._all.values()
                                  if r.state is not SandboxState.RELEASED),
        }
