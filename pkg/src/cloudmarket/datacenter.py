"""Physical machines, VM lifecycle, and per-machine commitment calendars.

Capacity is enforced twice: the live VM population of a machine can
never exceed its capacity (checked on every lifecycle event), and the
forward-looking commitment calendar used by admission and reservations
can never promise more than the machine has at any tick.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .engine import SimEngine
from .money import ceil_div

VM_STARTING = "Starting"
VM_RUNNING = "Running"
VM_STOPPED = "Stopped"


class InsufficientCapacity(Exception):
    """No machine can host the requested entitlement."""


class UnknownVm(Exception):
    pass


class AlreadyStopped(Exception):
    pass


class VmBusy(Exception):
    """One request per VM: the VM is already executing."""


class CapacityViolation(Exception):
    """Internal invariant breach; signals a simulator bug, not bad input."""


@dataclass
class PhysicalMachine:
    machine_id: str
    cpu_capacity: int
    mem_capacity: int
    free_cpu: int = 0
    free_mem: int = 0
    hosted: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.free_cpu = self.cpu_capacity
        self.free_mem = self.mem_capacity


@dataclass
class Vm:
    vm_id: str
    host: str
    cpu_entitlement: int
    mem_entitlement: int
    ready_at: int
    stopped: bool = False
    assigned_request: str | None = None

    def state_at(self, now: int) -> str:
        if self.stopped:
            return VM_STOPPED
        return VM_RUNNING if now >= self.ready_at else VM_STARTING


@dataclass(frozen=True)
class Block:
    """A committed capacity slice on one machine over [start, end)."""

    start: int
    end: int
    cpu: int
    mem: int
    owner: str


class MachineCalendar:
    """Forward commitments for one machine, queried by interval sweeps."""

    def __init__(self, cpu_capacity: int, mem_capacity: int):
        self.cpu_capacity = cpu_capacity
        self.mem_capacity = mem_capacity
        self.blocks: list[Block] = []

    def add(self, block: Block) -> None:
        if not self.fits(block.start, block.end - block.start, block.cpu, block.mem):
            raise CapacityViolation(
                f"commitment {block} exceeds capacity "
                f"({self.cpu_capacity} cu, {self.mem_capacity} MB)"
            )
        self.blocks.append(block)

    def prune(self, before: int) -> None:
        self.blocks = [b for b in self.blocks if b.end > before]

    def usage_at(self, t: int) -> tuple[int, int]:
        cpu = sum(b.cpu for b in self.blocks if b.start <= t < b.end)
        mem = sum(b.mem for b in self.blocks if b.start <= t < b.end)
        return cpu, mem

    def fits(self, start: int, duration: int, cpu: int, mem: int) -> bool:
        """True if adding (cpu, mem) over [start, start+duration) stays in capacity."""
        if cpu > self.cpu_capacity or mem > self.mem_capacity:
            return False
        if duration <= 0:
            return True
        end = start + duration
        deltas: dict[int, tuple[int, int]] = {}
        for b in self.blocks:
            lo, hi = max(b.start, start), min(b.end, end)
            if lo >= hi:
                continue
            dc, dm = deltas.get(lo, (0, 0))
            deltas[lo] = (dc + b.cpu, dm + b.mem)
            dc, dm = deltas.get(hi, (0, 0))
            deltas[hi] = (dc - b.cpu, dm - b.mem)
        used_cpu = used_mem = 0
        for t in sorted(deltas):
            dc, dm = deltas[t]
            used_cpu += dc
            used_mem += dm
            if t < end and (used_cpu + cpu > self.cpu_capacity or used_mem + mem > self.mem_capacity):
                return False
        return True

    def earliest_fit(
        self,
        earliest_start: int,
        latest_start: int,
        duration: int,
        cpu: int,
        mem: int,
    ) -> int | None:
        """Earliest start in [earliest_start, latest_start] where the slice fits.

        Usage only drops at block ends, so the answer is either
        earliest_start itself or some block's end time.  One sweep over
        the boundary points finds the first feasible span of the needed
        length; everything past the last commitment is free.
        """
        if latest_start < earliest_start or duration <= 0:
            return None
        if cpu > self.cpu_capacity or mem > self.mem_capacity:
            return None
        deltas: dict[int, list[int]] = {earliest_start: [0, 0]}
        for b in self.blocks:
            if b.end <= earliest_start:
                continue
            lo = max(b.start, earliest_start)
            d = deltas.setdefault(lo, [0, 0])
            d[0] += b.cpu
            d[1] += b.mem
            d = deltas.setdefault(b.end, [0, 0])
            d[0] -= b.cpu
            d[1] -= b.mem
        used_cpu = used_mem = 0
        run_start: int | None = earliest_start
        prev = earliest_start
        for point in sorted(deltas):
            if point > prev:
                # segment [prev, point) carries the accumulated usage
                feasible = (used_cpu + cpu <= self.cpu_capacity
                            and used_mem + mem <= self.mem_capacity)
                if feasible:
                    if run_start is None:
                        run_start = prev
                    if run_start + duration <= point:
                        return run_start if run_start <= latest_start else None
                else:
                    run_start = None
                    if prev > latest_start:
                        return None
            dc, dm = deltas[point]
            used_cpu += dc
            used_mem += dm
            prev = point
        if run_start is None:
            run_start = prev
        return run_start if run_start <= latest_start else None


class Datacenter:
    """One provider's fleet: machines, calendars, and the VM population.

    Lifecycle notes are emitted as same-tick events on the owning
    engine; VM boot completion and request completion are scheduled
    ahead, so the event trace alone reconstructs all state.
    """

    def __init__(
        self,
        engine: SimEngine,
        provider_id: str,
        machine_specs: list[tuple[str, int, int]],
        boot_delay: int = 0,
        placement: str = "worst_fit",
    ):
        self.engine = engine
        self.provider_id = provider_id
        self.boot_delay = boot_delay
        self.placement = placement
        self.machines: dict[str, PhysicalMachine] = {}
        self.calendars: dict[str, MachineCalendar] = {}
        for machine_id, cpu, mem in machine_specs:
            self.machines[machine_id] = PhysicalMachine(machine_id, cpu, mem)
            self.calendars[machine_id] = MachineCalendar(cpu, mem)
        self.vms: dict[str, Vm] = {}
        self._vm_counter = 0

    # -- capacity views ----------------------------------------------------

    @property
    def total_cpu_capacity(self) -> int:
        return sum(m.cpu_capacity for m in self.machines.values())

    def committed_cpu_at(self, t: int) -> int:
        return sum(cal.usage_at(t)[0] for cal in self.calendars.values())

    def utilization_at(self, t: int) -> Fraction:
        total = self.total_cpu_capacity
        if total == 0:
            return Fraction(0)
        return Fraction(self.committed_cpu_at(t), total)

    def free_cu_ticks(self, start: int, end: int) -> int:
        """Uncommitted cpu-ticks over [start, end) across the fleet."""
        free = 0
        for machine_id in sorted(self.machines):
            cal = self.calendars[machine_id]
            boundaries = {start, end}
            for b in cal.blocks:
                if b.end > start and b.start < end:
                    boundaries.add(max(b.start, start))
                    boundaries.add(min(b.end, end))
            points = sorted(boundaries)
            for lo, hi in zip(points, points[1:]):
                used, _ = cal.usage_at(lo)
                free += (cal.cpu_capacity - used) * (hi - lo)
        return free

    # -- placement ---------------------------------------------------------

    def _choose_machine(self, cpu: int, mem: int) -> str | None:
        feasible = [
            m for m in self.machines.values()
            if m.free_cpu >= cpu and m.free_mem >= mem
        ]
        if not feasible:
            return None
        if self.placement == "first_fit":
            return sorted(feasible, key=lambda m: m.machine_id)[0].machine_id
        if self.placement == "best_fit":
            return min(feasible, key=lambda m: (m.free_cpu, m.machine_id)).machine_id
        # worst-fit: largest free capacity spreads load
        return min(feasible, key=lambda m: (-m.free_cpu, m.machine_id)).machine_id

    # -- lifecycle ---------------------------------------------------------

    def provision_vm(
        self,
        cpu_entitlement: int,
        mem_entitlement: int,
        at: int,
        machine_id: str | None = None,
    ) -> str:
        if cpu_entitlement <= 0:
            raise InsufficientCapacity("entitlement must be positive")
        if machine_id is None:
            machine_id = self._choose_machine(cpu_entitlement, mem_entitlement)
            if machine_id is None:
                raise InsufficientCapacity(
                    f"no machine has {cpu_entitlement} cu / {mem_entitlement} MB free"
                )
        machine = self.machines[machine_id]
        if machine.free_cpu < cpu_entitlement or machine.free_mem < mem_entitlement:
            raise InsufficientCapacity(
                f"{machine_id} lacks {cpu_entitlement} cu / {mem_entitlement} MB"
            )
        self._vm_counter += 1
        vm_id = f"{self.provider_id}-vm{self._vm_counter:05d}"
        vm = Vm(
            vm_id=vm_id,
            host=machine_id,
            cpu_entitlement=cpu_entitlement,
            mem_entitlement=mem_entitlement,
            ready_at=at + self.boot_delay,
        )
        self.vms[vm_id] = vm
        machine.hosted.add(vm_id)
        machine.free_cpu -= cpu_entitlement
        machine.free_mem -= mem_entitlement
        self.engine.emit("vm_provision", {
            "provider": self.provider_id, "vm_id": vm_id, "machine": machine_id,
            "cpu": cpu_entitlement, "mem": mem_entitlement, "ready_at": vm.ready_at,
        })
        self.engine.schedule("vm_booted", {
            "provider": self.provider_id, "vm_id": vm_id,
        }, fire_at=vm.ready_at)
        self.check_capacity()
        return vm_id

    def release_vm(self, vm_id: str, at: int) -> tuple[int, int]:
        vm = self.vms.get(vm_id)
        if vm is None:
            raise UnknownVm(vm_id)
        if vm.stopped:
            raise AlreadyStopped(vm_id)
        vm.stopped = True
        vm.assigned_request = None
        machine = self.machines[vm.host]
        machine.hosted.discard(vm_id)
        machine.free_cpu += vm.cpu_entitlement
        machine.free_mem += vm.mem_entitlement
        self.engine.emit("vm_release", {
            "provider": self.provider_id, "vm_id": vm_id, "machine": vm.host,
            "cpu": vm.cpu_entitlement, "mem": vm.mem_entitlement,
        })
        self.check_capacity()
        return vm.cpu_entitlement, vm.mem_entitlement

    def dispatch(self, request_id: str, vm_id: str, at: int, workload_volume: int) -> int:
        """Start execution; returns the scheduled completion event id."""
        vm = self.vms.get(vm_id)
        if vm is None:
            raise UnknownVm(vm_id)
        if vm.stopped:
            raise AlreadyStopped(vm_id)
        if vm.assigned_request is not None:
            raise VmBusy(f"{vm_id} is executing {vm.assigned_request}")
        vm.assigned_request = request_id
        start = max(at, vm.ready_at)
        completion = start + ceil_div(workload_volume, vm.cpu_entitlement)
        self.engine.emit("dispatch", {
            "provider": self.provider_id, "request_id": request_id, "vm_id": vm_id,
            "start": start, "completion": completion, "volume": workload_volume,
        })
        return self.engine.schedule("completion", {
            "provider": self.provider_id, "request_id": request_id, "vm_id": vm_id,
            "start": start, "volume": workload_volume,
        }, fire_at=completion)

    def finish_execution(self, vm_id: str) -> str | None:
        vm = self.vms.get(vm_id)
        if vm is None:
            raise UnknownVm(vm_id)
        request_id = vm.assigned_request
        vm.assigned_request = None
        return request_id

    # -- monitoring ---------------------------------------------------------

    def vm_monitor_snapshot(self, at: int) -> dict:
        machines = {}
        for machine_id in sorted(self.machines):
            m = self.machines[machine_id]
            machines[machine_id] = {
                "cpu_capacity": m.cpu_capacity,
                "mem_capacity": m.mem_capacity,
                "free_cpu": m.free_cpu,
                "free_mem": m.free_mem,
                "hosted": sorted(m.hosted),
            }
        vms = {}
        for vm_id in sorted(self.vms):
            vm = self.vms[vm_id]
            vms[vm_id] = {
                "host": vm.host,
                "cpu": vm.cpu_entitlement,
                "mem": vm.mem_entitlement,
                "state": vm.state_at(at),
                "assigned_request": vm.assigned_request,
            }
        return {"snapshot_time": at, "machines": machines, "vms": vms}

    def check_capacity(self) -> None:
        for machine_id, m in self.machines.items():
            cpu = sum(
                self.vms[v].cpu_entitlement for v in m.hosted if not self.vms[v].stopped
            )
            mem = sum(
                self.vms[v].mem_entitlement for v in m.hosted if not self.vms[v].stopped
            )
            if cpu > m.cpu_capacity or mem > m.mem_capacity:
                raise CapacityViolation(
                    f"{machine_id}: hosted {cpu} cu/{mem} MB exceeds capacity"
                )
            if m.free_cpu != m.cpu_capacity - cpu or m.free_mem != m.mem_capacity - mem:
                raise CapacityViolation(f"{machine_id}: free counters drifted")
            if m.free_cpu < 0 or m.free_mem < 0:
                raise CapacityViolation(f"{machine_id}: negative free capacity")


def fleet_specs(provider_id: str, groups: list[dict]) -> list[tuple[str, int, int]]:
    """Expand (count, cpu_capacity, mem_capacity) groups into machine specs."""
    specs = []
    index = 0
    for group in groups:
        for _ in range(group["count"]):
            specs.append((f"{provider_id}-m{index:03d}", group["cpu_capacity"], group["mem_capacity"]))
            index += 1
    return specs
