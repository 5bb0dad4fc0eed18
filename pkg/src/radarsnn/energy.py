"""Operation ledgers and the MAC/AC energy model.

Counting conventions for real-valued layers are selected by the ledger's
``mode``:

``"dense"``
    analytic count ``out_elements * in_channels * kernel_volume``, the
    figure a static profiler reports regardless of input sparsity.
``"event"``
    only work touching nonzero inputs: for every nonzero input element,
    one operation per kernel tap landing on a valid output position and
    per output channel.

Spike-driven layers always record their actual accumulations (AC), since
an event-driven core only works on incoming spikes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

COUNT_MODES = ("dense", "event")


@dataclass(frozen=True)
class EnergyModel:
    """Joules per operation; defaults are 45 nm CMOS figures."""

    e_mac: float = 4.6e-12
    e_ac: float = 0.9e-12

    def __post_init__(self):
        if not (self.e_mac > 0 and self.e_ac > 0):
            raise ValueError("energy per operation must be positive")

    def scaled(self, factor: float) -> "EnergyModel":
        return EnergyModel(self.e_mac * factor, self.e_ac * factor)


@dataclass
class OpLedger:
    frame_id: str = ""
    mode: str = "dense"
    layers: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in COUNT_MODES:
            raise ValueError(f"unknown counting mode {self.mode!r}")

    def record(self, layer: str, macs: int = 0, acs: int = 0) -> "OpLedger":
        if macs < 0 or acs < 0:
            raise ValueError("operation counts cannot be negative")
        entry = self.layers.setdefault(layer, [0, 0])
        entry[0] += int(macs)
        entry[1] += int(acs)
        return self

    def merge(self, *others: "OpLedger") -> "OpLedger":
        for other in others:
            for layer, (m, a) in other.layers.items():
                self.record(layer, m, a)
        return self

    @property
    def mac(self) -> int:
        return sum(m for m, _ in self.layers.values())

    @property
    def ac(self) -> int:
        return sum(a for _, a in self.layers.values())

    def is_empty(self) -> bool:
        return self.mac == 0 and self.ac == 0


def energy_joules(ledger, model: EnergyModel = EnergyModel()) -> float:
    """``e_mac * MAC + e_ac * AC``. Accepts a ledger or a ``(mac, ac)`` pair."""
    mac, ac = _counts(ledger)
    return model.e_mac * mac + model.e_ac * ac


def compare(baseline, candidate, model: EnergyModel = EnergyModel()) -> float:
    """Percent energy reduction of ``candidate`` relative to ``baseline``."""
    e_a = energy_joules(baseline, model)
    e_b = energy_joules(candidate, model)
    if e_a == 0:
        raise ZeroDivisionError("baseline energy is zero")
    return 100.0 * (1.0 - e_b / e_a)


def _counts(ledger):
    if isinstance(ledger, OpLedger):
        return ledger.mac, ledger.ac
    mac, ac = ledger
    return mac, ac


def energy_report(ledger: OpLedger, model: EnergyModel = EnergyModel(), frames: int = 1) -> str:
    """CSV ``layer,mac,ac,energy_j`` with ``total`` and ``per_frame`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "mac", "ac", "energy_j"])
    for layer, (m, a) in ledger.layers.items():
        w.writerow([layer, m, a, f"{energy_joules((m, a), model):.9e}"])
    w.writerow(["total", ledger.mac, ledger.ac, f"{energy_joules(ledger, model):.9e}"])
    if frames > 1:
        w.writerow([
            "per_frame",
            f"{ledger.mac / frames:.1f}",
            f"{ledger.ac / frames:.1f}",
            f"{energy_joules(ledger, model) / frames:.9e}",
        ])
    return buf.getvalue()


def read_energy_report(path) -> OpLedger:
    ledger = OpLedger()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["layer"] in ("total", "per_frame"):
                continue
            ledger.record(row["layer"], int(row["mac"]), int(row["ac"]))
    return ledger
