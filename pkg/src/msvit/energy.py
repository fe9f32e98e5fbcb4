"""Synaptic-operation counting and theoretical energy estimation.

Spiking layers report to the active :class:`Profiler` while one is open::

    with Profiler() as prof:
        model(x)
    report = prof.report(timesteps=cfg.timesteps)
    print(report.table())

FLOPs are counted per sample and per timestep. The firing rate of a layer is
the mean value of its input over a run, so an integer residual input with
value ``k`` counts as ``k`` spikes. SOPs follow ``fr * T * FLOPs``; the energy
total charges accumulates at ``E_AC`` and the entrance layers, which see analog
input, at ``E_MAC``. Batch normalisation, pooling and the neuron update itself
are not charged.
"""
from __future__ import annotations

import contextvars
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

E_MAC_PJ = 4.6
E_AC_PJ = 0.9

_ACTIVE: contextvars.ContextVar[Optional["Profiler"]] = contextvars.ContextVar(
    "msvit_profiler", default=None)


class ProfilerError(ValueError):
    pass


def conv_flops(kernel: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    return kernel * kernel * c_in * c_out * h_out * w_out


def linear_flops(d_in: int, d_out: int, tokens: int = 1) -> int:
    return d_in * d_out * tokens


def count_flops(desc: dict) -> int:
    """FLOPs (MACs, or additions for the attention extras) of one layer for
    one sample and one timestep.

    ``desc["kind"]`` selects the formula:

    - ``conv``: ``k, c_in, c_out, h_out, w_out``
    - ``linear``: ``d_in, d_out`` and optional ``n`` tokens
    - ``mssa_colsum``: ``n, d`` and ``branches`` (N*D additions per branch)
    - ``mssa_gate``: ``n, d``
    - ``ssa_qk`` / ``ssa_av``: ``n, d`` (N^2*D summed over heads)
    """
    kind = desc.get("kind")
    if kind == "conv":
        return conv_flops(desc["k"], desc["c_in"], desc["c_out"], desc["h_out"], desc["w_out"])
    if kind == "linear":
        return linear_flops(desc["d_in"], desc["d_out"], desc.get("n", 1))
    if kind == "mssa_colsum":
        return desc["n"] * desc["d"] * desc.get("branches", 1)
    if kind == "mssa_gate":
        return desc["n"] * desc["d"]
    if kind in ("ssa_qk", "ssa_av"):
        return desc["n"] * desc["n"] * desc["d"]
    raise ProfilerError(f"unknown layer kind: {kind!r}")


@dataclass
class LayerCounter:
    path: str
    kind: str
    flops: int = 0
    spikes: float = 0.0
    elements: int = 0
    sops: float = 0.0
    samples: int = 0
    calls: int = 0
    entrance: bool = False

    @property
    def firing_rate(self) -> Optional[float]:
        if self.elements == 0:
            return None
        return self.spikes / self.elements

    def merge(self, other: "LayerCounter") -> "LayerCounter":
        if (self.path, self.kind, self.flops) != (other.path, other.kind, other.flops):
            raise ProfilerError(f"cannot merge counters for {self.path!r} and {other.path!r}")
        return LayerCounter(
            path=self.path, kind=self.kind, flops=self.flops,
            spikes=self.spikes + other.spikes,
            elements=self.elements + other.elements,
            sops=self.sops + other.sops,
            samples=self.samples + other.samples,
            calls=self.calls + other.calls,
            entrance=self.entrance or other.entrance,
        )


@dataclass
class LayerEnergy:
    path: str
    kind: str
    flops: int
    firing_rate: Optional[float]
    timesteps: int
    sops: float
    energy_pj: float
    entrance: bool = False


@dataclass
class EnergyReport:
    layers: list[LayerEnergy]
    timesteps: int
    e_mac: float = E_MAC_PJ
    e_ac: float = E_AC_PJ
    entrance_energy_pj: float = 0.0
    total_sops: float = 0.0
    total_flops: int = 0
    total_pj: float = 0.0
    ann_pj: float = 0.0
    mean_firing_rate: Optional[float] = None

    @property
    def total_mj(self) -> float:
        return self.total_pj * 1e-9

    @property
    def ann_mj(self) -> float:
        return self.ann_pj * 1e-9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_mj"] = self.total_mj
        d["ann_mj"] = self.ann_mj
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=kw.pop("indent", 2), **kw)

    def table(self) -> str:
        rows = [("layer", "kind", "FLOPs", "fr", "T", "SOPs", "energy_pJ")]
        for layer in self.layers:
            fr = "-" if layer.firing_rate is None else f"{layer.firing_rate:.4f}"
            tag = " (MAC)" if layer.entrance else ""
            rows.append((layer.path + tag, layer.kind, str(layer.flops), fr,
                         str(layer.timesteps), f"{layer.sops:.1f}", f"{layer.energy_pj:.1f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                           for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append("")
        lines.append(f"total FLOPs/sample   {self.total_flops}")
        lines.append(f"total SOPs/sample    {self.total_sops:.1f}")
        lines.append(f"SNN energy           {self.total_mj:.6f} mJ")
        lines.append(f"ANN-equivalent       {self.ann_mj:.6f} mJ")
        return "\n".join(lines)


def compute_energy(counters: Iterable[LayerCounter], timesteps: int,
                   e_mac: float = E_MAC_PJ, e_ac: float = E_AC_PJ) -> EnergyReport:
    """Per-sample energy from per-layer FLOPs and firing rates.

    Spiking layers are charged ``e_ac * fr * T * FLOPs``; entrance layers
    ``e_mac * FLOPs``. The ANN-equivalent figure is ``e_mac`` times the FLOPs of
    every layer.
    """
    layers = []
    ac_sops = 0.0
    mac_flops = 0
    total_flops = 0
    fr_weighted = 0.0
    fr_elems = 0
    for c in counters:
        total_flops += c.flops
        if c.entrance:
            mac_flops += c.flops
            layers.append(LayerEnergy(c.path, c.kind, c.flops, c.firing_rate, timesteps,
                                      0.0, e_mac * c.flops, entrance=True))
            continue
        fr = c.firing_rate
        if fr is None:
            raise ProfilerError(f"missing firing rate for spiking layer {c.path!r}")
        sops = fr * timesteps * c.flops
        ac_sops += sops
        fr_weighted += c.spikes
        fr_elems += c.elements
        layers.append(LayerEnergy(c.path, c.kind, c.flops, fr, timesteps, sops, e_ac * sops))
    entrance_pj = e_mac * mac_flops
    return EnergyReport(
        layers=layers, timesteps=timesteps, e_mac=e_mac, e_ac=e_ac,
        entrance_energy_pj=entrance_pj,
        total_sops=ac_sops,
        total_flops=total_flops,
        total_pj=e_ac * ac_sops + entrance_pj,
        ann_pj=e_mac * total_flops,
        mean_firing_rate=fr_weighted / fr_elems if fr_elems else None,
    )


def ann_energy_pj(flops: int, e_mac: float = E_MAC_PJ) -> float:
    return e_mac * flops


@dataclass
class Profiler:
    """Collects per-layer counters from spiking kernels while active."""

    counters: dict[str, LayerCounter] = field(default_factory=dict)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Profiler":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, path: str, kind: str, flops: int, spikes: float, elements: int,
               samples: int, sops: float = 0.0, entrance: bool = False) -> None:
        new = LayerCounter(path, kind, flops, float(spikes), int(elements), float(sops),
                           int(samples), 1, entrance)
        old = self.counters.get(path)
        self.counters[path] = new if old is None else old.merge(new)

    def merge(self, other: "Profiler") -> "Profiler":
        out = Profiler(dict(self.counters))
        for path, c in other.counters.items():
            out.counters[path] = c if path not in out.counters else out.counters[path].merge(c)
        return out

    def firing_rates(self) -> dict[str, Optional[float]]:
        return {p: c.firing_rate for p, c in self.counters.items()}

    def mean_firing_rate(self) -> Optional[float]:
        spiking = [c for c in self.counters.values() if not c.entrance]
        elems = sum(c.elements for c in spiking)
        return sum(c.spikes for c in spiking) / elems if elems else None

    def realized_sops(self) -> float:
        """SOPs counted directly from spike values and fan-outs, per sample."""
        total = 0.0
        for c in self.counters.values():
            if not c.entrance and c.samples:
                total += c.sops / c.samples
        return total

    def report(self, timesteps: int, **kw) -> EnergyReport:
        return compute_energy(self.counters.values(), timesteps, **kw)


def active_profiler() -> Optional[Profiler]:
    return _ACTIVE.get()
