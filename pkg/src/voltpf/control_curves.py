"""Reactive-power grid-support curves for DER inverters.

Sign convention everywhere: positive Q is injection (over-excited), negative
Q is absorption (under-excited). Power arguments may be kW/kVA or p.u.; every
curve is homogeneous of degree one in its power arguments.

The under-excited droop interval is ``V4 < V < V5``; there is no V3 breakpoint.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

PLAUSIBLE_V = (0.5, 1.5)


@dataclass(frozen=True)
class CurveSettings:
    """Breakpoints and saturation limits shared by the droop curves.

    ``pf_lim_absorb`` is a magnitude; the absorbing direction is carried by
    :class:`SignedPF`, not by a negative number.
    """

    v1: float
    v2: float
    v4: float
    v5: float
    pf_lim_inject: float
    pf_lim_absorb: float
    q_lim_inject_pu: float
    q_lim_absorb_pu: float

    def __post_init__(self):
        if not 0 < self.v1 < self.v2 <= self.v4 < self.v5:
            raise ValueError(f"need 0 < v1 < v2 <= v4 < v5, got "
                             f"{self.v1}, {self.v2}, {self.v4}, {self.v5}")
        for name in ("pf_lim_inject", "pf_lim_absorb"):
            val = getattr(self, name)
            if not 0 < val <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {val}")
        for name in ("q_lim_inject_pu", "q_lim_absorb_pu"):
            val = getattr(self, name)
            if not 0 <= val <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CurveSettings":
        d = d.get("curve_settings", d)
        return cls(**{k: float(d[k]) for k in cls.__dataclass_fields__})


class Excitation(str, enum.Enum):
    INJECT = "inject"
    ABSORB = "absorb"
    UNITY = "unity"

    @property
    def sign(self) -> int:
        return {"inject": 1, "absorb": -1, "unity": 0}[self.value]


@dataclass(frozen=True)
class SignedPF:
    """Power factor magnitude plus the direction of reactive power."""

    magnitude: float
    excitation: Excitation

    def __post_init__(self):
        object.__setattr__(self, "excitation", Excitation(self.excitation))
        if not 0 < self.magnitude <= 1:
            raise ValueError(f"PF magnitude must lie in (0, 1], got {self.magnitude}")
        if (self.excitation is Excitation.UNITY) != (self.magnitude == 1.0):
            raise ValueError("excitation is unity exactly when magnitude == 1")

    @classmethod
    def unity(cls) -> "SignedPF":
        return cls(1.0, Excitation.UNITY)

    @classmethod
    def of(cls, magnitude: float, excitation: str | Excitation) -> "SignedPF":
        """Build a PF, collapsing magnitude 1 to unity whatever the direction."""
        if magnitude == 1.0:
            return cls.unity()
        return cls(magnitude, Excitation(excitation))

    @property
    def signed(self) -> float:
        """Signed scalar: negative for absorption, +1 at unity."""
        return -self.magnitude if self.excitation is Excitation.ABSORB else self.magnitude

    @classmethod
    def from_pq(cls, p: float, q: float) -> "SignedPF":
        """Achieved PF of an operating point; P = 0 reports unity."""
        s = math.hypot(p, q)
        if p <= 0 or s == 0 or q == 0:
            return cls.unity()
        mag = min(1.0, abs(p) / s)
        return cls.of(mag, Excitation.INJECT if q > 0 else Excitation.ABSORB)


class ModeKind(str, enum.Enum):
    UNITY_PF = "unitypf"
    VOLT_VAR = "voltvar"
    VOLT_PF = "voltpf"
    VOLT_PF2 = "voltpf2"
    CONSTANT_PF = "constpf"
    CONSTANT_Q = "constq"


@dataclass(frozen=True)
class ControlMode:
    kind: ModeKind
    pf: Optional[SignedPF] = None
    q_pu: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModeKind(self.kind))
        if self.kind is ModeKind.CONSTANT_PF and self.pf is None:
            raise ValueError("constant-PF mode needs a SignedPF")
        if self.kind is ModeKind.CONSTANT_Q:
            if self.q_pu is None or not abs(self.q_pu) <= 1:
                raise ValueError(f"constant-Q set point must satisfy |q| <= 1, got {self.q_pu}")

    @classmethod
    def unity(cls) -> "ControlMode":
        return cls(ModeKind.UNITY_PF)

    @property
    def label(self) -> str:
        if self.kind is ModeKind.CONSTANT_PF:
            return f"constpf:{self.pf.magnitude:g}{self.pf.excitation.value}"
        if self.kind is ModeKind.CONSTANT_Q:
            return f"constq:{self.q_pu:g}"
        return self.kind.value

    @property
    def issues_pf(self) -> bool:
        """Whether an agent running this mode sends PF rather than Q commands."""
        return self.kind in (ModeKind.VOLT_PF, ModeKind.CONSTANT_PF)

    @classmethod
    def parse(cls, text: str) -> "ControlMode":
        """Parse labels such as ``voltpf``, ``constpf:0.95absorb`` or ``constq:-0.3``."""
        text = text.strip().lower()
        aliases = {"unity": "unitypf", "upf": "unitypf", "volt-var": "voltvar",
                   "volt-pf": "voltpf", "volt-pf2": "voltpf2"}
        head, _, arg = text.partition(":")
        head = aliases.get(head, head)
        kind = ModeKind(head)
        if kind is ModeKind.CONSTANT_PF:
            for exc in ("absorb", "inject"):
                if arg.endswith(exc):
                    return cls(kind, pf=SignedPF.of(float(arg[: -len(exc)]), exc))
            val = float(arg)
            return cls(kind, pf=SignedPF.of(abs(val), "absorb" if val < 0 else "inject"))
        if kind is ModeKind.CONSTANT_Q:
            return cls(kind, q_pu=float(arg))
        return cls(kind)

    def to_json(self):
        if self.kind is ModeKind.CONSTANT_PF:
            return {"kind": self.kind.value, "pf": self.pf.magnitude,
                    "excitation": self.pf.excitation.value}
        if self.kind is ModeKind.CONSTANT_Q:
            return {"kind": self.kind.value, "q_pu": self.q_pu}
        return self.kind.value

    @classmethod
    def from_json(cls, obj) -> "ControlMode":
        if isinstance(obj, str):
            return cls.parse(obj)
        kind = ModeKind(obj["kind"])
        if kind is ModeKind.CONSTANT_PF:
            return cls(kind, pf=SignedPF.of(float(obj["pf"]), obj["excitation"]))
        if kind is ModeKind.CONSTANT_Q:
            return cls(kind, q_pu=float(obj["q_pu"]))
        return cls(kind)


def implausible_voltage(v_pcc: float) -> bool:
    """Flag voltages the curves accept but that indicate bad input."""
    return not PLAUSIBLE_V[0] <= v_pcc <= PLAUSIBLE_V[1]


def voltvar_q(v_pcc: float, s_rated: float, settings: CurveSettings) -> float:
    """Volt-VAr reactive power: piecewise linear in voltage, blind to P."""
    s = settings
    q_in = s.q_lim_inject_pu * s_rated
    q_ab = s.q_lim_absorb_pu * s_rated
    if v_pcc <= s.v1:
        return q_in
    if v_pcc < s.v2:
        return (s.v2 - v_pcc) * q_in / (s.v2 - s.v1)
    if v_pcc <= s.v4:
        return 0.0
    if v_pcc < s.v5:
        return -(v_pcc - s.v4) * q_ab / (s.v5 - s.v4)
    return -q_ab


def voltpf_pf(v_pcc: float, settings: CurveSettings) -> SignedPF:
    """Power-factor set point of the volt-PF curve."""
    s = settings
    if v_pcc <= s.v1:
        return SignedPF.of(s.pf_lim_inject, Excitation.INJECT)
    if v_pcc < s.v2:
        return SignedPF.of(1 - (s.v2 - v_pcc) * (1 - s.pf_lim_inject) / (s.v2 - s.v1),
                           Excitation.INJECT)
    if v_pcc <= s.v4:
        return SignedPF.unity()
    if v_pcc < s.v5:
        return SignedPF.of(1 - (v_pcc - s.v4) * (1 - s.pf_lim_absorb) / (s.v5 - s.v4),
                           Excitation.ABSORB)
    return SignedPF.of(s.pf_lim_absorb, Excitation.ABSORB)


def q_from_pf(p_kw: float, pf: SignedPF) -> float:
    """Q = P * tan(arccos(PF)), signed by the excitation."""
    if p_kw < 0:
        raise ValueError(f"active power must be >= 0, got {p_kw}")
    if pf.magnitude <= 0:
        raise ValueError("PF magnitude 0 has no defined tangent")
    if pf.excitation is Excitation.UNITY:
        return 0.0
    return pf.excitation.sign * p_kw * math.tan(math.acos(pf.magnitude))


def _tan_acos(pf: float) -> float:
    return math.tan(math.acos(pf))


def voltpf_q(v_pcc: float, p_kw: float, settings: CurveSettings) -> float:
    """Volt-PF reactive power evaluated region by region.

    Written out per voltage region rather than through :func:`voltpf_pf`, so
    the composition ``q_from_pf(p, voltpf_pf(v))`` is a genuine cross-check.
    """
    if p_kw < 0:
        raise ValueError(f"active power must be >= 0, got {p_kw}")
    s = settings
    if v_pcc <= s.v1:
        return p_kw * _tan_acos(s.pf_lim_inject)
    if v_pcc < s.v2:
        return p_kw * _tan_acos(1 - (1 - s.pf_lim_inject) * (s.v2 - v_pcc) / (s.v2 - s.v1))
    if v_pcc <= s.v4:
        return 0.0
    if v_pcc < s.v5:
        return -p_kw * _tan_acos(1 - (1 - s.pf_lim_absorb) * (v_pcc - s.v4) / (s.v5 - s.v4))
    return -p_kw * _tan_acos(s.pf_lim_absorb)


def voltpf2_q(v_pcc: float, p_kw: float, p_rated_kw: float, s_rated: float,
              settings: CurveSettings) -> float:
    """Volt-PF ver. 2: the volt-VAr curve scaled by P / P_rated."""
    if p_rated_kw <= 0:
        raise ValueError(f"p_rated_kw must be > 0, got {p_rated_kw}")
    if p_kw < 0:
        raise ValueError(f"active power must be >= 0, got {p_kw}")
    return (p_kw / p_rated_kw) * voltvar_q(v_pcc, s_rated, settings)


def constant_pf_q(p_kw: float, pf: SignedPF) -> float:
    return q_from_pf(p_kw, pf)


def constant_q(q_set_pu: float, s_rated: float) -> float:
    if not abs(q_set_pu) <= 1:
        raise ValueError(f"|q_set_pu| must be <= 1, got {q_set_pu}")
    return q_set_pu * s_rated


def target_q(mode: ControlMode, v_pcc: float, p_kw: float, p_rated_kw: float,
             s_rated: float, settings: Optional[CurveSettings]) -> float:
    """Raw (unclamped) reactive-power target of any control mode."""
    k = mode.kind
    if k is ModeKind.UNITY_PF:
        return 0.0
    if k is ModeKind.CONSTANT_Q:
        return constant_q(mode.q_pu, s_rated)
    if k is ModeKind.CONSTANT_PF:
        return constant_pf_q(p_kw, mode.pf)
    if settings is None:
        raise ValueError(f"mode {k.value} needs curve settings")
    if k is ModeKind.VOLT_VAR:
        return voltvar_q(v_pcc, s_rated, settings)
    if k is ModeKind.VOLT_PF:
        return voltpf_q(v_pcc, p_kw, settings)
    return voltpf2_q(v_pcc, p_kw, p_rated_kw, s_rated, settings)


def apply_capability_limit(p_kw: float, q_kvar: float, s_rated: float) -> tuple[float, float, bool]:
    """Keep (P, Q) inside the apparent-power circle with active-power priority.

    Returns ``(p, q, clamped)``.
    """
    if p_kw < 0:
        raise ValueError(f"active power must be >= 0, got {p_kw}")
    if p_kw * p_kw + q_kvar * q_kvar <= s_rated * s_rated:
        return p_kw, q_kvar, False
    if p_kw >= s_rated:
        return s_rated, 0.0, True
    q_max = math.sqrt(s_rated * s_rated - p_kw * p_kw)
    return p_kw, math.copysign(q_max, q_kvar), True


def preset_ieee1547_default() -> CurveSettings:
    """IEEE 1547-2018 default volt-VAr breakpoints with matching PF limits."""
    return CurveSettings(v1=0.92, v2=0.98, v4=1.02, v5=1.08,
                         pf_lim_inject=0.9, pf_lim_absorb=0.9,
                         q_lim_inject_pu=0.44, q_lim_absorb_pu=0.44)


PRESETS = ("ieee1547_default", "hawaiian_srd_v1_1_example")


def load_preset(name: str) -> CurveSettings:
    """Load a shipped preset by name, or a settings file via ``file:<path>``."""
    if name.startswith("file:"):
        return CurveSettings.from_dict(json.loads(Path(name[5:]).read_text()))
    if name == "ieee1547":
        name = "ieee1547_default"
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS} or file:<path>")
    text = resources.files("voltpf").joinpath("presets", f"{name}.json").read_text()
    return CurveSettings.from_dict(json.loads(text))


def q_surface(v_grid, p_grid, settings: CurveSettings, mode: ControlMode,
              p_rated: float = 1.0, s_rated: Optional[float] = None):
    """Q over a (V, P) grid for plotting; rows follow ``p_grid``."""
    import numpy as np

    if s_rated is None:
        s_rated = p_rated / math.sqrt(1 - 0.44**2)
    out = np.empty((len(p_grid), len(v_grid)))
    for i, p in enumerate(p_grid):
        for j, v in enumerate(v_grid):
            out[i, j] = target_q(mode, float(v), float(p), p_rated, s_rated, settings)
    return out
