"""Structure preservation: which source-branch features replace the edit branch's, and when."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import ConfigurationError, OrchestrationError
from .features import QUERY, RESIDUAL

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InjectionSchedule:
    """Layers and step horizons for query and residual-feature injection.

    A horizon is either ``None`` (every step) or the number of leading steps in
    which injection is active. Use :meth:`scaled` to keep the query horizon
    proportional when the step count is not 50.
    """

    num_steps: int = 50
    query_layers: frozenset[int] = frozenset({12, 13, 14, 15})
    query_steps: int | None = 40
    residual_layers: frozenset[int] = frozenset({7})
    residual_steps: int | None = None
    inject_queries: bool = True
    inject_residuals: bool = True
    available_layers: frozenset[int] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "query_layers", frozenset(int(x) for x in self.query_layers))
        object.__setattr__(self, "residual_layers", frozenset(int(x) for x in self.residual_layers))
        if self.num_steps < 1:
            raise ConfigurationError("num_steps must be positive", field="steps")
        for name in ("query_steps", "residual_steps"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= self.num_steps:
                raise ConfigurationError(f"{name}={v} outside [0, {self.num_steps}]", field=name)

    @classmethod
    def scaled(cls, num_steps: int, query_fraction: float = 0.8, **kwargs):
        """Keep the query horizon at ``query_fraction`` of the steps (40 of 50 by default)."""
        return cls(num_steps=num_steps, query_steps=round(query_fraction * num_steps), **kwargs)

    @classmethod
    def disabled(cls, num_steps: int = 50):
        return cls.scaled(num_steps, inject_queries=False, inject_residuals=False)

    def bind(self, layers) -> "InjectionSchedule":
        """Restrict to a backbone inventory; a configured layer it lacks is an error."""
        available = frozenset(l.index for l in layers)
        wanted = (self.query_layers if self.inject_queries else frozenset()) | \
                 (self.residual_layers if self.inject_residuals else frozenset())
        missing = sorted(wanted - available)
        if missing:
            raise ConfigurationError(f"injection layer {missing[0]} not in backbone inventory "
                                     f"(layers 0..{max(available)})")
        return InjectionSchedule(self.num_steps, self.query_layers, self.query_steps, self.residual_layers,
                                 self.residual_steps, self.inject_queries, self.inject_residuals, available)

    def required_taps(self, step: int) -> list[tuple[int, str]]:
        """(layer, kind) pairs the source branch must record at ``step``."""
        pairs = [(layer, QUERY) for layer in sorted(self.query_layers) if should_inject(step, layer, QUERY, self)]
        pairs += [(layer, RESIDUAL) for layer in sorted(self.residual_layers)
                  if should_inject(step, layer, RESIDUAL, self)]
        return pairs


_warned: set = set()


def should_inject(step: int, layer: int, kind: str, schedule: InjectionSchedule) -> bool:
    if not 0 <= step < schedule.num_steps:
        return False
    if kind == QUERY:
        on, layers, horizon = schedule.inject_queries, schedule.query_layers, schedule.query_steps
    elif kind == RESIDUAL:
        on, layers, horizon = schedule.inject_residuals, schedule.residual_layers, schedule.residual_steps
    else:
        # keys and values carry semantics, never structure
        return False
    if not (on and layer in layers and (horizon is None or step < horizon)):
        return False
    if schedule.available_layers is not None and layer not in schedule.available_layers:
        if (layer, kind) not in _warned:
            _warned.add((layer, kind))
            logger.warning("layer %d is not in the backbone inventory; never injecting %s there", layer, kind)
        return False
    return True


def build_injection_set(source_taps, step: int, schedule: InjectionSchedule) -> list:
    """Pick the source branch's recorded taps that the schedule injects at ``step``."""
    by_key = {(tap.layer, tap.kind): tap for tap in source_taps}
    selected = []
    for layer, kind in schedule.required_taps(step):
        tap = by_key.get((layer, kind))
        if tap is None:
            raise OrchestrationError(f"source branch did not record {kind} at layer {layer} for step {step}")
        if tap.branch != "source":
            raise OrchestrationError(f"tap for layer {layer} ({kind}) at step {step} is not from the source branch")
        selected.append(tap)
    return selected
